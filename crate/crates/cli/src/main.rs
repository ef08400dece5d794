use clap::Parser;

fn main() {
    std::process::exit(heterofuzz_cli::run(heterofuzz_cli::Cli::parse()));
}
