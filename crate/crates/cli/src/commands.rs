//! Subcommand bodies. Each returns the exit status; errors map to [`Exit::Usage`].

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use heterofuzz::assets;
use heterofuzz::diffdrive::{write_findings, Provenance};
use heterofuzz::extractor::{build_subsystem, environment_tag, trace_run};
use heterofuzz::fuzzer::{format_table, run_campaign, CampaignReport, Mode, ReplayError, Transcript};
use heterofuzz::grammar::{load_grammar, Defaults};
use heterofuzz::minisim::{BugId, BugSet};
use heterofuzz::script::{parse_script, Script};
use heterofuzz::seedgen::{
    generate_seeds, write_corpus, MiniSimExecutor, OfflineGenerator, RemoteGenerator, ScriptGenerator,
};
use serde::Serialize;

use crate::config::{GeneratorConfig, RunConfig};

/// Process exit statuses; stable across releases.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exit {
    Clean = 0,
    /// Findings were reported or a replay did not reproduce.
    Findings = 1,
    Usage = 2,
}

fn parsed_seeds(cfg: &RunConfig) -> Result<Vec<(String, Script)>> {
    cfg.seed_inputs()?
        .into_iter()
        .map(|s| {
            let script = parse_script(&s.text).with_context(|| format!("seed {}", s.name))?;
            Ok((s.name, script))
        })
        .collect()
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn cmd_seeds(cfg: &RunConfig) -> Result<Exit> {
    let req = cfg.seed_request()?;
    let rng_seed = cfg.rng_seed();
    let mut generator: Box<dyn ScriptGenerator> = match &cfg.generator {
        None | Some(GeneratorConfig::Offline) => {
            let grammar = load_grammar(&cfg.grammar_text()?)?;
            let seeds = parsed_seeds(cfg)?;
            let defaults = Defaults::from_lines(seeds.iter().flat_map(|(_, s)| s.lines()));
            Box::new(OfflineGenerator::new(grammar, defaults, rng_seed))
        }
        Some(GeneratorConfig::Remote {
            endpoint,
            model,
            timeout_secs,
            ..
        }) => Box::new(RemoteGenerator {
            endpoint: endpoint.clone(),
            model: model.clone(),
            api_key_env: cfg.api_key_env(),
            timeout: std::time::Duration::from_secs_f64(*timeout_secs),
        }),
    };
    let batch = generate_seeds(&req, generator.as_mut(), &MiniSimExecutor::default())?;
    for f in &batch.failures {
        eprintln!("combination {:?} failed after {} attempt(s): {}", f.params, f.attempts, f.reason);
    }
    if batch.records.is_empty() {
        bail!("the generator produced no valid seed for any parameter combination");
    }
    let dir = cfg.out_dir().join("corpus");
    write_corpus(&dir, &batch.records, Some(rng_seed), Some(&cfg.digest()))
        .with_context(|| format!("writing corpus to {}", dir.display()))?;
    for (k, r) in batch.records.iter().enumerate() {
        println!("seed_{k}: attempt {} params {:?}", r.attempt, r.params);
    }
    println!("wrote {} seed(s) to {}", batch.records.len(), dir.display());
    Ok(Exit::Clean)
}

pub fn cmd_extract(cfg: &RunConfig) -> Result<Exit> {
    let seeds = parsed_seeds(cfg)?;
    // Traced on the clean second environment; injected bugs never alter paths.
    let (_, env) = cfg.environments(BugSet::new())?;
    let env = env.with_bugs(BugSet::new());
    let log = trace_run(seeds.iter().map(|(n, s)| (n.as_str(), s)), &env);
    for s in log.failed_seeds() {
        eprintln!("{} did not complete: {}", s.name, s.failure.as_deref().unwrap_or(""));
    }
    let mut manifest = build_subsystem(&log, &environment_tag(&env))?;
    manifest.rng_seed = Some(cfg.rng_seed());
    manifest.config_digest = Some(cfg.digest());
    let path = cfg.out_dir().join("manifest.json");
    manifest.save(&path)?;
    println!(
        "kept {} stubbed {} ({:.1}% of units, {:.1}% of kernels) -> {}",
        manifest.kept.len(),
        manifest.stubbed.len(),
        100.0 * manifest.reduction.units,
        100.0 * manifest.reduction.kernels,
        path.display()
    );
    Ok(Exit::Clean)
}

fn stamp(rng_seed: u64, digest: &str, table: &str) -> String {
    format!("# rng_seed={rng_seed} config_digest={digest}\n{table}")
}

pub fn cmd_fuzz(cfg: &RunConfig) -> Result<Exit> {
    let fcfg = cfg.fuzz_config(Mode::KernelSensitive, BugSet::new())?;
    let run = run_campaign(&fcfg)?;
    let r = &run.report;
    let out = cfg.out_dir();
    write_text(&out.join("transcript.jsonl"), &run.transcript)?;
    write_text(&out.join("report.json"), &r.to_json())?;
    let table = format_table(&[(r.mode.name().to_string(), r)]);
    write_text(&out.join("report.txt"), &stamp(r.rng_seed, &r.config_digest, &table))?;
    let provenance = Provenance {
        rng_seed: r.rng_seed,
        config_digest: r.config_digest.clone(),
    };
    let bugs = out.join("bugs");
    write_findings(&bugs, &r.unique_bugs, Some(&provenance)).with_context(|| format!("writing {}", bugs.display()))?;
    print!("{table}");
    let ids: Vec<String> = r.detected.iter().map(BugId::to_string).collect();
    println!(
        "{} unique finding(s); benchmark bugs detected: [{}]",
        r.unique_bugs.len(),
        ids.join(" ")
    );
    Ok(if r.unique_bugs.is_empty() {
        Exit::Clean
    } else {
        Exit::Findings
    })
}

#[derive(Serialize)]
struct BenchRow<'a> {
    label: &'a str,
    report: &'a CampaignReport,
}

#[derive(Serialize)]
struct BenchFile<'a> {
    rng_seed: u64,
    config_digest: &'a str,
    rows: Vec<BenchRow<'a>>,
}

pub fn cmd_bench(cfg: &RunConfig, with_manifest: bool) -> Result<Exit> {
    let base = cfg.fuzz_config(Mode::KernelSensitive, BugId::all())?;
    let mut configs = Vec::new();
    for mode in Mode::ALL {
        let mut c = base.clone();
        c.mode = mode;
        c.manifest = None;
        configs.push((mode.name().to_string(), c));
    }
    if with_manifest {
        let mut c = base.clone();
        c.mode = Mode::KernelSensitive;
        c.manifest = Some(base.manifest.clone().unwrap_or_else(assets::default_manifest));
        configs.push(("kernel_sensitive+m".to_string(), c));
    }
    let mut reports = Vec::new();
    for (label, c) in &configs {
        reports.push((label.clone(), run_campaign(c)?.report));
    }
    let rows: Vec<(String, &CampaignReport)> = reports.iter().map(|(l, r)| (l.clone(), r)).collect();
    let table = format_table(&rows);
    let digest = base.digest();
    let out = cfg.out_dir();
    write_text(&out.join("bench.txt"), &stamp(base.rng_seed, &digest, &table))?;
    let file = BenchFile {
        rng_seed: base.rng_seed,
        config_digest: &digest,
        rows: reports
            .iter()
            .map(|(label, report)| BenchRow { label, report })
            .collect(),
    };
    let mut json = serde_json::to_string_pretty(&file)?;
    json.push('\n');
    write_text(&out.join("bench.json"), &json)?;
    print!("{table}");
    Ok(Exit::Clean)
}

pub fn cmd_replay(cfg: &RunConfig, path: &Path, iteration: Option<usize>, sample: usize) -> Result<Exit> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let t = Transcript::parse(&text)?;
    if let Some(i) = iteration {
        return match t.replay(i) {
            Ok(outcome) => {
                println!("iteration {i}: reproduced {outcome:?}");
                Ok(Exit::Clean)
            }
            Err(e @ ReplayError::Mismatch { .. }) => {
                println!("{e}");
                Ok(Exit::Findings)
            }
            Err(e) => Err(e.into()),
        };
    }
    let n = sample.min(t.records.len());
    let mismatches = t.replay_sample(n, cfg.rng_seed.unwrap_or(t.rng_seed));
    for m in &mismatches {
        println!("{m}");
    }
    println!("replayed {n} iteration(s): {} mismatch(es)", mismatches.len());
    Ok(if mismatches.is_empty() {
        Exit::Clean
    } else {
        Exit::Findings
    })
}
