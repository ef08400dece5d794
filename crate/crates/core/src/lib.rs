pub mod assets;
pub mod diffdrive;
pub mod extractor;
pub mod fuzzer;
pub mod grammar;
pub mod minisim;
pub mod profiler;
pub mod script;
pub mod seedgen;
