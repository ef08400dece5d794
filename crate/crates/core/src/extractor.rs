//! Trace-based subsystem extraction.
//!
//! Seeds run with first-hit unit logging; the union of hit units is kept and
//! every other unit of the universe is stubbed. Loading a manifest into
//! [`RunOptions::stubs`] makes entry into a stubbed unit fail with
//! `StubReached`.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::minisim::{is_kernel, run_script, BackendConfig, Backend, RunOptions, UNIVERSE};
use crate::script::Script;

#[derive(Debug, Error)]
pub enum ExtractError {
    #[error("trace is empty: no seed entered any unit")]
    EmptyTrace,
    #[error("manifest I/O")]
    Io(#[from] std::io::Error),
    #[error("manifest format")]
    Format(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedTrace {
    pub name: String,
    /// Units in first-hit order.
    pub units: Vec<String>,
    /// Crash site and message when the seed did not complete.
    pub failure: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceLog {
    pub executed: BTreeSet<String>,
    pub per_seed: Vec<SeedTrace>,
}

impl TraceLog {
    pub fn failed_seeds(&self) -> impl Iterator<Item = &SeedTrace> {
        self.per_seed.iter().filter(|s| s.failure.is_some())
    }
}

/// Runs every seed once and merges the units each one entered. A failing seed
/// still contributes its partial trace and is flagged in its [`SeedTrace`].
pub fn trace_run<'a>(
    seeds: impl IntoIterator<Item = (&'a str, &'a Script)>,
    cfg: &BackendConfig,
) -> TraceLog {
    let mut log = TraceLog::default();
    let opts = RunOptions::default();
    for (name, script) in seeds {
        let report = run_script(script, cfg, &opts);
        let units: Vec<String> = report.first_hits.iter().map(|u| u.to_string()).collect();
        log.executed.extend(units.iter().cloned());
        log.per_seed.push(SeedTrace {
            name: name.to_string(),
            units,
            failure: report.error.as_ref().map(ToString::to_string),
        });
    }
    log
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Reduction {
    /// Stubbed share of all units.
    pub units: f64,
    /// Stubbed share of kernel units.
    pub kernels: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub environment: String,
    pub kept: BTreeSet<String>,
    pub stubbed: BTreeSet<String>,
    pub reduction: Reduction,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rng_seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_digest: Option<String>,
}

fn share(part: usize, whole: usize) -> f64 {
    if whole == 0 {
        0.0
    } else {
        part as f64 / whole as f64
    }
}

pub fn environment_tag(cfg: &BackendConfig) -> String {
    match cfg.backend {
        Backend::Host => "host".into(),
        Backend::Device => "device".into(),
    }
}

/// Keeps traced units and stubs the rest of the universe.
pub fn build_subsystem(log: &TraceLog, environment: &str) -> Result<Manifest, ExtractError> {
    if log.executed.is_empty() {
        return Err(ExtractError::EmptyTrace);
    }
    let mut kept = BTreeSet::new();
    let mut stubbed = BTreeSet::new();
    for u in UNIVERSE {
        if log.executed.contains(*u) {
            kept.insert(u.to_string());
        } else {
            stubbed.insert(u.to_string());
        }
    }
    // Units outside the universe (none today) stay kept so traced paths never stub.
    kept.extend(log.executed.iter().cloned());
    let kernels = UNIVERSE.iter().filter(|u| is_kernel(u)).count();
    let stubbed_kernels = stubbed.iter().filter(|u| is_kernel(u)).count();
    Ok(Manifest {
        environment: environment.to_string(),
        reduction: Reduction {
            units: share(stubbed.len(), UNIVERSE.len()),
            kernels: share(stubbed_kernels, kernels),
        },
        kept,
        stubbed,
        rng_seed: None,
        config_digest: None,
    })
}

impl Manifest {
    pub fn run_options(&self) -> RunOptions {
        RunOptions {
            stubs: self.stubbed.clone(),
            ..RunOptions::default()
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, ExtractError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), ExtractError> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ExtractError> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::minisim::ErrorKind;
    use crate::script::parse_script;

    const MINIMAL: &str = "lattice sc 1.0\nregion box block 0 2 0 2 0 2\ncreate_box 1 box\ncreate_atoms 1 box\nrun 5\n";

    fn minimal() -> Script {
        parse_script(MINIMAL).unwrap()
    }

    #[test]
    fn unreached_pair_kernels_are_not_traced() {
        let s = minimal();
        let log = trace_run([("m", &s)], &BackendConfig::device());
        assert!(log.executed.contains("cmd:create_box"));
        assert!(log.executed.contains("cmd:run"));
        for style in ["soft", "harmonic", "gauss", "morse"] {
            assert!(!log.executed.contains(&format!("k:force_{style}")));
            assert!(!log.executed.contains(&format!("k:pe_{style}")));
            assert!(!log.executed.contains(&format!("pair:{style}")));
        }
    }

    #[test]
    fn tracing_is_deterministic() {
        let s = minimal();
        let a = trace_run([("m", &s)], &BackendConfig::device());
        let b = trace_run([("m", &s)], &BackendConfig::device());
        assert_eq!(a, b);
        let units = &a.per_seed[0].units;
        let unique: BTreeSet<_> = units.iter().collect();
        assert_eq!(unique.len(), units.len());
    }

    #[test]
    fn failing_seed_still_contributes() {
        let bad = parse_script("lattice sc 1.0\ncreate_atoms 1 box\n").unwrap();
        let log = trace_run([("bad", &bad)], &BackendConfig::host());
        assert_eq!(log.failed_seeds().count(), 1);
        assert!(log.executed.contains("cmd:lattice"));
    }

    #[test]
    fn full_trace_stubs_nothing() {
        let log = TraceLog {
            executed: UNIVERSE.iter().map(|u| u.to_string()).collect(),
            per_seed: Vec::new(),
        };
        let m = build_subsystem(&log, "device").unwrap();
        assert!(m.stubbed.is_empty());
        assert_eq!(m.reduction.units, 0.0);
        assert_eq!(m.reduction.kernels, 0.0);
    }

    #[test]
    fn reduction_is_set_arithmetic() {
        let executed: BTreeSet<String> = UNIVERSE.iter().take(12).map(|u| u.to_string()).collect();
        let log = TraceLog {
            executed,
            per_seed: Vec::new(),
        };
        let m = build_subsystem(&log, "device").unwrap();
        assert_eq!(m.kept.len(), 12);
        assert_eq!(m.kept.len() + m.stubbed.len(), UNIVERSE.len());
        assert!(m.kept.is_disjoint(&m.stubbed));
        let expected = (UNIVERSE.len() - 12) as f64 / UNIVERSE.len() as f64;
        assert_eq!(m.reduction.units, expected);
    }

    #[test]
    fn empty_trace_is_rejected() {
        assert!(matches!(
            build_subsystem(&TraceLog::default(), "host"),
            Err(ExtractError::EmptyTrace)
        ));
    }

    #[test]
    fn drifting_into_a_stub_stops_immediately() {
        let s = minimal();
        let m = build_subsystem(&trace_run([("m", &s)], &BackendConfig::device()), "device").unwrap();
        let drift = parse_script(&MINIMAL.replace("run 5", "pair_style soft 1.5\nrun 5")).unwrap();
        let r = run_script(&drift, &BackendConfig::device(), &m.run_options());
        let err = r.error.expect("stub hit");
        assert_eq!(err.kind, ErrorKind::StubReached);
        assert_eq!(err.unit, "cmd:pair_style");
        assert!(!r.covered.contains("cmd:pair_style"));
        assert!(!r.covered.contains("cmd:run"));
    }
}
