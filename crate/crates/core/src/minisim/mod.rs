//! MiniSim: a small particle-dynamics engine with a host backend and a
//! simulated device backend built on mirrored host/device arrays.
//!
//! Both backends run the same handler and kernel sequence. They differ only in
//! where kernels execute, in the order device reductions accumulate, and in
//! whichever injected bugs are enabled on the device side.

pub mod bugs;
mod engine;
pub mod memory;
pub mod units;

use std::collections::BTreeSet;
use std::fmt;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::script::{parse_script, Script};

pub use bugs::{list_benchmark, BugCategory, BugEntry, BugId, BugSet};
pub use memory::{Backend, EventKind, RuntimeEvent};
pub use units::{is_kernel, Unit, UNIVERSE};

/// Order in which reductions sum per-atom contributions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccumulationOrder {
    Sequential,
    /// Visits indices `s, s+k, s+2k, ...` for each start `s < k`.
    Strided(usize),
}

impl AccumulationOrder {
    pub fn sum(self, vals: &[f64]) -> f64 {
        match self {
            AccumulationOrder::Sequential => vals.iter().sum(),
            AccumulationOrder::Strided(k) => {
                let k = k.max(1);
                let mut acc = 0.0;
                for start in 0..k {
                    let mut i = start;
                    while i < vals.len() {
                        acc += vals[i];
                        i += k;
                    }
                }
                acc
            }
        }
    }
}

pub const DEVICE_STRIDE: usize = 8;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendConfig {
    pub backend: Backend,
    pub order: AccumulationOrder,
    pub bugs: BugSet,
}

impl BackendConfig {
    pub fn host() -> Self {
        Self {
            backend: Backend::Host,
            order: AccumulationOrder::Sequential,
            bugs: BugSet::new(),
        }
    }

    pub fn device() -> Self {
        Self {
            backend: Backend::Device,
            order: AccumulationOrder::Strided(DEVICE_STRIDE),
            bugs: BugSet::new(),
        }
    }

    pub fn with_bugs(mut self, bugs: BugSet) -> Self {
        self.bugs = bugs;
        self
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RunOptions {
    pub timeout: Option<Duration>,
    /// Upper bound on pair evaluations; exceeding it ends the run as timed out.
    pub work_budget: Option<u64>,
    /// Units whose entry aborts the run.
    pub stubs: BTreeSet<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorKind {
    Parse,
    Semantic,
    Runtime,
    StubReached,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimError {
    pub kind: ErrorKind,
    pub message: String,
    pub unit: String,
    pub step: u64,
}

impl SimError {
    /// `unit:step`, the crash site used for deduplication.
    pub fn location(&self) -> String {
        format!("{}:{}", self.unit, self.step)
    }
}

impl fmt::Display for SimError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ERROR at {}: {}", self.location(), self.message)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    Failed,
    TimedOut,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ThermoTable {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl ThermoTable {
    pub fn column(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    /// Whitespace-separated log with a header line.
    pub fn to_log(&self) -> String {
        let mut out = self.columns.join(" ");
        out.push('\n');
        for row in &self.rows {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:.10e}")).collect();
            out.push_str(&cells.join(" "));
            out.push('\n');
        }
        out
    }
}

/// State digest recorded after a unit returns.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Probe {
    pub unit: Unit,
    pub step: u64,
    /// Weighted magnitudes of positions, velocities, forces, per-atom
    /// properties, parameter tables, and the unit's scalar output.
    pub digest: [f64; 6],
}

#[derive(Debug, Clone, Serialize)]
pub struct ExecutionReport {
    pub status: RunStatus,
    pub error: Option<SimError>,
    pub thermo: ThermoTable,
    pub events: Vec<RuntimeEvent>,
    pub covered: BTreeSet<Unit>,
    /// Units in the order they were first entered.
    pub first_hits: Vec<Unit>,
    pub probes: Vec<Probe>,
    pub entered_dynamics: bool,
    pub sync_violations: u64,
    pub work: u64,
}

impl ExecutionReport {
    /// A script is valid when it gets past input processing: no parse or
    /// semantic error before dynamics start and no stubbed unit reached.
    pub fn is_valid(&self) -> bool {
        match &self.error {
            None => true,
            Some(e) => match e.kind {
                ErrorKind::StubReached => false,
                ErrorKind::Parse | ErrorKind::Semantic => self.entered_dynamics,
                ErrorKind::Runtime => true,
            },
        }
    }

    pub(crate) fn failed_parse(message: String) -> Self {
        Self {
            status: RunStatus::Failed,
            error: Some(SimError {
                kind: ErrorKind::Parse,
                message,
                unit: "input".into(),
                step: 0,
            }),
            thermo: ThermoTable::default(),
            events: Vec::new(),
            covered: BTreeSet::new(),
            first_hits: Vec::new(),
            probes: Vec::new(),
            entered_dynamics: false,
            sync_violations: 0,
            work: 0,
        }
    }
}

pub const PROBE_TOLERANCE: f64 = 1e-7;

fn digest_close(a: &[f64; 6], b: &[f64; 6]) -> bool {
    a.iter().zip(b).all(|(x, y)| {
        if x.is_nan() || y.is_nan() {
            return x.is_nan() && y.is_nan();
        }
        if x == y {
            return true;
        }
        (x - y).abs() <= PROBE_TOLERANCE * x.abs().max(y.abs()).max(1.0)
    })
}

/// First unit after which the two runs' observable state differs.
pub fn first_divergent_probe<'a>(a: &'a [Probe], b: &'a [Probe]) -> Option<&'a Probe> {
    for (pa, pb) in a.iter().zip(b) {
        if pa.unit != pb.unit || pa.step != pb.step || !digest_close(&pa.digest, &pb.digest) {
            return Some(pb);
        }
    }
    if a.len() != b.len() {
        return b.get(a.len()).or_else(|| a.get(b.len()));
    }
    None
}

pub fn run_script(script: &Script, cfg: &BackendConfig, opts: &RunOptions) -> ExecutionReport {
    engine::Sim::new(cfg, opts).execute(script)
}

/// Parses and runs raw text; unparseable text yields a failed parse report.
pub fn run_text(text: &str, cfg: &BackendConfig, opts: &RunOptions) -> ExecutionReport {
    match parse_script(text) {
        Ok(script) => run_script(&script, cfg, opts),
        Err(e) => ExecutionReport::failed_parse(e.to_string()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strided_sum_visits_everything() {
        let v: Vec<f64> = (1..=10).map(f64::from).collect();
        assert_eq!(AccumulationOrder::Strided(3).sum(&v), 55.0);
        assert_eq!(AccumulationOrder::Sequential.sum(&v), 55.0);
    }

    #[test]
    fn strided_sum_reassociates() {
        let v = [1e16, 1.0, -1e16, 1.0];
        assert_eq!(AccumulationOrder::Sequential.sum(&v), 1.0);
        assert_eq!(AccumulationOrder::Strided(2).sum(&v), 2.0);
    }
}
