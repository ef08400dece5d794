//! Runs one script on two backend configurations and classifies the outcome.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::minisim::{
    first_divergent_probe, run_script, BackendConfig, ExecutionReport, RunOptions, RunStatus,
    ThermoTable,
};
use crate::script::Script;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Norm {
    L1,
    L2,
    Max,
}

impl std::str::FromStr for Norm {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "l1" => Ok(Norm::L1),
            "l2" => Ok(Norm::L2),
            "max" => Ok(Norm::Max),
            other => Err(format!("unknown norm `{other}` (expected l1, l2 or max)")),
        }
    }
}

pub const DEFAULT_THRESHOLD: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompareConfig {
    pub norm: Norm,
    pub threshold: f64,
}

impl Default for CompareConfig {
    fn default() -> Self {
        Self {
            norm: Norm::Max,
            threshold: DEFAULT_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Agree,
    NumericDivergence,
    CrashMismatch,
    BothCrashSame,
    BothCrashDiff,
}

impl Verdict {
    /// Outcomes that indicate a backend inconsistency.
    pub fn is_finding(self) -> bool {
        matches!(
            self,
            Verdict::NumericDivergence | Verdict::CrashMismatch | Verdict::BothCrashDiff
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub verdict: Verdict,
    /// Columns whose normalized distance exceeds the threshold.
    pub diverging_columns: Vec<String>,
    /// Largest per-column distance.
    pub distance: f64,
    pub first_diverging_step: Option<u64>,
    /// First unit after which the backends' observable state differs.
    pub first_divergent_unit: Option<String>,
    pub error_a: Option<String>,
    pub error_b: Option<String>,
}

impl Comparison {
    pub fn dedup_key(&self) -> String {
        match self.verdict {
            Verdict::NumericDivergence => format!(
                "numeric:{}@{}",
                self.diverging_columns.join(","),
                self.first_divergent_unit.as_deref().unwrap_or("-")
            ),
            _ => format!(
                "crash:{}|{}",
                self.error_a.as_deref().unwrap_or("-"),
                self.error_b.as_deref().unwrap_or("-")
            ),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CompareError {
    #[error("neither run produced thermo output")]
    EmptyOutputs,
    #[error("series lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
}

fn reduce(diffs: impl Iterator<Item = f64>, kind: Norm) -> f64 {
    match kind {
        Norm::L1 => diffs.sum(),
        Norm::L2 => diffs.map(|d| d * d).sum::<f64>().sqrt(),
        Norm::Max => diffs.fold(0.0, f64::max),
    }
}

/// Unnormalized distance between two equal-length series.
pub fn norm(a: &[f64], b: &[f64], kind: Norm) -> Result<f64, CompareError> {
    if a.len() != b.len() {
        return Err(CompareError::LengthMismatch(a.len(), b.len()));
    }
    Ok(reduce(a.iter().zip(b).map(|(x, y)| (x - y).abs()), kind))
}

fn column_scale(a: &[f64]) -> f64 {
    a.iter().filter(|v| v.is_finite()).fold(1.0f64, |m, v| m.max(v.abs()))
}

fn row_diff(x: f64, y: f64, scale: f64) -> f64 {
    if (x.is_nan() && y.is_nan()) || x == y {
        return 0.0;
    }
    let d = (x - y).abs() / scale;
    if d.is_nan() {
        f64::INFINITY
    } else {
        d
    }
}

/// Distance between one column of two tables, normalized by the reference
/// column's largest magnitude (at least one).
pub fn column_distance(a: &[f64], b: &[f64], norm: Norm) -> f64 {
    let scale = column_scale(a);
    reduce(a.iter().zip(b).map(|(x, y)| row_diff(*x, *y, scale)), norm)
}

/// First row whose own normalized difference exceeds `threshold`, falling
/// back to the first row that differs at all.
fn first_row_over(a: &[f64], b: &[f64], threshold: f64) -> Option<usize> {
    let scale = column_scale(a);
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| row_diff(*x, *y, scale)).collect();
    diffs
        .iter()
        .position(|d| *d > threshold)
        .or_else(|| diffs.iter().position(|d| *d > 0.0))
}

fn column(t: &ThermoTable, idx: usize, rows: usize) -> Vec<f64> {
    t.rows[..rows].iter().map(|r| r.get(idx).copied().unwrap_or(f64::NAN)).collect()
}

fn crash_site(r: &ExecutionReport) -> Option<String> {
    r.error.as_ref().map(|e| e.location())
}

pub fn compare_reports(
    a: &ExecutionReport,
    b: &ExecutionReport,
    cfg: &CompareConfig,
) -> Result<Comparison, CompareError> {
    let first_divergent_unit =
        first_divergent_probe(&a.probes, &b.probes).map(|p| p.unit.to_string());
    let (ea, eb) = (crash_site(a), crash_site(b));
    let mut cmp = Comparison {
        verdict: Verdict::Agree,
        diverging_columns: Vec::new(),
        distance: 0.0,
        first_diverging_step: None,
        first_divergent_unit,
        error_a: ea.clone(),
        error_b: eb.clone(),
    };
    match (&ea, &eb) {
        (Some(x), Some(y)) => {
            cmp.verdict = if x == y {
                Verdict::BothCrashSame
            } else {
                Verdict::BothCrashDiff
            };
            return Ok(cmp);
        }
        (Some(_), None) | (None, Some(_)) => {
            cmp.verdict = Verdict::CrashMismatch;
            return Ok(cmp);
        }
        (None, None) => {}
    }
    if a.thermo.rows.is_empty() && b.thermo.rows.is_empty() {
        return Err(CompareError::EmptyOutputs);
    }
    let rows = a.thermo.rows.len().min(b.thermo.rows.len());
    for (ia, name) in a.thermo.columns.iter().enumerate() {
        let Some(ib) = b.thermo.column(name) else {
            continue;
        };
        let (ca, cb) = (column(&a.thermo, ia, rows), column(&b.thermo, ib, rows));
        let d = column_distance(&ca, &cb, cfg.norm);
        cmp.distance = cmp.distance.max(d);
        if d > cfg.threshold {
            cmp.diverging_columns.push(name.clone());
            let step = first_row_over(&ca, &cb, cfg.threshold);
            let step_row = step.map(|r| a.thermo.rows[r][0] as u64);
            cmp.first_diverging_step = match (cmp.first_diverging_step, step_row) {
                (Some(x), Some(y)) => Some(x.min(y)),
                (x, y) => x.or(y),
            };
        }
    }
    if a.thermo.rows.len() != b.thermo.rows.len() && !cmp.diverging_columns.iter().any(|c| c == "step") {
        cmp.diverging_columns.insert(0, "step".to_string());
        cmp.distance = f64::INFINITY;
        cmp.first_diverging_step = cmp.first_diverging_step.or_else(|| {
            let r = rows.min(a.thermo.rows.len().saturating_sub(1));
            a.thermo.rows.get(r).or(b.thermo.rows.get(r)).map(|row| row[0] as u64)
        });
    }
    if !cmp.diverging_columns.is_empty() {
        cmp.verdict = Verdict::NumericDivergence;
    }
    Ok(cmp)
}

static IN_PROCESS_RUNS: AtomicU64 = AtomicU64::new(0);

/// Number of simulator executions performed in-process so far.
pub fn in_process_runs() -> u64 {
    IN_PROCESS_RUNS.load(Ordering::Relaxed)
}

/// Number of child processes spawned to execute simulations; always zero.
pub fn spawned_processes() -> u64 {
    0
}

#[derive(Debug, Clone)]
pub struct DiffOutcome {
    pub a: ExecutionReport,
    pub b: ExecutionReport,
    pub comparison: Comparison,
}

#[derive(Debug, Error)]
pub enum DiffError {
    #[error("execution exceeded its time or work budget")]
    Timeout {
        a: Box<ExecutionReport>,
        b: Box<ExecutionReport>,
    },
    #[error(transparent)]
    Compare(#[from] CompareError),
}

pub fn run_differential(
    script: &Script,
    cfg_a: &BackendConfig,
    cfg_b: &BackendConfig,
    opts: &RunOptions,
    cmp: &CompareConfig,
) -> Result<DiffOutcome, DiffError> {
    let a = run_script(script, cfg_a, opts);
    let b = run_script(script, cfg_b, opts);
    IN_PROCESS_RUNS.fetch_add(2, Ordering::Relaxed);
    if a.status == RunStatus::TimedOut || b.status == RunStatus::TimedOut {
        return Err(DiffError::Timeout {
            a: Box::new(a),
            b: Box::new(b),
        });
    }
    let comparison = compare_reports(&a, &b, cmp)?;
    Ok(DiffOutcome { a, b, comparison })
}

/// A backend inconsistency together with the script that triggers it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BugFinding {
    pub key: String,
    pub script: String,
    pub comparison: Comparison,
    pub thermo_a: String,
    pub thermo_b: String,
    /// Seed index and iteration that produced the script, when known.
    pub origin: Option<(usize, usize)>,
}

impl BugFinding {
    pub fn new(script: &Script, outcome: &DiffOutcome) -> Self {
        Self {
            key: outcome.comparison.dedup_key(),
            script: script.to_text(),
            comparison: outcome.comparison.clone(),
            thermo_a: outcome.a.thermo.to_log(),
            thermo_b: outcome.b.thermo.to_log(),
            origin: None,
        }
    }
}

/// Keeps one finding per key: the one with the shortest script, earliest on ties.
pub fn dedupe_bugs(findings: impl IntoIterator<Item = BugFinding>) -> Vec<BugFinding> {
    let mut best: BTreeMap<String, BugFinding> = BTreeMap::new();
    let mut order = Vec::new();
    for f in findings {
        match best.get(&f.key) {
            Some(cur) if cur.script.len() <= f.script.len() => {}
            Some(_) => {
                best.insert(f.key.clone(), f);
            }
            None => {
                order.push(f.key.clone());
                best.insert(f.key.clone(), f);
            }
        }
    }
    order.into_iter().filter_map(|k| best.remove(&k)).collect()
}

/// Campaign identity stamped into every finding written to disk.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub rng_seed: u64,
    pub config_digest: String,
}

#[derive(Serialize)]
struct VerdictFile<'a> {
    #[serde(flatten)]
    provenance: Option<&'a Provenance>,
    #[serde(flatten)]
    finding: &'a BugFinding,
}

/// Writes one directory per finding with the script, both logs, their
/// unified diff, and the comparison as JSON.
pub fn write_findings(
    dir: &Path,
    findings: &[BugFinding],
    provenance: Option<&Provenance>,
) -> io::Result<()> {
    fs::create_dir_all(dir)?;
    for (i, f) in findings.iter().enumerate() {
        let d = dir.join(format!("bug_{i:03}"));
        fs::create_dir_all(&d)?;
        fs::write(d.join("input.script"), &f.script)?;
        fs::write(d.join("thermo_a.log"), &f.thermo_a)?;
        fs::write(d.join("thermo_b.log"), &f.thermo_b)?;
        let diff = similar::TextDiff::from_lines(&f.thermo_a, &f.thermo_b)
            .unified_diff()
            .header("thermo_a.log", "thermo_b.log")
            .to_string();
        fs::write(d.join("thermo.diff"), diff)?;
        let file = VerdictFile {
            provenance,
            finding: f,
        };
        let json = serde_json::to_string_pretty(&file).map_err(io::Error::other)?;
        fs::write(d.join("verdict.json"), json)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::minisim::{BugId, ErrorKind, SimError};
    use crate::script::parse_script;
    use proptest::prelude::*;

    const KINDS: [Norm; 3] = [Norm::L1, Norm::L2, Norm::Max];

    fn report(columns: &[&str], rows: Vec<Vec<f64>>, error: Option<(&str, u64)>) -> ExecutionReport {
        let mut r = ExecutionReport::failed_parse(String::new());
        r.status = if error.is_some() { RunStatus::Failed } else { RunStatus::Completed };
        r.error = error.map(|(unit, step)| SimError {
            kind: ErrorKind::Runtime,
            message: "boom".into(),
            unit: unit.into(),
            step,
        });
        r.entered_dynamics = true;
        r.thermo = ThermoTable {
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows,
        };
        r
    }

    fn table(temps: &[f64]) -> ExecutionReport {
        let rows = temps.iter().enumerate().map(|(i, t)| vec![(10 * i) as f64, *t]).collect();
        report(&["step", "temp"], rows, None)
    }

    #[test]
    fn three_four_five() {
        let (a, b) = ([0.0, 0.0], [3.0, 4.0]);
        assert_eq!(norm(&a, &b, Norm::L1), Ok(7.0));
        assert_eq!(norm(&a, &b, Norm::L2), Ok(5.0));
        assert_eq!(norm(&a, &b, Norm::Max), Ok(4.0));
        assert_eq!(norm(&a, &[1.0], Norm::L1), Err(CompareError::LengthMismatch(2, 1)));
    }

    #[test]
    fn columns_share_one_scale() {
        // A 1e-7 relative error in a column of magnitude 1e4 is 1e-7 after scaling.
        let a = [1.0e4, 2.0e4];
        let b = [1.0e4, 2.0e4 * (1.0 + 1e-7)];
        let d = column_distance(&a, &b, Norm::Max);
        assert!((d - 1e-7).abs() < 1e-12);
        // Columns under one in magnitude are not inflated.
        let small = column_distance(&[0.0, 0.5], &[0.0, 0.501], Norm::Max);
        assert!((small - 1e-3).abs() < 1e-12);
    }

    #[test]
    fn verdict_table() {
        let cfg = CompareConfig::default();
        let same = compare_reports(&table(&[1.0, 1.1]), &table(&[1.0, 1.1]), &cfg).unwrap();
        assert_eq!(same.verdict, Verdict::Agree);
        assert_eq!(same.distance, 0.0);

        let off = compare_reports(&table(&[1.0, 1.1]), &table(&[1.0, 1.2]), &cfg).unwrap();
        assert_eq!(off.verdict, Verdict::NumericDivergence);
        assert_eq!(off.diverging_columns, vec!["temp"]);
        assert_eq!(off.first_diverging_step, Some(10));

        let short = compare_reports(&table(&[1.0, 1.1]), &table(&[1.0]), &cfg).unwrap();
        assert_eq!(short.verdict, Verdict::NumericDivergence);
        assert_eq!(short.diverging_columns, vec!["step"]);

        let crash = report(&["step"], vec![], Some(("k:verlet", 4)));
        let m = compare_reports(&table(&[1.0]), &crash, &cfg).unwrap();
        assert_eq!(m.verdict, Verdict::CrashMismatch);
        let both = compare_reports(&crash, &crash, &cfg).unwrap();
        assert_eq!(both.verdict, Verdict::BothCrashSame);
        assert!(!both.verdict.is_finding());
    }

    #[test]
    fn crashes_at_different_steps_differ() {
        let a = report(&["step", "temp"], vec![vec![0.0, 1.0], vec![10.0, 1.1]], Some(("k:force_soft", 16)));
        let b = report(&["step", "temp"], vec![vec![0.0, 1.0], vec![10.0, 1.1]], Some(("k:verlet", 20)));
        let c = compare_reports(&a, &b, &CompareConfig::default()).unwrap();
        assert_eq!(c.verdict, Verdict::BothCrashDiff);
        assert_eq!(c.dedup_key(), "crash:k:force_soft:16|k:verlet:20");
    }

    #[test]
    fn empty_outputs_are_an_error() {
        let empty = report(&["step"], vec![], None);
        assert_eq!(
            compare_reports(&empty, &empty, &CompareConfig::default()),
            Err(CompareError::EmptyOutputs)
        );
    }

    fn finding(key: &str, script: &str) -> BugFinding {
        let cmp = compare_reports(&table(&[1.0]), &table(&[2.0]), &CompareConfig::default()).unwrap();
        BugFinding {
            key: key.into(),
            script: script.into(),
            comparison: cmp,
            thermo_a: String::new(),
            thermo_b: String::new(),
            origin: None,
        }
    }

    #[test]
    fn dedupe_keeps_shortest_per_key() {
        assert!(dedupe_bugs(Vec::new()).is_empty());
        let out = dedupe_bugs([
            finding("crash:a|b", "long script"),
            finding("numeric:temp@k:verlet", "x"),
            finding("crash:a|b", "short"),
            finding("numeric:pe,temp@k:verlet", "x"),
        ]);
        let keys: Vec<_> = out.iter().map(|f| (f.key.as_str(), f.script.as_str())).collect();
        assert_eq!(
            keys,
            vec![
                ("crash:a|b", "short"),
                ("numeric:temp@k:verlet", "x"),
                ("numeric:pe,temp@k:verlet", "x")
            ]
        );
    }

    #[test]
    fn same_config_agrees_exactly() {
        let script = parse_script(crate::assets::DEFAULT_SEEDS[0].1).unwrap();
        let host = BackendConfig::host();
        let before = in_process_runs();
        let o = run_differential(&script, &host, &host, &RunOptions::default(), &CompareConfig::default()).unwrap();
        assert_eq!(o.comparison.verdict, Verdict::Agree);
        assert_eq!(o.comparison.distance, 0.0);
        assert!(in_process_runs() >= before + 2);
        assert_eq!(spawned_processes(), 0);
    }

    #[test]
    fn clean_device_agrees_within_threshold() {
        let host = BackendConfig::host();
        let device = BackendConfig::device();
        for (_, text) in crate::assets::DEFAULT_SEEDS {
            let script = parse_script(text).unwrap();
            let o = run_differential(&script, &host, &device, &RunOptions::default(), &CompareConfig::default())
                .unwrap();
            assert_eq!(o.comparison.verdict, Verdict::Agree);
            assert!(o.comparison.distance < 1e-12);
        }
    }

    #[test]
    fn bug_reproducer_writes_findings() {
        let entry = &crate::minisim::list_benchmark()[19];
        assert_eq!(entry.id, BugId(20));
        let device = BackendConfig::device().with_bugs([entry.id].into());
        let o = run_differential(
            &entry.reproducer,
            &BackendConfig::host(),
            &device,
            &RunOptions::default(),
            &CompareConfig::default(),
        )
        .unwrap();
        assert!(o.comparison.verdict.is_finding());
        let dir = tempfile::tempdir().unwrap();
        let stamp = Provenance {
            rng_seed: 3,
            config_digest: "abc".into(),
        };
        write_findings(dir.path(), &[BugFinding::new(&entry.reproducer, &o)], Some(&stamp)).unwrap();
        let bug = dir.path().join("bug_000");
        for f in ["input.script", "thermo_a.log", "thermo_b.log", "thermo.diff", "verdict.json"] {
            assert!(bug.join(f).is_file(), "{f}");
        }
        let diff = std::fs::read_to_string(bug.join("thermo.diff")).unwrap();
        assert!(diff.starts_with("--- thermo_a.log"));
        let verdict: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(bug.join("verdict.json")).unwrap()).unwrap();
        assert_eq!(verdict["rng_seed"], 3);
        assert_eq!(verdict["config_digest"], "abc");
    }

    fn brute(a: &[f64], b: &[f64], kind: Norm) -> f64 {
        let mut acc = 0.0f64;
        for i in 0..a.len() {
            let d = if a[i] > b[i] { a[i] - b[i] } else { b[i] - a[i] };
            acc = match kind {
                Norm::L1 => acc + d,
                Norm::L2 => acc + d * d,
                Norm::Max => {
                    if d > acc {
                        d
                    } else {
                        acc
                    }
                }
            };
        }
        if kind == Norm::L2 {
            acc.sqrt()
        } else {
            acc
        }
    }

    fn pair() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<f64>)> {
        (1usize..=64).prop_flat_map(|n| {
            let v = || prop::collection::vec(-1e3..1e3f64, n);
            (v(), v(), v())
        })
    }

    proptest! {
        #[test]
        fn norms_match_brute_force((a, b, _) in pair()) {
            for k in KINDS {
                let got = norm(&a, &b, k).unwrap();
                let want = brute(&a, &b, k);
                prop_assert!((got - want).abs() <= 1e-12 * want.max(1e-300));
            }
        }

        #[test]
        fn norm_axioms((a, b, c) in pair()) {
            for k in KINDS {
                let ab = norm(&a, &b, k).unwrap();
                prop_assert!(ab >= 0.0);
                prop_assert_eq!(norm(&a, &a, k).unwrap(), 0.0);
                prop_assert_eq!(ab, norm(&b, &a, k).unwrap());
                let ac = norm(&a, &c, k).unwrap();
                let cb = norm(&c, &b, k).unwrap();
                prop_assert!(ab <= (ac + cb) * (1.0 + 1e-12));
            }
        }

        #[test]
        fn raising_threshold_never_adds_divergence(
            temps in prop::collection::vec(0.5..2.0f64, 1..10),
            noise in prop::collection::vec(-1e-3..1e-3f64, 10),
            t1 in 0.0..1e-2f64,
            dt in 0.0..1e-2f64,
        ) {
            let other: Vec<f64> = temps.iter().zip(&noise).map(|(t, n)| t + n).collect();
            let (a, b) = (table(&temps), table(&other));
            let lo = compare_reports(&a, &b, &CompareConfig { norm: Norm::L2, threshold: t1 }).unwrap();
            let hi = compare_reports(&a, &b, &CompareConfig { norm: Norm::L2, threshold: t1 + dt }).unwrap();
            if lo.verdict == Verdict::Agree {
                prop_assert_eq!(hi.verdict, Verdict::Agree);
            }
            prop_assert!(hi.diverging_columns.len() <= lo.diverging_columns.len());
        }
    }
}
