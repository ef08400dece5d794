//! Campaign orchestration: line selection, mutation, differential
//! evaluation, schedule feedback, and the LC/CPI/UBC/BP accounting.
//!
//! Each seed script is walked independently. A candidate replaces the
//! current script only when both backends agree on it and it is valid, so the
//! walk stays inside the space of inputs the backends handle identically.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::str::FromStr;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::diffdrive::{
    compare_reports, dedupe_bugs, run_differential, BugFinding, CompareConfig, DiffError,
    DiffOutcome, Verdict,
};
use crate::extractor::Manifest;
use crate::grammar::{load_grammar, Defaults, Grammar};
use crate::minisim::bugs::bug_at;
use crate::minisim::{
    run_script, BackendConfig, BugId, BugSet, ExecutionReport, RunOptions, RunStatus, UNIVERSE,
};
use crate::profiler::{signal, KernelMetrics, Schedule};
use crate::script::{parse_script_bytes, Script};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    KernelSensitive,
    GrammarOnly,
    RandomBytes,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::KernelSensitive, Mode::GrammarOnly, Mode::RandomBytes];

    pub fn name(self) -> &'static str {
        match self {
            Mode::KernelSensitive => "kernel_sensitive",
            Mode::GrammarOnly => "grammar_only",
            Mode::RandomBytes => "random_bytes",
        }
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "kernel_sensitive" | "kernel-sensitive" | "ks" => Ok(Mode::KernelSensitive),
            "grammar_only" | "grammar-only" | "grammar" => Ok(Mode::GrammarOnly),
            "random_bytes" | "random-bytes" | "random" => Ok(Mode::RandomBytes),
            other => Err(format!(
                "unknown mode `{other}` (expected kernel_sensitive, grammar_only or random_bytes)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Budget {
    /// Iterations per seed script.
    pub iterations: u64,
    /// Optional wall-clock cap per seed script. Campaigns that hit it are not
    /// reproducible.
    #[serde(default)]
    pub wall_clock_secs: Option<u64>,
}

/// Iterations per seed used by the acceptance campaigns.
pub const DESK_ITERATIONS: u64 = 200;

/// Per-run cap on pair evaluations; runs that exceed it count as timeouts.
pub const DEFAULT_WORK_BUDGET: u64 = 50_000_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedInput {
    pub name: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FuzzConfig {
    pub seeds: Vec<SeedInput>,
    pub grammar: String,
    pub manifest: Option<Manifest>,
    pub env_a: BackendConfig,
    pub env_b: BackendConfig,
    pub compare: CompareConfig,
    pub rng_seed: u64,
    pub budget: Budget,
    pub mode: Mode,
    pub work_budget: u64,
    /// Concurrent seed workers; results do not depend on it.
    #[serde(skip)]
    pub workers: usize,
}

impl FuzzConfig {
    /// Host against device with the shipped grammar and corpus.
    pub fn shipped(mode: Mode, bugs: BugSet, rng_seed: u64, iterations: u64) -> Self {
        Self {
            seeds: crate::assets::DEFAULT_SEEDS
                .iter()
                .map(|(n, t)| SeedInput {
                    name: n.to_string(),
                    text: t.to_string(),
                })
                .collect(),
            grammar: crate::assets::DEFAULT_GRAMMAR.to_string(),
            manifest: None,
            env_a: BackendConfig::host(),
            env_b: BackendConfig::device().with_bugs(bugs),
            compare: CompareConfig::default(),
            rng_seed,
            budget: Budget {
                iterations,
                wall_clock_secs: None,
            },
            mode,
            work_budget: DEFAULT_WORK_BUDGET,
            workers: 1,
        }
    }

    /// Digest of everything that affects results.
    pub fn digest(&self) -> String {
        digest_json(self)
    }

    pub fn active_bugs(&self) -> BugSet {
        self.env_a.bugs.union(&self.env_b.bugs).copied().collect()
    }

    pub fn run_options(&self) -> RunOptions {
        RunOptions {
            timeout: None,
            work_budget: Some(self.work_budget),
            stubs: self
                .manifest
                .as_ref()
                .map(|m| m.stubbed.clone())
                .unwrap_or_default(),
        }
    }
}

/// SHA-256 of the compact JSON form of `value`, hex encoded.
pub fn digest_json<T: Serialize + ?Sized>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("value serializes");
    hex::encode(Sha256::digest(&json).as_slice())
}

#[derive(Debug, Error)]
pub enum FuzzError {
    #[error("configuration: {0}")]
    Config(String),
}

fn config_error(msg: impl Into<String>) -> FuzzError {
    FuzzError::Config(msg.into())
}

/// Draws a line index from the schedule.
pub fn select_line<R: Rng + ?Sized>(schedule: &Schedule, rng: &mut R) -> usize {
    schedule.sample(rng)
}

/// The script a seed walk currently stands on.
#[derive(Debug, Clone)]
pub enum Current {
    Script(Script),
    Bytes(Vec<u8>),
}

#[derive(Debug, Clone)]
pub struct SeedState {
    pub index: usize,
    pub current: Current,
    pub schedule: Schedule,
    pub prev: Option<KernelMetrics>,
    pub iteration: u64,
}

/// A mutated candidate ready for evaluation.
#[derive(Debug, Clone)]
pub enum Proposal {
    Line { line: usize, script: Script },
    Bytes { ops: Vec<String>, bytes: Vec<u8> },
}

/// Verdict of one iteration; serialized as the bare verdict name or `timeout`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum Outcome {
    Verdict(Verdict),
    Timeout,
}

impl From<Outcome> for String {
    fn from(o: Outcome) -> String {
        outcome_name(o)
    }
}

impl TryFrom<String> for Outcome {
    type Error = String;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        if s == "timeout" {
            return Ok(Outcome::Timeout);
        }
        serde_json::from_value(serde_json::Value::String(s.clone()))
            .map(Outcome::Verdict)
            .map_err(|_| format!("unknown outcome `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub seed: usize,
    pub iteration: u64,
    pub line: Option<usize>,
    pub mutation: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub script: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub script_hex: Option<String>,
    pub outcome: Outcome,
    pub valid: bool,
    pub metrics: KernelMetrics,
    pub signal: Option<f64>,
    pub schedule: Vec<f64>,
    pub schedule_digest: String,
    pub new_units: usize,
    pub adopted: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finding: Option<String>,
    #[serde(default, skip_serializing_if = "BTreeSet::is_empty")]
    pub bugs: BTreeSet<BugId>,
}

impl IterationRecord {
    pub fn script_bytes(&self) -> Vec<u8> {
        match (&self.script, &self.script_hex) {
            (Some(s), _) => s.as_bytes().to_vec(),
            (None, Some(h)) => hex::decode(h).unwrap_or_default(),
            (None, None) => Vec::new(),
        }
    }
}

fn schedule_digest(s: &Schedule) -> String {
    let mut h = Sha256::new();
    for p in s.probs() {
        h.update(p.to_le_bytes());
    }
    hex::encode(&h.finalize().as_slice()[..8])
}

/// Benchmark bugs a differential outcome points at, restricted to the active
/// set. The first divergent unit wins; crash sites are consulted only when it
/// is not a bug site, since a crash usually trails the real divergence.
pub fn attribute(outcome: &DiffOutcome, active: &BugSet) -> BTreeSet<BugId> {
    if !outcome.comparison.verdict.is_finding() {
        return BTreeSet::new();
    }
    let hit = |u: &str| bug_at(u).filter(|b| active.contains(b));
    if let Some(b) = outcome.comparison.first_divergent_unit.as_deref().and_then(hit) {
        return [b].into();
    }
    [&outcome.a, &outcome.b]
        .into_iter()
        .filter_map(|r| r.error.as_ref())
        .filter_map(|e| hit(&e.unit))
        .collect()
}

/// Executes an already parsed or unparseable candidate on both backends.
fn differential_bytes(
    bytes: &[u8],
    cfg: &FuzzConfig,
    opts: &RunOptions,
) -> Result<DiffOutcome, DiffError> {
    match parse_script_bytes(bytes) {
        Ok(script) => run_differential(&script, &cfg.env_a, &cfg.env_b, opts, &cfg.compare),
        Err(e) => {
            let a = ExecutionReport::failed_parse(e.to_string());
            let b = a.clone();
            let comparison = compare_reports(&a, &b, &cfg.compare)?;
            Ok(DiffOutcome { a, b, comparison })
        }
    }
}

pub struct IterationResult {
    pub record: IterationRecord,
    pub covered: BTreeSet<&'static str>,
    pub finding: Option<BugFinding>,
}

/// Shared, read-only campaign context.
pub struct Campaign<'c> {
    pub cfg: &'c FuzzConfig,
    pub grammar: Grammar,
    pub defaults: Defaults,
    pub seeds: Vec<Script>,
    opts: RunOptions,
    active: BugSet,
}

impl<'c> Campaign<'c> {
    pub fn new(cfg: &'c FuzzConfig) -> Result<Self, FuzzError> {
        if cfg.seeds.is_empty() {
            return Err(config_error("no seed scripts"));
        }
        if cfg.env_a == cfg.env_b {
            return Err(config_error("the two environments are identical"));
        }
        let t = cfg.compare.threshold;
        if t.is_nan() || t < 0.0 || t.is_infinite() {
            return Err(config_error("threshold must be a finite non-negative number"));
        }
        if let Some(m) = &cfg.manifest {
            let tags = [
                crate::extractor::environment_tag(&cfg.env_a),
                crate::extractor::environment_tag(&cfg.env_b),
            ];
            if !tags.contains(&m.environment) {
                return Err(config_error(format!(
                    "manifest was extracted for `{}`, which is not in the environment pair",
                    m.environment
                )));
            }
        }
        let grammar = load_grammar(&cfg.grammar).map_err(|e| config_error(format!("grammar: {e}")))?;
        let mut seeds = Vec::new();
        for s in &cfg.seeds {
            let script = crate::script::parse_script(&s.text)
                .map_err(|e| config_error(format!("{}: {e}", s.name)))?;
            if script.is_empty() {
                return Err(config_error(format!("{}: empty script", s.name)));
            }
            seeds.push(script);
        }
        let defaults = Defaults::from_lines(seeds.iter().flat_map(|s| s.lines()));
        Ok(Self {
            cfg,
            grammar,
            defaults,
            seeds,
            opts: cfg.run_options(),
            active: cfg.active_bugs(),
        })
    }

    pub fn seed_rng(&self, index: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.rng_seed);
        rng.set_stream(index as u64);
        rng
    }

    pub fn initial_state(&self, index: usize) -> SeedState {
        let seed = &self.seeds[index];
        let current = match self.cfg.mode {
            Mode::RandomBytes => Current::Bytes(seed.to_text().into_bytes()),
            _ => Current::Script(seed.clone()),
        };
        SeedState {
            index,
            current,
            schedule: Schedule::uniform(seed.len()),
            prev: None,
            iteration: 0,
        }
    }

    /// Selects and mutates according to the mode.
    pub fn propose<R: Rng + ?Sized>(&self, st: &SeedState, rng: &mut R) -> Proposal {
        match &st.current {
            Current::Script(script) => {
                let line = select_line(&st.schedule, rng);
                let original = &script.lines()[line];
                let mutated = self
                    .grammar
                    .mutate_line(original, &self.defaults, rng)
                    .unwrap_or_else(|_| original.clone());
                Proposal::Line {
                    line,
                    script: script.with_line(line, mutated),
                }
            }
            Current::Bytes(bytes) => {
                let (bytes, ops) = havoc(bytes, rng);
                Proposal::Bytes { ops, bytes }
            }
        }
    }

    /// Runs a proposal on both backends and folds the outcome into `st`.
    pub fn evaluate(&self, st: &mut SeedState, proposal: Proposal) -> IterationResult {
        let (line, mutation, bytes, outcome) = match &proposal {
            Proposal::Line { line, script } => (
                Some(*line),
                script.lines()[*line].to_string(),
                script.to_text().into_bytes(),
                run_differential(script, &self.cfg.env_a, &self.cfg.env_b, &self.opts, &self.cfg.compare),
            ),
            Proposal::Bytes { ops, bytes } => (
                None,
                ops.join(" "),
                bytes.clone(),
                differential_bytes(bytes, self.cfg, &self.opts),
            ),
        };
        let (script, script_hex) = match String::from_utf8(bytes.clone()) {
            Ok(s) => (Some(s), None),
            Err(_) => (None, Some(hex::encode(&bytes))),
        };
        let mut record = IterationRecord {
            seed: st.index,
            iteration: st.iteration,
            line,
            mutation,
            script,
            script_hex,
            outcome: Outcome::Timeout,
            valid: false,
            metrics: KernelMetrics::default(),
            signal: None,
            schedule: Vec::new(),
            schedule_digest: String::new(),
            new_units: 0,
            adopted: false,
            finding: None,
            bugs: BTreeSet::new(),
        };
        st.iteration += 1;
        let mut covered = BTreeSet::new();
        let mut finding = None;
        match outcome {
            Err(DiffError::Timeout { b, .. }) => {
                record.metrics = KernelMetrics::from_events(&b.events);
            }
            Err(DiffError::Compare(_)) => {
                record.outcome = Outcome::Verdict(Verdict::BothCrashSame);
            }
            Ok(o) => {
                let verdict = o.comparison.verdict;
                record.outcome = Outcome::Verdict(verdict);
                record.valid = o.a.is_valid() && o.b.is_valid();
                let metrics = KernelMetrics::from_events(&o.b.events);
                record.metrics = metrics;
                if self.cfg.mode == Mode::KernelSensitive {
                    if let (Some(prev), Some(line)) = (st.prev, line) {
                        let s = signal(&prev, &metrics);
                        st.schedule.update(line, s).expect("selected line is in range");
                        record.signal = Some(s);
                    }
                    st.prev = Some(metrics);
                }
                if record.valid {
                    covered.extend(o.a.covered.iter().copied());
                    covered.extend(o.b.covered.iter().copied());
                }
                if verdict.is_finding() {
                    record.bugs = attribute(&o, &self.active);
                    let script_text = record
                        .script
                        .clone()
                        .unwrap_or_else(|| String::from_utf8_lossy(&bytes).into_owned());
                    let f = BugFinding {
                        key: o.comparison.dedup_key(),
                        script: script_text,
                        comparison: o.comparison.clone(),
                        thermo_a: o.a.thermo.to_log(),
                        thermo_b: o.b.thermo.to_log(),
                        origin: Some((st.index, record.iteration as usize)),
                    };
                    record.finding = Some(f.key.clone());
                    finding = Some(f);
                }
                if verdict == Verdict::Agree && record.valid {
                    record.adopted = true;
                    st.current = match proposal {
                        Proposal::Line { script, .. } => Current::Script(script),
                        Proposal::Bytes { bytes, .. } => Current::Bytes(bytes),
                    };
                }
            }
        }
        record.schedule = st.schedule.probs().to_vec();
        record.schedule_digest = schedule_digest(&st.schedule);
        IterationResult {
            record,
            covered,
            finding,
        }
    }

    pub fn fuzz_iteration<R: Rng + ?Sized>(&self, st: &mut SeedState, rng: &mut R) -> IterationResult {
        let proposal = self.propose(st, rng);
        self.evaluate(st, proposal)
    }

    fn run_seed(&self, index: usize) -> SeedRun {
        let mut rng = self.seed_rng(index);
        let mut st = self.initial_state(index);
        let mut run = SeedRun::default();
        let start = Instant::now();
        let cap = self.cfg.budget.wall_clock_secs.map(Duration::from_secs);
        for _ in 0..self.cfg.budget.iterations {
            if cap.is_some_and(|c| start.elapsed() >= c) {
                run.truncated = true;
                break;
            }
            let r = self.fuzz_iteration(&mut st, &mut rng);
            let before = run.covered.len();
            run.covered.extend(r.covered.iter().copied());
            let mut record = r.record;
            record.new_units = run.covered.len() - before;
            run.findings.extend(r.finding);
            run.records.push(record);
        }
        run
    }
}

#[derive(Debug, Default)]
struct SeedRun {
    records: Vec<IterationRecord>,
    covered: BTreeSet<&'static str>,
    findings: Vec<BugFinding>,
    truncated: bool,
}

const MAGIC_INTS: [i64; 12] = [0, 1, 2, 8, 16, 32, 64, 100, 127, 255, 1000, 4096];

/// Stacks one to four byte-level mutations: bit flips, random byte
/// insertions and arithmetic tweaks of decimal integers.
pub fn havoc<R: Rng + ?Sized>(input: &[u8], rng: &mut R) -> (Vec<u8>, Vec<String>) {
    let mut out = input.to_vec();
    let mut ops = Vec::new();
    let n = rng.random_range(1..=4);
    for _ in 0..n {
        match rng.random_range(0..3) {
            0 if !out.is_empty() => {
                let i = rng.random_range(0..out.len());
                let bit = rng.random_range(0..8);
                out[i] ^= 1 << bit;
                ops.push(format!("flip@{i}.{bit}"));
            }
            1 => {
                let i = rng.random_range(0..=out.len());
                let b: u8 = rng.random();
                out.insert(i, b);
                ops.push(format!("insert@{i}={b:02x}"));
            }
            _ => {
                let spans = integer_spans(&out);
                if spans.is_empty() {
                    let i = rng.random_range(0..=out.len());
                    out.insert(i, b'0');
                    ops.push(format!("insert@{i}=30"));
                    continue;
                }
                let (s, e) = spans[rng.random_range(0..spans.len())];
                let old: i64 = std::str::from_utf8(&out[s..e])
                    .ok()
                    .and_then(|t| t.parse().ok())
                    .unwrap_or(0);
                let new = if rng.random_bool(0.5) {
                    let d = rng.random_range(1..=35);
                    if rng.random_bool(0.5) {
                        old + d
                    } else {
                        old - d
                    }
                } else {
                    MAGIC_INTS[rng.random_range(0..MAGIC_INTS.len())]
                };
                out.splice(s..e, new.to_string().into_bytes());
                ops.push(format!("int@{s}:{old}->{new}"));
            }
        }
    }
    (out, ops)
}

fn integer_spans(bytes: &[u8]) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i].is_ascii_digit() {
            let s = i;
            while i < bytes.len() && bytes[i].is_ascii_digit() {
                i += 1;
            }
            spans.push((s, i));
        } else {
            i += 1;
        }
    }
    spans
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReportMetrics {
    pub lc_percent: f64,
    pub cpi: f64,
    pub ubc: usize,
    pub bp: usize,
}

/// LC is covered over denominator in percent; CPI divides it by the valid
/// input count, guarded to at least one.
pub fn compute_report_metrics(
    covered: usize,
    denominator: usize,
    valid: u64,
    unique_bugs: usize,
    detected: usize,
) -> ReportMetrics {
    let lc_percent = if denominator == 0 {
        0.0
    } else {
        100.0 * covered as f64 / denominator as f64
    };
    ReportMetrics {
        lc_percent,
        cpi: lc_percent / valid.max(1) as f64,
        ubc: unique_bugs,
        bp: detected,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignReport {
    pub mode: Mode,
    pub rng_seed: u64,
    pub config_digest: String,
    pub iterations: u64,
    pub valid_count: u64,
    pub invalid_count: u64,
    pub timeouts: u64,
    pub verdicts: BTreeMap<String, u64>,
    pub covered: BTreeSet<String>,
    pub lc_denominator: usize,
    pub metrics: ReportMetrics,
    pub unique_bugs: Vec<BugFinding>,
    pub detected: BTreeSet<BugId>,
    pub truncated_seeds: Vec<usize>,
}

impl CampaignReport {
    pub fn non_agree(&self) -> u64 {
        self.verdicts
            .iter()
            .filter(|(k, _)| k.as_str() != "agree")
            .map(|(_, v)| v)
            .sum()
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

fn outcome_name(o: Outcome) -> String {
    match o {
        Outcome::Timeout => "timeout".into(),
        Outcome::Verdict(v) => serde_json::to_value(v)
            .ok()
            .and_then(|v| v.as_str().map(str::to_string))
            .unwrap_or_default(),
    }
}

/// Campaign result plus the full transcript text.
pub struct CampaignRun {
    pub report: CampaignReport,
    pub transcript: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    kind: String,
    rng_seed: u64,
    config_digest: String,
    config: FuzzConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct IterationLine {
    kind: String,
    #[serde(flatten)]
    record: IterationRecord,
}

pub fn run_campaign(cfg: &FuzzConfig) -> Result<CampaignRun, FuzzError> {
    let campaign = Campaign::new(cfg)?;
    let indices: Vec<usize> = (0..campaign.seeds.len()).collect();
    let runs: Vec<SeedRun> = if cfg.workers > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.workers)
            .build()
            .map_err(|e| config_error(e.to_string()))?;
        pool.install(|| indices.par_iter().map(|i| campaign.run_seed(*i)).collect())
    } else {
        indices.iter().map(|i| campaign.run_seed(*i)).collect()
    };

    let digest = cfg.digest();
    let mut transcript = String::new();
    let header = Header {
        kind: "header".into(),
        rng_seed: cfg.rng_seed,
        config_digest: digest.clone(),
        config: cfg.clone(),
    };
    transcript.push_str(&serde_json::to_string(&header).expect("header serializes"));
    transcript.push('\n');

    let mut covered: BTreeSet<&'static str> = BTreeSet::new();
    let mut findings = Vec::new();
    let mut verdicts: BTreeMap<String, u64> = BTreeMap::new();
    let (mut valid, mut invalid, mut timeouts, mut iterations) = (0u64, 0u64, 0u64, 0u64);
    let mut detected = BTreeSet::new();
    let mut truncated = Vec::new();
    for (i, run) in runs.into_iter().enumerate() {
        if run.truncated {
            truncated.push(i);
        }
        covered.extend(run.covered);
        findings.extend(run.findings);
        for record in run.records {
            iterations += 1;
            *verdicts.entry(outcome_name(record.outcome)).or_default() += 1;
            match (record.outcome, record.valid) {
                (Outcome::Timeout, _) => timeouts += 1,
                (_, true) => valid += 1,
                (_, false) => invalid += 1,
            }
            detected.extend(record.bugs.iter().copied());
            let line = IterationLine {
                kind: "iteration".into(),
                record,
            };
            transcript.push_str(&serde_json::to_string(&line).expect("record serializes"));
            transcript.push('\n');
        }
    }
    let (covered, denominator): (BTreeSet<String>, usize) = match &cfg.manifest {
        Some(m) => (
            covered.iter().filter(|u| m.kept.contains(**u)).map(|u| u.to_string()).collect(),
            m.kept.len(),
        ),
        None => (covered.iter().map(|u| u.to_string()).collect(), UNIVERSE.len()),
    };
    let unique_bugs = dedupe_bugs(findings);
    let metrics = compute_report_metrics(covered.len(), denominator, valid, unique_bugs.len(), detected.len());
    let report = CampaignReport {
        mode: cfg.mode,
        rng_seed: cfg.rng_seed,
        config_digest: digest,
        iterations,
        valid_count: valid,
        invalid_count: invalid,
        timeouts,
        verdicts,
        covered,
        lc_denominator: denominator,
        metrics,
        unique_bugs,
        detected,
        truncated_seeds: truncated,
    };
    Ok(CampaignRun { report, transcript })
}

/// Fixed-width table with one row per labelled report.
pub fn format_table(rows: &[(String, &CampaignReport)]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<18} {:>7} {:>8} {:>8} {:>9} {:>10} {:>5} {:>4}",
        "mode", "valid", "invalid", "timeout", "LC%", "CPI", "UBC", "BP"
    );
    for (label, r) in rows {
        let _ = writeln!(
            out,
            "{:<18} {:>7} {:>8} {:>8} {:>9.2} {:>10.5} {:>5} {:>4}",
            label,
            r.valid_count,
            r.invalid_count,
            r.timeouts,
            r.metrics.lc_percent,
            r.metrics.cpi,
            r.metrics.ubc,
            r.metrics.bp
        );
    }
    out
}

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error("malformed transcript: {0}")]
    Malformed(String),
    #[error("iteration {index} out of range (transcript has {len})")]
    OutOfRange { index: usize, len: usize },
    #[error("replay mismatch at seed {seed} iteration {iteration}: recorded {recorded}, replayed {replayed}")]
    Mismatch {
        seed: usize,
        iteration: u64,
        recorded: String,
        replayed: String,
    },
}

/// A parsed transcript.
pub struct Transcript {
    pub rng_seed: u64,
    pub config_digest: String,
    pub config: FuzzConfig,
    pub records: Vec<IterationRecord>,
}

impl Transcript {
    pub fn parse(text: &str) -> Result<Self, ReplayError> {
        let mut lines = text.lines();
        let first = lines.next().ok_or_else(|| ReplayError::Malformed("empty".into()))?;
        let header: Header =
            serde_json::from_str(first).map_err(|e| ReplayError::Malformed(format!("header: {e}")))?;
        if header.kind != "header" {
            return Err(ReplayError::Malformed("first record is not a header".into()));
        }
        if header.config.digest() != header.config_digest {
            return Err(ReplayError::Malformed("config digest does not match the embedded config".into()));
        }
        let mut records = Vec::new();
        for (n, line) in lines.enumerate() {
            let rec: IterationLine = serde_json::from_str(line)
                .map_err(|e| ReplayError::Malformed(format!("record {n}: {e}")))?;
            records.push(rec.record);
        }
        Ok(Self {
            rng_seed: header.rng_seed,
            config_digest: header.config_digest,
            config: header.config,
            records,
        })
    }

    /// Re-executes record `index` and checks its verdict.
    pub fn replay(&self, index: usize) -> Result<Outcome, ReplayError> {
        let rec = self.records.get(index).ok_or(ReplayError::OutOfRange {
            index,
            len: self.records.len(),
        })?;
        let cfg = &self.config;
        let replayed = match differential_bytes(&rec.script_bytes(), cfg, &cfg.run_options()) {
            Ok(o) => Outcome::Verdict(o.comparison.verdict),
            Err(DiffError::Timeout { .. }) => Outcome::Timeout,
            Err(DiffError::Compare(_)) => Outcome::Verdict(Verdict::BothCrashSame),
        };
        if replayed != rec.outcome {
            return Err(ReplayError::Mismatch {
                seed: rec.seed,
                iteration: rec.iteration,
                recorded: outcome_name(rec.outcome),
                replayed: outcome_name(replayed),
            });
        }
        Ok(replayed)
    }

    /// Replays `n` records drawn without replacement; returns the mismatches.
    pub fn replay_sample(&self, n: usize, rng_seed: u64) -> Vec<ReplayError> {
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        let picks = rand::seq::index::sample(&mut rng, self.records.len(), n.min(self.records.len()));
        picks
            .into_iter()
            .filter_map(|i| self.replay(i).err())
            .collect()
    }
}

/// Runs a single script once per backend, for inspection.
pub fn run_pair(script: &Script, cfg: &FuzzConfig) -> (ExecutionReport, ExecutionReport) {
    let opts = cfg.run_options();
    (run_script(script, &cfg.env_a, &opts), run_script(script, &cfg.env_b, &opts))
}

/// True when the run finished without error.
pub fn completed(r: &ExecutionReport) -> bool {
    r.status == RunStatus::Completed
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::script::parse_script;

    fn short_seed_cfg(mode: Mode, text: &str) -> FuzzConfig {
        let mut cfg = FuzzConfig::shipped(mode, BugSet::new(), 7, 4);
        cfg.seeds = vec![SeedInput {
            name: "s".into(),
            text: text.into(),
        }];
        cfg
    }

    fn seed0() -> String {
        crate::assets::DEFAULT_SEEDS[0].1.to_string()
    }

    #[test]
    fn selection_follows_the_schedule() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let draws = 100_000;
        let s = Schedule::uniform(4);
        let mut hits = [0usize; 4];
        for _ in 0..draws {
            hits[select_line(&s, &mut rng)] += 1;
        }
        for h in hits {
            assert!((h as f64 / draws as f64 - 0.25).abs() < 0.01);
        }
        let mut s = Schedule::uniform(2);
        // 0.5 * 1.5 / 1.25 = 0.6, then 0.6 * 1.5 / 1.3 = 0.6923.., and so on.
        while s.probs()[0] < 0.9 {
            s.update(0, 0.5).unwrap();
        }
        let p0 = s.probs()[0];
        let zeros = (0..draws).filter(|_| select_line(&s, &mut rng) == 0).count();
        assert!((zeros as f64 / draws as f64 - p0).abs() < 0.01);
    }

    #[test]
    fn longer_run_raises_the_signal_and_the_line() {
        let base = seed0().replace("run 50", "run 10");
        let cfg = short_seed_cfg(Mode::KernelSensitive, &base);
        let c = Campaign::new(&cfg).unwrap();
        let mut st = c.initial_state(0);
        let run_line = c.seeds[0].len() - 1;
        let same = Proposal::Line {
            line: run_line,
            script: c.seeds[0].clone(),
        };
        let first = c.evaluate(&mut st, same.clone()).record;
        assert_eq!(first.signal, None);
        let again = c.evaluate(&mut st, same).record;
        assert_eq!(again.signal, Some(0.0));
        assert_eq!(st.schedule, Schedule::uniform(c.seeds[0].len()));

        let longer = parse_script(&seed0()).unwrap();
        let before = st.schedule.probs()[run_line];
        let r = c
            .evaluate(
                &mut st,
                Proposal::Line {
                    line: run_line,
                    script: longer,
                },
            )
            .record;
        assert!(r.signal.unwrap() > 0.0);
        assert!(st.schedule.probs()[run_line] > before);
        assert!(r.adopted);
    }

    #[test]
    fn grammar_only_never_touches_the_schedule() {
        let cfg = short_seed_cfg(Mode::GrammarOnly, &seed0());
        let run = run_campaign(&cfg).unwrap();
        let t = Transcript::parse(&run.transcript).unwrap();
        let uniform = Schedule::uniform(17);
        for r in &t.records {
            assert_eq!(r.signal, None);
            assert_eq!(r.schedule, uniform.probs());
        }
    }

    #[test]
    fn report_metric_formulas() {
        let m = compute_report_metrics(1368, 10_000, 960, 3, 2);
        assert!((m.lc_percent - 13.68).abs() < 1e-12);
        assert!((m.cpi - 0.01425).abs() < 1e-12);
        assert_eq!((m.ubc, m.bp), (3, 2));
        let none = compute_report_metrics(5, 10, 0, 0, 0);
        assert_eq!(none.cpi, 50.0);
        assert_eq!(compute_report_metrics(0, 0, 4, 0, 0).lc_percent, 0.0);
    }

    #[test]
    fn havoc_is_deterministic_and_bounded() {
        let text = seed0().into_bytes();
        let mut a = ChaCha8Rng::seed_from_u64(3);
        let mut b = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let (x, ox) = havoc(&text, &mut a);
            let (y, oy) = havoc(&text, &mut b);
            assert_eq!((x, &ox), (y, &oy));
            assert!((1..=4).contains(&ox.len()));
        }
        assert_eq!(integer_spans(b"a 12 b3 -7"), vec![(2, 4), (6, 7), (9, 10)]);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = short_seed_cfg(Mode::GrammarOnly, &seed0());
        cfg.env_b = cfg.env_a.clone();
        assert!(matches!(Campaign::new(&cfg), Err(FuzzError::Config(_))));
        let mut cfg = short_seed_cfg(Mode::GrammarOnly, &seed0());
        cfg.compare.threshold = f64::NAN;
        assert!(Campaign::new(&cfg).is_err());
        let cfg = short_seed_cfg(Mode::GrammarOnly, "");
        assert!(Campaign::new(&cfg).is_err());
        let mut cfg = short_seed_cfg(Mode::GrammarOnly, &seed0());
        cfg.grammar = "{".into();
        assert!(Campaign::new(&cfg).is_err());
    }

    #[test]
    fn campaigns_are_reproducible_and_replayable() {
        for mode in Mode::ALL {
            let cfg = short_seed_cfg(mode, &seed0());
            let a = run_campaign(&cfg).unwrap();
            let b = run_campaign(&cfg).unwrap();
            assert_eq!(a.transcript, b.transcript);
            assert_eq!(a.report, b.report);
            let t = Transcript::parse(&a.transcript).unwrap();
            assert_eq!(t.records.len(), 4);
            assert!(t.replay_sample(4, 0).is_empty());
        }
    }

    #[test]
    fn workers_do_not_change_results() {
        let mut cfg = FuzzConfig::shipped(Mode::KernelSensitive, BugId::all(), 5, 3);
        let serial = run_campaign(&cfg).unwrap();
        cfg.workers = 3;
        let parallel = run_campaign(&cfg).unwrap();
        assert_eq!(serial.transcript, parallel.transcript);
    }

    #[test]
    fn tampered_transcripts_fail_replay() {
        let cfg = short_seed_cfg(Mode::KernelSensitive, &seed0());
        let run = run_campaign(&cfg).unwrap();
        let mut t = Transcript::parse(&run.transcript).unwrap();
        t.records[0].outcome = Outcome::Verdict(Verdict::CrashMismatch);
        assert!(matches!(t.replay(0), Err(ReplayError::Mismatch { .. })));
        assert!(matches!(t.replay(99), Err(ReplayError::OutOfRange { .. })));

        let forged = run.transcript.replacen("\"rng_seed\":7", "\"rng_seed\":8", 2);
        assert!(matches!(Transcript::parse(&forged), Err(ReplayError::Malformed(_))));
    }
}
