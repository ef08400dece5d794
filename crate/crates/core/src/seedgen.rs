//! Seed generation: prompt a script generator, validate its output on the
//! simulator, feed diagnostics back into the prompt, and keep the first
//! script that runs cleanly for each generator parameter combination.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::OnceLock;
use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::grammar::{Defaults, Grammar};
use crate::minisim::{run_text, BackendConfig, ExecutionReport, RunOptions, RunStatus};
use crate::script::{parse_script, Script, ScriptLine};

pub const PROMPT_TEMPLATE: &str = "You are a helpful assistant who understands how to use <SUT name> for scientific simulation. Generate a simulation script that can be executed on <SUT name> to simulate <simulation description>. Do not provide any explanations and do not add any comments and blank lines in the script.";

pub const TIMEOUT_FEEDBACK: &str = "modify the script to reduce the execution time";

/// Joins a prompt and an appended diagnostic.
pub const FEEDBACK_SEPARATOR: &str = "\n";

/// One generator parameter combination, e.g. `{"temperature": 0.7}`.
pub type Params = BTreeMap<String, f64>;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SeedgenError {
    #[error("empty {0}")]
    EmptyInput(&'static str),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GeneratorError {
    #[error("generator unavailable: {0}")]
    Unavailable(String),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ExecutorError {
    #[error("executor unavailable: {0}")]
    Unavailable(String),
}

pub fn build_prompt(sut_name: &str, sim_desc: &str) -> Result<String, SeedgenError> {
    if sut_name.trim().is_empty() {
        return Err(SeedgenError::EmptyInput("SUT name"));
    }
    if sim_desc.trim().is_empty() {
        return Err(SeedgenError::EmptyInput("simulation description"));
    }
    Ok(PROMPT_TEMPLATE
        .replace("<SUT name>", sut_name)
        .replace("<simulation description>", sim_desc))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValidationStatus {
    Ok,
    Error,
    Timeout,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationResult {
    pub status: ValidationStatus,
    /// Empty iff `status` is `Ok`.
    pub error_text: String,
}

impl ValidationResult {
    pub fn ok() -> Self {
        Self {
            status: ValidationStatus::Ok,
            error_text: String::new(),
        }
    }

    pub fn is_ok(&self) -> bool {
        self.status == ValidationStatus::Ok
    }
}

/// Appends the diagnostic, or the fixed timeout request, to `prompt`.
pub fn refine_prompt(prompt: &str, result: &ValidationResult) -> String {
    let feedback = match result.status {
        ValidationStatus::Ok => return prompt.to_string(),
        ValidationStatus::Error => result.error_text.as_str(),
        ValidationStatus::Timeout => TIMEOUT_FEEDBACK,
    };
    format!("{prompt}{FEEDBACK_SEPARATOR}{feedback}")
}

/// Produces script text for a prompt.
pub trait ScriptGenerator {
    fn generate(&mut self, prompt: &str, params: &Params) -> Result<String, GeneratorError>;
}

/// Runs script text on the reference environment.
pub trait SutExecutor {
    fn execute(&self, text: &str, timeout: Duration) -> Result<ExecutionReport, ExecutorError>;
}

/// Executes on an in-process MiniSim backend.
#[derive(Debug, Clone)]
pub struct MiniSimExecutor {
    pub cfg: BackendConfig,
}

impl Default for MiniSimExecutor {
    fn default() -> Self {
        Self {
            cfg: BackendConfig::host(),
        }
    }
}

impl SutExecutor for MiniSimExecutor {
    fn execute(&self, text: &str, timeout: Duration) -> Result<ExecutionReport, ExecutorError> {
        let opts = RunOptions {
            timeout: Some(timeout),
            ..RunOptions::default()
        };
        Ok(run_text(text, &self.cfg, &opts))
    }
}

pub fn validate_script(
    text: &str,
    exec: &dyn SutExecutor,
    timeout: Duration,
) -> Result<ValidationResult, ExecutorError> {
    let report = exec.execute(text, timeout)?;
    Ok(match report.status {
        RunStatus::Completed => ValidationResult::ok(),
        RunStatus::TimedOut => ValidationResult {
            status: ValidationStatus::Timeout,
            error_text: TIMEOUT_FEEDBACK.to_string(),
        },
        RunStatus::Failed => ValidationResult {
            status: ValidationStatus::Error,
            error_text: report
                .error
                .map(|e| e.to_string())
                .unwrap_or_else(|| "ERROR: run failed".into()),
        },
    })
}

fn fence_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?s)```[^\n]*\n(.*?)```").expect("valid regex"))
}

fn line_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    // optional leading line number, then a command-like first token
    RE.get_or_init(|| Regex::new(r"^\s*(?:\d+\s+)?([A-Za-z_][A-Za-z0-9_/]*(?:\s.*)?)$").expect("valid regex"))
}

/// Pulls script lines out of a free-form generator response: fenced blocks
/// when present, otherwise the whole text; blank lines, comments and lines
/// that do not start with a command-like token are dropped.
pub fn extract_script(response: &str) -> String {
    let blocks: Vec<&str> = fence_re()
        .captures_iter(response)
        .filter_map(|c| c.get(1).map(|m| m.as_str()))
        .collect();
    let body = if blocks.is_empty() {
        response.to_string()
    } else {
        blocks.join("\n")
    };
    let mut out = String::new();
    for raw in body.lines() {
        let line = raw.split('#').next().unwrap_or("").trim_end();
        if let Some(c) = line_re().captures(line) {
            let tokens: Vec<&str> = c[1].split_whitespace().collect();
            out.push_str(&tokens.join(" "));
            out.push('\n');
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum PatchOp {
    Replace { line: usize, text: String },
    Delete { line: usize },
    Insert { line: usize, text: String },
}

/// Manual fix-ups applied to generated text before validation. Line indices
/// refer to the text as it stands when each op runs.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Patch {
    pub ops: Vec<PatchOp>,
}

impl Patch {
    pub fn apply(&self, text: &str) -> String {
        let mut lines: Vec<String> = text.lines().map(str::to_string).collect();
        for op in &self.ops {
            match op {
                PatchOp::Replace { line, text } if *line < lines.len() => lines[*line] = text.clone(),
                PatchOp::Delete { line } if *line < lines.len() => {
                    lines.remove(*line);
                }
                PatchOp::Insert { line, text } => {
                    let at = (*line).min(lines.len());
                    lines.insert(at, text.clone());
                }
                _ => {}
            }
        }
        let mut out = lines.join("\n");
        out.push('\n');
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRequest {
    pub sim_desc: String,
    pub sut_name: String,
    pub max_attempts: u32,
    pub generator_params: Vec<Params>,
    #[serde(with = "secs")]
    pub validation_timeout: Duration,
    #[serde(default)]
    pub patch: Option<Patch>,
}

mod secs {
    use std::time::Duration;

    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        let v = f64::deserialize(d)?;
        Duration::try_from_secs_f64(v).map_err(serde::de::Error::custom)
    }
}

impl SeedRequest {
    pub fn check(&self) -> Result<(), SeedgenError> {
        if self.max_attempts == 0 {
            return Err(SeedgenError::InvalidRequest("max_attempts must be at least 1".into()));
        }
        if self.validation_timeout.is_zero() {
            return Err(SeedgenError::InvalidRequest("validation timeout must be positive".into()));
        }
        if self.generator_params.is_empty() {
            return Err(SeedgenError::InvalidRequest("no generator parameter combinations".into()));
        }
        build_prompt(&self.sut_name, &self.sim_desc).map(drop)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRecord {
    pub script: String,
    pub attempt: u32,
    pub params: Params,
    pub prompt_transcript: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patch: Option<Patch>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CombinationFailure {
    pub params: Params,
    pub attempts: u32,
    pub reason: String,
    pub prompt_transcript: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SeedBatch {
    pub records: Vec<SeedRecord>,
    pub failures: Vec<CombinationFailure>,
}

/// For each parameter combination, generate and validate up to
/// `max_attempts` times, refining the prompt after every failure. The refined
/// prompt carries over to the next combination.
pub fn generate_seeds(
    req: &SeedRequest,
    generator: &mut dyn ScriptGenerator,
    exec: &dyn SutExecutor,
) -> Result<SeedBatch, SeedgenError> {
    req.check()?;
    let mut prompt = build_prompt(&req.sut_name, &req.sim_desc)?;
    let mut batch = SeedBatch::default();
    for params in &req.generator_params {
        let mut transcript = Vec::new();
        let mut attempt = 1;
        let mut outcome = Err(String::from("no attempt made"));
        while attempt <= req.max_attempts {
            transcript.push(prompt.clone());
            let response = match generator.generate(&prompt, params) {
                Ok(r) => r,
                Err(e) => {
                    outcome = Err(e.to_string());
                    break;
                }
            };
            let mut text = extract_script(&response);
            if let Some(p) = &req.patch {
                text = p.apply(&text);
            }
            let result = match validate_script(&text, exec, req.validation_timeout) {
                Ok(r) => r,
                Err(e) => {
                    outcome = Err(e.to_string());
                    break;
                }
            };
            if result.is_ok() {
                outcome = Ok(text);
                break;
            }
            outcome = Err(result.error_text.clone());
            prompt = refine_prompt(&prompt, &result);
            attempt += 1;
        }
        match outcome {
            Ok(script) => batch.records.push(SeedRecord {
                script,
                attempt,
                params: params.clone(),
                prompt_transcript: transcript,
                patch: req.patch.clone(),
            }),
            Err(reason) => batch.failures.push(CombinationFailure {
                params: params.clone(),
                attempts: transcript.len() as u32,
                reason,
                prompt_transcript: transcript,
            }),
        }
    }
    Ok(batch)
}

/// Canonical command order used by [`OfflineGenerator`].
pub const CANONICAL_ORDER: [&str; 18] = [
    "units",
    "dimension",
    "boundary",
    "atom_style",
    "lattice",
    "region",
    "create_box",
    "create_atoms",
    "mass",
    "velocity",
    "set",
    "pair_style",
    "pair_coeff",
    "timestep",
    "thermo",
    "thermo_style",
    "fix",
    "run",
];

/// Samples one line per grammar command in canonical order. The RNG stream
/// is derived from the root seed, the prompt and the parameters, so the same
/// request always yields the same text.
#[derive(Debug, Clone)]
pub struct OfflineGenerator {
    pub grammar: Grammar,
    pub defaults: Defaults,
    pub rng_seed: u64,
}

impl OfflineGenerator {
    pub fn new(grammar: Grammar, defaults: Defaults, rng_seed: u64) -> Self {
        Self {
            grammar,
            defaults,
            rng_seed,
        }
    }

    fn stream(&self, prompt: &str, params: &Params) -> ChaCha8Rng {
        let mut h = Sha256::new();
        h.update(self.rng_seed.to_le_bytes());
        h.update(prompt.as_bytes());
        for (k, v) in params {
            h.update(k.as_bytes());
            h.update(v.to_le_bytes());
        }
        let d = h.finalize();
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&d);
        ChaCha8Rng::from_seed(seed)
    }
}

impl ScriptGenerator for OfflineGenerator {
    fn generate(&mut self, prompt: &str, params: &Params) -> Result<String, GeneratorError> {
        let mut rng = self.stream(prompt, params);
        let mut lines: Vec<ScriptLine> = Vec::new();
        for name in CANONICAL_ORDER {
            if self.grammar.command(name).is_none() {
                continue;
            }
            let line = self
                .grammar
                .sample_command(name, &self.defaults, &mut rng)
                .map_err(|e| GeneratorError::Unavailable(e.to_string()))?;
            lines.push(line);
        }
        Ok(Script::from_lines(lines).to_text())
    }
}

/// Chat-completions client. The API key is read from `api_key_env` at call
/// time; a missing variable sends no authorization header.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RemoteGenerator {
    pub endpoint: String,
    pub model: String,
    pub api_key_env: String,
    #[serde(with = "secs")]
    pub timeout: Duration,
}

impl ScriptGenerator for RemoteGenerator {
    fn generate(&mut self, prompt: &str, params: &Params) -> Result<String, GeneratorError> {
        let unavailable = |e: &dyn std::fmt::Display| GeneratorError::Unavailable(e.to_string());
        let client = reqwest::blocking::Client::builder()
            .timeout(self.timeout)
            .build()
            .map_err(|e| unavailable(&e))?;
        let mut body = serde_json::json!({
            "model": self.model,
            "messages": [{ "role": "user", "content": prompt }],
        });
        for (k, v) in params {
            body[k] = serde_json::json!(v);
        }
        let mut req = client.post(&self.endpoint).json(&body);
        if let Ok(key) = std::env::var(&self.api_key_env) {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| unavailable(&e))?;
        let status = resp.status();
        if !status.is_success() {
            return Err(GeneratorError::Unavailable(format!("HTTP {status}")));
        }
        let value: serde_json::Value = resp.json().map_err(|e| unavailable(&e))?;
        value["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| GeneratorError::Unavailable("response has no message content".into()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedMeta {
    pub attempt: u32,
    pub params: Params,
    pub prompt_transcript: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patch: Option<Patch>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rng_seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_digest: Option<String>,
}

/// Writes `seed_<k>.script` and `seed_<k>.meta` for every record.
pub fn write_corpus(
    dir: &Path,
    records: &[SeedRecord],
    rng_seed: Option<u64>,
    config_digest: Option<&str>,
) -> std::io::Result<()> {
    fs::create_dir_all(dir)?;
    for (k, r) in records.iter().enumerate() {
        fs::write(dir.join(format!("seed_{k}.script")), &r.script)?;
        let meta = SeedMeta {
            attempt: r.attempt,
            params: r.params.clone(),
            prompt_transcript: r.prompt_transcript.clone(),
            patch: r.patch.clone(),
            rng_seed,
            config_digest: config_digest.map(str::to_string),
        };
        let mut json = serde_json::to_string_pretty(&meta).map_err(std::io::Error::other)?;
        json.push('\n');
        fs::write(dir.join(format!("seed_{k}.meta")), json)?;
    }
    Ok(())
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("reading corpus")]
    Io(#[from] std::io::Error),
    #[error("{file}: {reason}")]
    Parse { file: String, reason: String },
    #[error("no seed_<k>.script files in {0}")]
    Empty(String),
}

/// Reads `seed_<k>.script` files ordered by `k`.
pub fn read_corpus(dir: &Path) -> Result<Vec<(String, Script)>, CorpusError> {
    let mut found = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
            continue;
        };
        let Some(k) = name
            .strip_prefix("seed_")
            .and_then(|r| r.strip_suffix(".script"))
            .and_then(|k| k.parse::<u64>().ok())
        else {
            continue;
        };
        let text = fs::read_to_string(&path)?;
        let script = parse_script(&text).map_err(|e| CorpusError::Parse {
            file: name.to_string(),
            reason: e.to_string(),
        })?;
        found.push((k, format!("seed_{k}"), script));
    }
    if found.is_empty() {
        return Err(CorpusError::Empty(dir.display().to_string()));
    }
    found.sort_by_key(|(k, _, _)| *k);
    Ok(found.into_iter().map(|(_, n, s)| (n, s)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assets;

    struct Scripted {
        replies: Vec<String>,
        calls: usize,
    }

    impl ScriptGenerator for Scripted {
        fn generate(&mut self, _prompt: &str, _params: &Params) -> Result<String, GeneratorError> {
            let r = self.replies[self.calls.min(self.replies.len() - 1)].clone();
            self.calls += 1;
            Ok(r)
        }
    }

    fn request(max_attempts: u32, combos: usize) -> SeedRequest {
        SeedRequest {
            sim_desc: "a cooling gas of 100 particles".into(),
            sut_name: "MiniSim".into(),
            max_attempts,
            generator_params: (0..combos)
                .map(|i| Params::from([("temperature".to_string(), 0.2 * i as f64)]))
                .collect(),
            validation_timeout: Duration::from_secs(5),
            patch: None,
        }
    }

    fn offline(seed: u64) -> OfflineGenerator {
        let seeds = assets::default_seeds();
        let defaults = Defaults::from_lines(seeds.iter().flat_map(|(_, s)| s.lines()));
        OfflineGenerator::new(assets::default_grammar(), defaults, seed)
    }

    #[test]
    fn prompt_substitution() {
        let p = build_prompt("LAMMPS", "models using the COMB potential").unwrap();
        assert_eq!(
            p,
            "You are a helpful assistant who understands how to use LAMMPS for scientific simulation. Generate a simulation script that can be executed on LAMMPS to simulate models using the COMB potential. Do not provide any explanations and do not add any comments and blank lines in the script."
        );
        let q = build_prompt("MiniSim", "a cooling gas of 100 particles").unwrap();
        assert!(q.contains("how to use MiniSim for") && q.contains("simulate a cooling gas of 100 particles."));
        assert_eq!(q, build_prompt("MiniSim", "a cooling gas of 100 particles").unwrap());
        assert_eq!(build_prompt("", "x"), Err(SeedgenError::EmptyInput("SUT name")));
    }

    #[test]
    fn refinement_appends_in_order() {
        let err = ValidationResult {
            status: ValidationStatus::Error,
            error_text: "Unknown command: pairstyle (line 7)".into(),
        };
        let timeout = ValidationResult {
            status: ValidationStatus::Timeout,
            error_text: TIMEOUT_FEEDBACK.into(),
        };
        let once = refine_prompt("p", &err);
        assert_eq!(once, "p\nUnknown command: pairstyle (line 7)");
        assert_eq!(refine_prompt("p", &timeout), "p\nmodify the script to reduce the execution time");
        assert_eq!(
            refine_prompt(&once, &timeout),
            "p\nUnknown command: pairstyle (line 7)\nmodify the script to reduce the execution time"
        );
    }

    #[test]
    fn validation_outcomes() {
        let exec = MiniSimExecutor::default();
        let t = Duration::from_secs(5);
        assert!(validate_script(assets::DEFAULT_SEEDS[0].1, &exec, t).unwrap().is_ok());
        let bad = assets::DEFAULT_SEEDS[0].1.replace("mass * 1.0", "mass 9 1.0");
        let r = validate_script(&bad, &exec, t).unwrap();
        assert_eq!(r.status, ValidationStatus::Error);
        assert_eq!(r.error_text, "ERROR at cmd:mass:0: Invalid type for mass set");
        let slow = assets::DEFAULT_SEEDS[0].1.replace("run 50", "run 1000000000");
        let r = validate_script(&slow, &exec, Duration::from_millis(200)).unwrap();
        assert_eq!(r.status, ValidationStatus::Timeout);
    }

    #[test]
    fn extraction_keeps_only_commands() {
        let resp = "Sure! Here is the script:\n```lammps\n1  units lj\n\n# comment\nregion box block 0 3 0 3 0 3  # trailing\n```\nEnjoy.";
        assert_eq!(extract_script(resp), "units lj\nregion box block 0 3 0 3 0 3\n");
        assert_eq!(extract_script("units lj\n- not a command\nrun 5"), "units lj\nrun 5\n");
    }

    #[test]
    fn patch_ops() {
        let p = Patch {
            ops: vec![
                PatchOp::Replace { line: 0, text: "units metal".into() },
                PatchOp::Delete { line: 1 },
                PatchOp::Insert { line: 1, text: "dimension 2".into() },
            ],
        };
        assert_eq!(p.apply("units lj\nboundary p p p\nrun 5\n"), "units metal\ndimension 2\nrun 5\n");
    }

    #[test]
    fn fails_twice_then_succeeds() {
        let good = assets::DEFAULT_SEEDS[0].1.to_string();
        let mut gen = Scripted {
            replies: vec!["pairstyle soft\n".into(), "mass 9 1.0\n".into(), good.clone()],
            calls: 0,
        };
        let batch = generate_seeds(&request(3, 1), &mut gen, &MiniSimExecutor::default()).unwrap();
        assert_eq!(gen.calls, 3);
        assert_eq!(batch.records.len(), 1);
        let r = &batch.records[0];
        assert_eq!(r.attempt, 3);
        assert_eq!(r.prompt_transcript.len(), 3);
        assert_eq!(r.prompt_transcript[0], build_prompt("MiniSim", "a cooling gas of 100 particles").unwrap());
        assert!(r.prompt_transcript[1].ends_with("\nERROR at input:0: Unknown command: pairstyle soft"));
        assert!(r.prompt_transcript[2].starts_with(&r.prompt_transcript[1]));
        assert!(r.prompt_transcript[2].ends_with("\nERROR at cmd:mass:0: Mass command before simulation box is defined"));
    }

    #[test]
    fn exhaustion_moves_to_next_combination() {
        let mut gen = Scripted {
            replies: vec!["pairstyle soft\n".into()],
            calls: 0,
        };
        let batch = generate_seeds(&request(3, 2), &mut gen, &MiniSimExecutor::default()).unwrap();
        assert!(batch.records.is_empty());
        assert_eq!(batch.failures.len(), 2);
        assert_eq!(gen.calls, 6);
        assert!(batch.failures.iter().all(|f| f.attempts == 3));
    }

    #[test]
    fn offline_generator_yields_valid_seeds() {
        let mut gen = offline(11);
        let exec = MiniSimExecutor::default();
        let batch = generate_seeds(&request(3, 3), &mut gen, &exec).unwrap();
        assert_eq!(batch.records.len(), 3, "{:?}", batch.failures);
        for r in &batch.records {
            assert_eq!(r.attempt, 1);
            assert!(validate_script(&r.script, &exec, Duration::from_secs(5)).unwrap().is_ok());
        }
        let again = generate_seeds(&request(3, 3), &mut offline(11), &exec).unwrap();
        assert_eq!(again, batch);
    }

    #[test]
    fn unreachable_endpoint_is_reported_per_combination() {
        let mut gen = RemoteGenerator {
            endpoint: "http://127.0.0.1:9/v1/chat/completions".into(),
            model: "m".into(),
            api_key_env: "HETEROFUZZ_TEST_UNSET_KEY".into(),
            timeout: Duration::from_secs(2),
        };
        let batch = generate_seeds(&request(3, 2), &mut gen, &MiniSimExecutor::default()).unwrap();
        assert!(batch.records.is_empty());
        assert_eq!(batch.failures.len(), 2);
        assert!(batch.failures.iter().all(|f| f.attempts == 1 && f.reason.contains("unavailable")));
    }

    #[test]
    fn corpus_files() {
        let dir = tempfile::tempdir().unwrap();
        let batch = generate_seeds(&request(2, 2), &mut offline(3), &MiniSimExecutor::default()).unwrap();
        write_corpus(dir.path(), &batch.records, Some(3), Some("abc")).unwrap();
        let read = read_corpus(dir.path()).unwrap();
        assert_eq!(read.len(), 2);
        assert_eq!(read[1].1.to_text(), batch.records[1].script);
        let meta: SeedMeta =
            serde_json::from_str(&fs::read_to_string(dir.path().join("seed_0.meta")).unwrap()).unwrap();
        assert_eq!(meta.attempt, 1);
        assert_eq!(meta.rng_seed, Some(3));
    }
}
