//! Run configuration: a TOML file whose values command-line flags override.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::Args;
use heterofuzz::assets;
use heterofuzz::diffdrive::{CompareConfig, Norm, DEFAULT_THRESHOLD};
use heterofuzz::extractor::Manifest;
use heterofuzz::fuzzer::{Budget, FuzzConfig, Mode, SeedInput, DEFAULT_WORK_BUDGET, DESK_ITERATIONS};
use heterofuzz::grammar::load_grammar;
use heterofuzz::minisim::{BackendConfig, BugId, BugSet};
use heterofuzz::seedgen::{read_corpus, Params, Patch, SeedRequest};
use serde::{Deserialize, Serialize};

pub const DEFAULT_API_KEY_ENV: &str = "HETEROFUZZ_API_KEY";

/// Which benchmark bugs the device environment carries.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BugSpec {
    Named(String),
    Ids(Vec<u8>),
}

impl BugSpec {
    pub fn resolve(&self) -> Result<BugSet> {
        let ids = match self {
            BugSpec::Named(s) if s == "all" => return Ok(BugId::all()),
            BugSpec::Named(s) if s == "none" || s.is_empty() => return Ok(BugSet::new()),
            BugSpec::Named(s) => s
                .split(',')
                .map(|t| t.trim().trim_start_matches('#').parse::<u8>())
                .collect::<Result<Vec<_>, _>>()
                .with_context(|| format!("bugs: expected `all`, `none` or a comma list of ids, got `{s}`"))?,
            BugSpec::Ids(v) => v.clone(),
        };
        let mut set = BugSet::new();
        for id in ids {
            if !(1..=BugId::COUNT).contains(&id) {
                bail!("bugs: id {id} is outside 1..={}", BugId::COUNT);
            }
            set.insert(BugId(id));
        }
        Ok(set)
    }
}

impl FromStr for BugSpec {
    type Err = std::convert::Infallible;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(BugSpec::Named(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvKind {
    Host,
    Device,
}

impl EnvKind {
    fn backend(self) -> BackendConfig {
        match self {
            EnvKind::Host => BackendConfig::host(),
            EnvKind::Device => BackendConfig::device(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum GeneratorConfig {
    Offline,
    Remote {
        endpoint: String,
        model: String,
        #[serde(default)]
        api_key_env: Option<String>,
        #[serde(default = "default_remote_timeout")]
        timeout_secs: f64,
    },
}

fn default_remote_timeout() -> f64 {
    60.0
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedsSection {
    pub sim_desc: Option<String>,
    pub sut_name: Option<String>,
    pub max_attempts: Option<u32>,
    pub params: Option<Vec<Params>>,
    pub validation_timeout_secs: Option<f64>,
    pub patch: Option<Patch>,
}

/// Contents of the `--config` file. Every field is optional.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub grammar: Option<PathBuf>,
    pub seeds_dir: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub mode: Option<Mode>,
    pub norm: Option<Norm>,
    pub threshold: Option<f64>,
    pub budget: Option<u64>,
    pub wall_clock_secs: Option<u64>,
    pub work_budget: Option<u64>,
    pub rng_seed: Option<u64>,
    pub workers: Option<usize>,
    pub env_a: Option<EnvKind>,
    pub env_b: Option<EnvKind>,
    pub bugs: Option<BugSpec>,
    pub api_key_env: Option<String>,
    pub generator: Option<GeneratorConfig>,
    #[serde(default)]
    pub seeds: SeedsSection,
}

/// Flags shared by every subcommand; each one wins over the config file.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    /// TOML run configuration
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Grammar JSON file (default: the shipped MiniSim grammar)
    #[arg(long, global = true)]
    pub grammar: Option<PathBuf>,
    /// Directory of seed_<k>.script files (default: the shipped corpus)
    #[arg(long, global = true)]
    pub seeds_dir: Option<PathBuf>,
    /// Subsystem manifest JSON
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,
    /// kernel_sensitive, grammar_only or random_bytes
    #[arg(long, global = true)]
    pub mode: Option<Mode>,
    /// l1, l2 or max
    #[arg(long, global = true)]
    pub norm: Option<Norm>,
    /// Divergence threshold on normalized columns
    #[arg(long, global = true, allow_negative_numbers = true)]
    pub threshold: Option<f64>,
    /// Fuzzing iterations per seed script
    #[arg(long, global = true)]
    pub budget: Option<u64>,
    #[arg(long, global = true)]
    pub rng_seed: Option<u64>,
    /// Seed scripts fuzzed concurrently
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Output directory
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Benchmark bugs injected into the device: all, none, or ids like 1,5,20
    #[arg(long, global = true)]
    pub bugs: Option<BugSpec>,
    /// Environment variable holding the remote generator API key
    #[arg(long, global = true)]
    pub api_key_env: Option<String>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// Loads `--config` if given and lays the flags over it.
    pub fn from_overrides(o: &Overrides) -> Result<Self> {
        let mut c = match &o.config {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        macro_rules! take {
            ($($f:ident),*) => { $( if o.$f.is_some() { c.$f = o.$f.clone(); } )* };
        }
        take!(grammar, seeds_dir, manifest, out, mode, norm, threshold, budget, rng_seed, workers, bugs, api_key_env);
        Ok(c)
    }

    /// Digest of the settings; the output directory is left out since it
    /// never changes what is produced.
    pub fn digest(&self) -> String {
        let mut c = self.clone();
        c.out = None;
        heterofuzz::fuzzer::digest_json(&c)
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from("out"))
    }

    pub fn rng_seed(&self) -> u64 {
        self.rng_seed.unwrap_or(0)
    }

    pub fn api_key_env(&self) -> String {
        if let Some(k) = &self.api_key_env {
            return k.clone();
        }
        match &self.generator {
            Some(GeneratorConfig::Remote {
                api_key_env: Some(k), ..
            }) => k.clone(),
            _ => DEFAULT_API_KEY_ENV.to_string(),
        }
    }

    pub fn grammar_text(&self) -> Result<String> {
        let text = match &self.grammar {
            Some(p) => fs::read_to_string(p).with_context(|| format!("reading grammar {}", p.display()))?,
            None => assets::DEFAULT_GRAMMAR.to_string(),
        };
        load_grammar(&text).context("loading grammar")?;
        Ok(text)
    }

    pub fn seed_inputs(&self) -> Result<Vec<SeedInput>> {
        match &self.seeds_dir {
            Some(dir) => {
                let corpus = read_corpus(dir).with_context(|| format!("seed corpus {}", dir.display()))?;
                Ok(corpus
                    .into_iter()
                    .map(|(name, s)| SeedInput { name, text: s.to_text() })
                    .collect())
            }
            None => Ok(assets::DEFAULT_SEEDS
                .iter()
                .map(|(n, t)| SeedInput {
                    name: n.to_string(),
                    text: t.to_string(),
                })
                .collect()),
        }
    }

    pub fn load_manifest(&self) -> Result<Option<Manifest>> {
        self.manifest
            .as_ref()
            .map(|p| Manifest::load(p).with_context(|| format!("manifest {}", p.display())))
            .transpose()
    }

    /// The two environments; bugs go to every device-side environment.
    pub fn environments(&self, default_bugs: BugSet) -> Result<(BackendConfig, BackendConfig)> {
        let bugs = match &self.bugs {
            Some(b) => b.resolve()?,
            None => default_bugs,
        };
        let mk = |k: EnvKind| {
            let cfg = k.backend();
            if k == EnvKind::Device {
                cfg.with_bugs(bugs.clone())
            } else {
                cfg
            }
        };
        Ok((mk(self.env_a.unwrap_or(EnvKind::Host)), mk(self.env_b.unwrap_or(EnvKind::Device))))
    }

    pub fn fuzz_config(&self, mode_default: Mode, default_bugs: BugSet) -> Result<FuzzConfig> {
        let threshold = self.threshold.unwrap_or(DEFAULT_THRESHOLD);
        if !threshold.is_finite() || threshold < 0.0 {
            bail!("threshold must be a finite non-negative number, got {threshold}");
        }
        let (env_a, env_b) = self.environments(default_bugs)?;
        let workers = self.workers.unwrap_or(1);
        if workers == 0 {
            bail!("workers must be at least 1");
        }
        Ok(FuzzConfig {
            seeds: self.seed_inputs()?,
            grammar: self.grammar_text()?,
            manifest: self.load_manifest()?,
            env_a,
            env_b,
            compare: CompareConfig {
                norm: self.norm.unwrap_or(Norm::Max),
                threshold,
            },
            rng_seed: self.rng_seed(),
            budget: Budget {
                iterations: self.budget.unwrap_or(DESK_ITERATIONS),
                wall_clock_secs: self.wall_clock_secs,
            },
            mode: self.mode.unwrap_or(mode_default),
            work_budget: self.work_budget.unwrap_or(DEFAULT_WORK_BUDGET),
            workers,
        })
    }

    pub fn seed_request(&self) -> Result<SeedRequest> {
        let s = &self.seeds;
        let timeout = s.validation_timeout_secs.unwrap_or(10.0);
        if !timeout.is_finite() || timeout <= 0.0 {
            bail!("seeds.validation_timeout_secs must be positive");
        }
        Ok(SeedRequest {
            sim_desc: s
                .sim_desc
                .clone()
                .unwrap_or_else(|| "a Lennard-Jones fluid in a periodic box".into()),
            sut_name: s.sut_name.clone().unwrap_or_else(|| "MiniSim".into()),
            max_attempts: s.max_attempts.unwrap_or(3),
            generator_params: s.params.clone().unwrap_or_else(|| {
                [0.2, 0.5, 0.8]
                    .into_iter()
                    .map(|t| BTreeMap::from([("temperature".to_string(), t)]))
                    .collect()
            }),
            validation_timeout: Duration::from_secs_f64(timeout),
            patch: s.patch.clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_win_over_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        fs::write(&path, "rng_seed = 4\nbudget = 9\nmode = \"grammar_only\"\nbugs = [1, 2]\n").unwrap();
        let o = Overrides {
            config: Some(path),
            rng_seed: Some(11),
            ..Overrides::default()
        };
        let c = RunConfig::from_overrides(&o).unwrap();
        assert_eq!(c.rng_seed(), 11);
        assert_eq!(c.budget, Some(9));
        let f = c.fuzz_config(Mode::KernelSensitive, BugSet::new()).unwrap();
        assert_eq!(f.mode, Mode::GrammarOnly);
        assert_eq!(f.env_b.bugs, [BugId(1), BugId(2)].into());
        assert!(f.env_a.bugs.is_empty());
    }

    #[test]
    fn bug_specs() {
        assert_eq!(BugSpec::Named("all".into()).resolve().unwrap().len(), 20);
        assert!(BugSpec::Named("none".into()).resolve().unwrap().is_empty());
        assert_eq!(
            BugSpec::Named("#3, 20".into()).resolve().unwrap(),
            [BugId(3), BugId(20)].into()
        );
        assert!(BugSpec::Ids(vec![21]).resolve().is_err());
        assert!(BugSpec::Named("x".into()).resolve().is_err());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<RunConfig>("thresold = 1.0").is_err());
    }

    #[test]
    fn remote_generator_section() {
        let c: RunConfig = toml::from_str(
            "[generator]\nkind = \"remote\"\nendpoint = \"http://x\"\nmodel = \"m\"\napi_key_env = \"K\"\n",
        )
        .unwrap();
        assert_eq!(c.api_key_env(), "K");
        assert_eq!(RunConfig::default().api_key_env(), DEFAULT_API_KEY_ENV);
    }
}
