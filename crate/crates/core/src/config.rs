//! The sectioned TOML run configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::curriculum::Schedule;
use crate::eval::EvalConfig;
use crate::grpo::TrainerConfig;
use crate::ingest::SegmentConfig;
use crate::pipeline::SearchConfig;
use crate::retrieval::RetrievalConfig;
use crate::rewards::RewardConfig;
use crate::service::ServiceConfig;
use crate::synthenv::EnvConfig;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { dir: PathBuf::from("runs/default") }
    }
}

/// Input files. Relative paths resolve against the config file's directory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FixtureConfig {
    pub search_queries: Option<PathBuf>,
    pub hard_negatives: Option<PathBuf>,
    /// Samples to label; synthetic pools are generated when unset.
    pub samples: Option<PathBuf>,
    /// `{id, response}` JSONL of reference answers.
    pub reference_answers: Option<PathBuf>,
    /// Labeled pools for training; synthetic pools are generated when unset.
    pub easy_pool: Option<PathBuf>,
    pub hard_pool: Option<PathBuf>,
    pub eval_pool: Option<PathBuf>,
}

impl FixtureConfig {
    fn paths_mut(&mut self) -> [&mut Option<PathBuf>; 7] {
        [
            &mut self.search_queries,
            &mut self.hard_negatives,
            &mut self.samples,
            &mut self.reference_answers,
            &mut self.easy_pool,
            &mut self.hard_pool,
            &mut self.eval_pool,
        ]
    }

    pub fn validate(&self, prefix: &str) -> Result<()> {
        let pools = [&self.easy_pool, &self.hard_pool, &self.eval_pool];
        let set = pools.iter().filter(|p| p.is_some()).count();
        if set != 0 && set != pools.len() {
            return Err(Error::config(
                format!("{prefix}.easy_pool"),
                "easy_pool, hard_pool and eval_pool must be set together",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub init_w: f64,
    pub init_b: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self { init_w: 0.0, init_b: 2.0 }
    }
}

impl PolicyConfig {
    pub fn params(&self) -> Vec<f64> {
        vec![self.init_w, self.init_b]
    }

    pub fn validate(&self, prefix: &str) -> Result<()> {
        for (name, v) in [("init_w", self.init_w), ("init_b", self.init_b)] {
            if !v.is_finite() {
                return Err(Error::config(format!("{prefix}.{name}"), "must be finite"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationConfig {
    /// Monte-Carlo rollouts per held-out question at each stage snapshot.
    pub rollouts_per_prompt: usize,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self { rollouts_per_prompt: 8 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output: OutputConfig,
    pub eval: EvalConfig,
    pub reward: RewardConfig,
    pub trainer: TrainerConfig,
    pub schedule: Schedule,
    pub env: EnvConfig,
    pub policy: PolicyConfig,
    pub evaluation: EvaluationConfig,
    pub retrieval: RetrievalConfig,
    pub search: SearchConfig,
    pub segment: SegmentConfig,
    pub fixtures: FixtureConfig,
    pub services: ServiceConfig,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let mut cfg: Self = toml::from_str(text).map_err(|e| {
            let field = e
                .span()
                .map(|s| {
                    let line = text[..s.start].matches('\n').count() + 1;
                    format!("line {line}")
                })
                .unwrap_or_else(|| "config".into());
            Error::config(field, e.message().to_string())
        })?;
        cfg.set_seed(cfg.seed);
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses and validates a config file, resolving relative paths against
    /// its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config { field, message } => Error::config(format!("{}: {field}", path.display()), message),
            other => other,
        })?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in cfg.fixtures.paths_mut().into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if cfg.output.dir.is_relative() {
            cfg.output.dir = base.join(&cfg.output.dir);
        }
        Ok(cfg)
    }

    /// Propagates the master seed to every seeded sub-config.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.trainer.seed = seed;
        self.env.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.eval.validate("eval")?;
        self.reward.validate("reward")?;
        self.trainer.validate("trainer")?;
        self.schedule.validate("schedule")?;
        self.env.validate("env")?;
        self.policy.validate("policy")?;
        if self.evaluation.rollouts_per_prompt < 1 {
            return Err(Error::config("evaluation.rollouts_per_prompt", "must be >= 1"));
        }
        self.retrieval.validate("retrieval")?;
        self.search.validate("search")?;
        self.segment.validate("segment")?;
        self.fixtures.validate("fixtures")?;
        self.services.validate("services")?;
        Ok(())
    }
}
