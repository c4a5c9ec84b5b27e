//! Run configuration: one TOML file drives every pipeline stage. A
//! resolved copy is embedded in each stage manifest, so artifacts are
//! self-describing.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use chrono::NaiveDate;
use pricing_lab_core::env::{default_multipliers, EnvConfig};
use pricing_lab_core::marl::{Architecture, TrainConfig};
use serde::{Deserialize, Serialize};

/// Environment variable overriding `paths.work_dir`.
pub const WORK_DIR_ENV: &str = "PRICING_LAB_WORK_DIR";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub paths: PathsSection,
    pub ingest: IngestSection,
    pub graph: GraphSection,
    pub demand: DemandSection,
    pub env: EnvSection,
    pub train: TrainSection,
    pub eval: EvalSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsSection {
    /// raw transaction CSV
    pub raw_data: PathBuf,
    /// root directory for all stage artifacts
    pub work_dir: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IngestSection {
    pub window_start: NaiveDate,
    pub window_end: NaiveDate,
    pub top_n: usize,
    #[serde(default = "default_cost_ratio")]
    pub cost_ratio: f64,
}

fn default_cost_ratio() -> f64 {
    0.7
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphSection {
    pub tau: u32,
    pub k: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DemandSection {
    /// train/test split date for the demand fit
    pub split: NaiveDate,
    #[serde(default = "default_ridge")]
    pub ridge_penalty: f64,
}

fn default_ridge() -> f64 {
    1.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvSection {
    pub horizon: usize,
    pub lambda_stab: f64,
    pub gamma: f64,
    /// price multiplier grid; default 0.8..1.2 in steps of 0.1
    pub multipliers: Option<Vec<f64>>,
    /// episode start window; defaults to the demand split date
    pub window_start: Option<NaiveDate>,
    /// defaults to the catalog window end
    pub window_end: Option<NaiveDate>,
}

/// Training section: seed and architecture lists plus optional overrides
/// of the core trainer defaults.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub seeds: Vec<u64>,
    #[serde(default = "default_archs")]
    pub archs: Vec<String>,
    pub total_steps: Option<usize>,
    pub num_envs: Option<usize>,
    pub rollout_steps: Option<usize>,
    pub epochs: Option<usize>,
    pub minibatch_size: Option<usize>,
    pub clip: Option<f64>,
    pub gae_lambda: Option<f64>,
    pub value_coef: Option<f64>,
    pub entropy_coef: Option<f64>,
    pub learning_rate: Option<f64>,
    pub momentum: Option<f64>,
    pub weight_decay: Option<f64>,
    pub max_grad_norm: Option<f64>,
    pub hidden: Option<usize>,
    pub heads: Option<usize>,
    pub attn_dropout: Option<f64>,
    pub edge_drop: Option<f64>,
    pub validation_every: Option<usize>,
    pub validation_episodes: Option<usize>,
}

fn default_archs() -> Vec<String> {
    vec!["mappo".into(), "mappo-gat".into()]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub episodes: u64,
    #[serde(default = "default_namespace")]
    pub crn_namespace: String,
    /// stability weights swept by train/eval; empty means just
    /// `env.lambda_stab`. The first entry is the headline comparison.
    #[serde(default)]
    pub lambda_grid: Vec<f64>,
}

fn default_namespace() -> String {
    "eval".into()
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config file {}", path.display()))?;
        let config: RunConfig = toml::from_str(&text)
            .with_context(|| format!("cannot parse config file {}", path.display()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.ingest.window_end < self.ingest.window_start {
            bail!("ingest window end precedes start");
        }
        if self.train.seeds.is_empty() {
            bail!("train.seeds must not be empty");
        }
        for a in &self.train.archs {
            Architecture::from_str(a).map_err(anyhow::Error::msg)?;
        }
        if self.eval.episodes == 0 {
            bail!("eval.episodes must be >= 1");
        }
        Ok(())
    }

    pub fn architectures(&self) -> Vec<Architecture> {
        self.train
            .archs
            .iter()
            .map(|a| Architecture::from_str(a).expect("validated"))
            .collect()
    }

    /// Stability weights to train and evaluate, first entry headline.
    pub fn lambdas(&self) -> Vec<f64> {
        if self.eval.lambda_grid.is_empty() {
            vec![self.env.lambda_stab]
        } else {
            self.eval.lambda_grid.clone()
        }
    }

    pub fn multipliers(&self) -> Vec<f64> {
        self.env.multipliers.clone().unwrap_or_else(default_multipliers)
    }

    pub fn env_config(&self, lambda_stab: f64, catalog_end: NaiveDate) -> EnvConfig {
        EnvConfig {
            multipliers: self.multipliers(),
            horizon: self.env.horizon,
            lambda_stab,
            gamma: self.env.gamma,
            window_start: self.env.window_start.unwrap_or(self.demand.split),
            window_end: self.env.window_end.unwrap_or(catalog_end),
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        let t = &self.train;
        let d = TrainConfig::default();
        TrainConfig {
            total_steps: t.total_steps.unwrap_or(d.total_steps),
            num_envs: t.num_envs.unwrap_or(d.num_envs),
            rollout_steps: t.rollout_steps.unwrap_or(d.rollout_steps),
            epochs: t.epochs.unwrap_or(d.epochs),
            minibatch_size: t.minibatch_size.unwrap_or(d.minibatch_size),
            clip: t.clip.unwrap_or(d.clip),
            gae_lambda: t.gae_lambda.unwrap_or(d.gae_lambda),
            value_coef: t.value_coef.unwrap_or(d.value_coef),
            entropy_coef: t.entropy_coef.unwrap_or(d.entropy_coef),
            learning_rate: t.learning_rate.unwrap_or(d.learning_rate),
            momentum: t.momentum.unwrap_or(d.momentum),
            weight_decay: t.weight_decay.unwrap_or(d.weight_decay),
            max_grad_norm: t.max_grad_norm.map(Some).unwrap_or(d.max_grad_norm),
            hidden: t.hidden.unwrap_or(d.hidden),
            heads: t.heads.unwrap_or(d.heads),
            attn_dropout: t.attn_dropout.unwrap_or(d.attn_dropout),
            edge_drop: t.edge_drop.unwrap_or(d.edge_drop),
            reward_scale: None,
            seed,
            validation_every: t.validation_every.unwrap_or(d.validation_every),
            validation_episodes: t.validation_episodes.unwrap_or(d.validation_episodes),
        }
    }
}

/// Directory name for a stability weight, fixed precision so reruns map
/// to the same path.
pub fn lambda_dir(lambda: f64) -> String {
    format!("lambda_{lambda:.3}")
}

/// Run directory of one trained policy relative to the work dir.
pub fn run_dir(arch: Architecture, lambda: f64, seed: u64) -> PathBuf {
    PathBuf::from("train").join(arch.to_string()).join(lambda_dir(lambda)).join(format!("seed_{seed}"))
}
