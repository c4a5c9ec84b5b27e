//! Multi-agent PPO with a centralized pooled critic and decentralized
//! shared-parameter actors, in plain and graph-attentive variants.

pub mod gae;
pub mod nets;
pub mod ppo;
pub mod trainer;

pub use gae::{compute_gae, GaeError};
pub use nets::{Architecture, PolicyNet, DEFAULT_HEADS, DEFAULT_HIDDEN};
pub use ppo::{ppo_update, MarlError, RolloutBuffer, StepSample, TrainConfig, UpdateStats};
pub use trainer::{
    write_training_curve_csv, CurvePoint, EpisodeRecord, TrainOutput, Trainer,
};
