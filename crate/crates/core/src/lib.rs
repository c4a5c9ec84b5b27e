//! Desk-scale laboratory for graph-attentive multi-agent reinforcement
//! learning applied to portfolio retail pricing.
//!
//! Pipeline: transaction ingestion → co-purchase item graph → stochastic
//! demand oracle → pricing environment → MAPPO / MAPPO+GAT training →
//! CRN-paired evaluation with profit, fairness, and stability metrics.

pub mod demand;
pub mod env;
pub mod eval;
pub mod graph;
pub mod ingest;
pub mod marl;
pub mod nn;
pub mod rng;
pub mod synthetic;

pub use demand::{DemandFeatures, DemandOracle, FitDiagnostics};
pub use env::{EnvConfig, EnvState, Observation, PricingEnv};
pub use eval::{EpisodeResult, EvalReport};
pub use graph::ItemGraph;
pub use marl::{Architecture, PolicyNet, TrainConfig, Trainer};
pub use ingest::{Catalog, SalesPanel, Transaction};
pub use rng::StreamKey;
