//! The pricing MDP: per-agent observations, discrete price-multiplier
//! actions, profit reward with an optional stability penalty, and
//! transitions driven by the demand oracle. Episodes roll over a fixed
//! calendar window with deterministic, keyed noise streams.

use std::io::Write;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::demand::{self, DemandHistory, DemandOracle, HISTORY_DAYS};
use crate::graph::ItemGraph;
use crate::ingest::{Catalog, SalesPanel};
use crate::rng::StreamKey;

/// Observation length: the demand feature vector without the neighbor
/// price term (neighbor information flows through the GAT, not the
/// local observation).
pub const OBS_LEN: usize = demand::layout::LEN - 1;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("invalid environment config: {0}")]
    BadConfig(String),
    #[error("start {start} leaves fewer than {horizon} steps; latest valid start is {max_valid}")]
    StartTooLate { start: NaiveDate, horizon: usize, max_valid: NaiveDate },
    #[error("agent {agent}: action index {index} out of range (|M| = {num_actions})")]
    BadAction { agent: usize, index: usize, num_actions: usize },
    #[error("stepping a finished episode")]
    EpisodeDone,
    #[error(transparent)]
    Demand(#[from] demand::DemandError),
}

/// Environment configuration. The multiplier grid defines the per-agent
/// action space; every price is some multiplier times the SKU's
/// reference price.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnvConfig {
    pub multipliers: Vec<f64>,
    pub horizon: usize,
    pub lambda_stab: f64,
    pub gamma: f64,
    pub window_start: NaiveDate,
    pub window_end: NaiveDate,
}

impl EnvConfig {
    pub fn validate(&self) -> Result<(), EnvError> {
        if self.multipliers.is_empty() {
            return Err(EnvError::BadConfig("multiplier set is empty".into()));
        }
        if !self.multipliers.windows(2).all(|w| w[0] < w[1]) {
            return Err(EnvError::BadConfig("multipliers must be strictly ascending".into()));
        }
        if !self.multipliers.iter().any(|&m| m == 1.0) {
            return Err(EnvError::BadConfig("multiplier set must contain 1.0".into()));
        }
        if self.multipliers.iter().any(|&m| !(0.5..=2.0).contains(&m)) {
            return Err(EnvError::BadConfig("multipliers must lie within [0.5, 2.0]".into()));
        }
        if self.horizon < 1 {
            return Err(EnvError::BadConfig("horizon must be >= 1".into()));
        }
        if self.lambda_stab < 0.0 {
            return Err(EnvError::BadConfig("lambda_stab must be >= 0".into()));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(EnvError::BadConfig("gamma must lie in (0, 1]".into()));
        }
        if self.window_end < self.window_start {
            return Err(EnvError::BadConfig("window end precedes start".into()));
        }
        Ok(())
    }

    /// Number of actions available to every agent.
    pub fn action_space(&self) -> usize {
        self.multipliers.len()
    }

    /// Index of the 1.0 multiplier (initial prices).
    pub fn unit_multiplier_index(&self) -> usize {
        self.multipliers.iter().position(|&m| m == 1.0).expect("validated config contains 1.0")
    }
}

/// Default multiplier grid used when the config does not override it.
pub fn default_multipliers() -> Vec<f64> {
    vec![0.8, 0.9, 1.0, 1.1, 1.2]
}

/// Per-feature normalization statistics, computed once on the training
/// window and frozen.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ObsNormalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ObsNormalizer {
    pub fn identity() -> Self {
        ObsNormalizer { mean: vec![0.0; OBS_LEN], std: vec![1.0; OBS_LEN] }
    }

    /// Fit over panel days `[from_day, to_day)` at observed prices.
    pub fn fit(
        panel: &SalesPanel,
        catalog: &Catalog,
        graph: &ItemGraph,
        from_day: usize,
        to_day: usize,
    ) -> Self {
        let n = catalog.len();
        let prices = demand::imputed_prices(panel, catalog);
        let mut rows: Vec<Vec<f64>> = Vec::new();
        let mut history = DemandHistory::from_panel(panel, from_day.max(HISTORY_DAYS));
        for d in from_day.max(HISTORY_DAYS)..to_day {
            let pcol: Vec<f64> = (0..n).map(|i| prices[i][d]).collect();
            for i in 0..n {
                let f = demand::assemble_features(
                    &history, graph, catalog, i, panel.date_of(d), d, &pcol,
                );
                rows.push(strip_neighbor(&f.0));
            }
            for i in 0..n {
                history.push(i, panel.quantity[i][d]);
            }
        }
        let m = rows.len().max(1) as f64;
        let mut mean = vec![0.0; OBS_LEN];
        let mut std = vec![0.0; OBS_LEN];
        for r in &rows {
            for j in 0..OBS_LEN {
                mean[j] += r[j];
            }
        }
        for v in &mut mean {
            *v /= m;
        }
        for r in &rows {
            for j in 0..OBS_LEN {
                std[j] += (r[j] - mean[j]).powi(2);
            }
        }
        for v in &mut std {
            *v = (*v / m).sqrt();
            if *v < 1e-8 {
                *v = 1.0;
            }
        }
        ObsNormalizer { mean, std }
    }

    pub fn apply(&self, raw: &[f64]) -> Vec<f64> {
        raw.iter()
            .enumerate()
            .map(|(j, x)| (x - self.mean[j]) / self.std[j])
            .collect()
    }
}

fn strip_neighbor(features: &[f64]) -> Vec<f64> {
    features
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != demand::layout::NEIGHBOR_LOG_PRICE)
        .map(|(_, &x)| x)
        .collect()
}

/// Per-agent normalized local feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation(pub Vec<f64>);

impl Observation {
    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }
}

/// Mutable episode state. Prices are always multiplier × reference price.
#[derive(Debug, Clone)]
pub struct EnvState {
    pub step: usize,
    pub date: NaiveDate,
    /// days since the catalog window start (trend basis)
    pub day_index: usize,
    pub prices: Vec<f64>,
    pub prev_prices: Vec<f64>,
    pub history: DemandHistory,
    pub rng: rand_chacha::ChaCha8Rng,
    pub done: bool,
}

/// Outcome of one environment step.
#[derive(Debug, Clone)]
pub struct StepResult {
    pub observations: Vec<Observation>,
    pub reward: f64,
    pub per_sku_profit: Vec<f64>,
    pub quantities: Vec<u64>,
    pub done: bool,
}

/// Immutable simulator bundle shared by all episodes of a run.
#[derive(Debug, Clone)]
pub struct PricingEnv {
    pub catalog: Catalog,
    pub graph: ItemGraph,
    pub oracle: DemandOracle,
    pub panel: SalesPanel,
    pub normalizer: ObsNormalizer,
    pub config: EnvConfig,
}

impl PricingEnv {
    pub fn new(
        catalog: Catalog,
        graph: ItemGraph,
        oracle: DemandOracle,
        panel: SalesPanel,
        normalizer: ObsNormalizer,
        config: EnvConfig,
    ) -> Result<Self, EnvError> {
        config.validate()?;
        Ok(PricingEnv { catalog, graph, oracle, panel, normalizer, config })
    }

    pub fn num_agents(&self) -> usize {
        self.catalog.len()
    }

    /// Latest start day that still leaves a full horizon in the window.
    pub fn max_valid_start(&self) -> NaiveDate {
        self.config.window_end - chrono::Duration::days(self.config.horizon as i64 - 1)
    }

    fn observations(&self, state: &EnvState) -> Vec<Observation> {
        let n = self.num_agents();
        (0..n)
            .map(|i| {
                let f = demand::assemble_features(
                    &state.history,
                    &self.graph,
                    &self.catalog,
                    i,
                    state.date,
                    state.day_index,
                    &state.prices,
                );
                let obs = Observation(self.normalizer.apply(&strip_neighbor(&f.0)));
                debug_assert!(obs.is_finite());
                obs
            })
            .collect()
    }

    /// Begin an episode at `start_day`. Prices initialize to reference
    /// prices; history buffers are seeded from panel data preceding the
    /// start; the noise stream derives deterministically from the key.
    pub fn reset(
        &self,
        start_day: NaiveDate,
        episode_key: StreamKey,
    ) -> Result<(EnvState, Vec<Observation>), EnvError> {
        if start_day > self.max_valid_start() {
            return Err(EnvError::StartTooLate {
                start: start_day,
                horizon: self.config.horizon,
                max_valid: self.max_valid_start(),
            });
        }
        let history = match self.panel.day_of(start_day) {
            Some(d) => DemandHistory::from_panel(&self.panel, d),
            None => DemandHistory::empty(self.num_agents()),
        };
        let day_index = (start_day - self.catalog.window_start).num_days().max(0) as usize;
        let state = EnvState {
            step: 0,
            date: start_day,
            day_index,
            prices: self.catalog.reference_price.clone(),
            prev_prices: self.catalog.reference_price.clone(),
            history,
            rng: episode_key.child("demand", 0).rng(),
            done: false,
        };
        let obs = self.observations(&state);
        Ok((state, obs))
    }

    /// Apply one joint action (multiplier indices, one per agent).
    pub fn step(&self, state: &mut EnvState, actions: &[usize]) -> Result<StepResult, EnvError> {
        if state.done {
            return Err(EnvError::EpisodeDone);
        }
        let n = self.num_agents();
        assert_eq!(actions.len(), n, "one action per agent");
        let num_actions = self.config.action_space();
        for (agent, &a) in actions.iter().enumerate() {
            if a >= num_actions {
                return Err(EnvError::BadAction { agent, index: a, num_actions });
            }
        }

        state.prev_prices = state.prices.clone();
        for i in 0..n {
            state.prices[i] = self.config.multipliers[actions[i]] * self.catalog.reference_price[i];
        }

        let mut per_sku_profit = vec![0.0; n];
        let mut quantities = vec![0u64; n];
        for i in 0..n {
            let f = demand::assemble_features(
                &state.history,
                &self.graph,
                &self.catalog,
                i,
                state.date,
                state.day_index,
                &state.prices,
            );
            let q = self.oracle.sample(i, &f, &mut state.rng)?;
            quantities[i] = q;
            per_sku_profit[i] = (state.prices[i] - self.catalog.unit_cost[i]) * q as f64;
        }
        let penalty: f64 = (0..n)
            .map(|i| (state.prices[i].ln() - state.prev_prices[i].ln()).abs())
            .sum();
        let reward = per_sku_profit.iter().sum::<f64>() - self.config.lambda_stab * penalty;

        for i in 0..n {
            state.history.push(i, quantities[i] as f64);
        }
        state.step += 1;
        state.date += chrono::Duration::days(1);
        state.day_index += 1;
        state.done = state.step >= self.config.horizon;

        let observations = self.observations(state);
        Ok(StepResult { observations, reward, per_sku_profit, quantities, done: state.done })
    }
}

/// Trajectory dump: one row per (day, sku).
pub fn write_trajectory_csv<W: Write>(
    rows: &[(NaiveDate, String, f64, u64, f64)],
    mut w: W,
) -> std::io::Result<()> {
    writeln!(w, "day,sku,price,quantity,profit")?;
    for (day, sku, price, qty, profit) in rows {
        writeln!(w, "{day},{sku},{price:.6},{qty},{profit:.6}")?;
    }
    Ok(())
}
