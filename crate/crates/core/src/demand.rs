//! Stochastic per-SKU demand oracle: feature assembly, regularized
//! log-linear fitting on a chronological split, deterministic prediction,
//! and keyed noise sampling. The oracle defines the simulator's
//! transition kernel and is pluggable behind this module's surface.

use std::collections::VecDeque;
use std::io::Write;

use chrono::{Datelike, NaiveDate};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::ItemGraph;
use crate::ingest::{Catalog, SalesPanel};
use crate::rng::StreamKey;

/// Demand history window needed before the first feature-complete day.
pub const HISTORY_DAYS: usize = 7;
/// EMA smoothing for span 7: alpha = 2 / (span + 1).
pub const EMA_ALPHA: f64 = 0.25;

pub mod layout {
    //! Fixed feature-vector layout (schema version 1).
    pub const LOG_PRICE: usize = 0;
    pub const NORM_PRICE: usize = 1;
    pub const NEIGHBOR_LOG_PRICE: usize = 2;
    pub const LAG1: usize = 3;
    pub const LAG7: usize = 4;
    pub const EMA7: usize = 5;
    pub const DOW_START: usize = 6; // 7 one-hot columns
    pub const MONTH_START: usize = 13; // 12 one-hot columns
    pub const TREND: usize = 25;
    pub const LEN: usize = 26;
}

pub const FEATURE_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DemandError {
    #[error("insufficient history at {requested}; earliest featurizable day is {earliest}")]
    InsufficientHistory { requested: NaiveDate, earliest: NaiveDate },
    #[error("split date {0} must lie inside the panel window with >= {1} training days")]
    BadSplit(NaiveDate, usize),
    #[error("sku index {0} is not fitted (oracle has {1} SKUs)")]
    UnfittedSku(usize, usize),
    #[error("feature length {got} does not match schema length {want}")]
    FeatureLen { got: usize, want: usize },
    #[error("singular ridge system for sku {0}")]
    Singular(usize),
}

/// One assembled feature vector (layout in [`layout`]).
#[derive(Debug, Clone, PartialEq)]
pub struct DemandFeatures(pub Vec<f64>);

impl DemandFeatures {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Rolling per-SKU demand history: last `HISTORY_DAYS` log1p quantities
/// (front = yesterday) plus a running EMA. Shared by fitting and the
/// simulator so features are identical on both paths.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DemandHistory {
    pub lags: Vec<VecDeque<f64>>,
    pub ema: Vec<f64>,
    pub ema_initialized: Vec<bool>,
}

impl DemandHistory {
    pub fn empty(n: usize) -> Self {
        DemandHistory {
            lags: vec![VecDeque::with_capacity(HISTORY_DAYS); n],
            ema: vec![0.0; n],
            ema_initialized: vec![false; n],
        }
    }

    /// Seed from panel quantities strictly before `day`.
    pub fn from_panel(panel: &SalesPanel, day: usize) -> Self {
        let n = panel.skus.len();
        let mut h = Self::empty(n);
        for d in 0..day {
            for i in 0..n {
                h.push(i, panel.quantity[i][d]);
            }
        }
        h
    }

    /// Record a realized quantity for `sku` (most recent day).
    pub fn push(&mut self, sku: usize, quantity: f64) {
        let x = (quantity.max(0.0)).ln_1p();
        let lags = &mut self.lags[sku];
        lags.push_front(x);
        if lags.len() > HISTORY_DAYS {
            lags.pop_back();
        }
        if self.ema_initialized[sku] {
            self.ema[sku] = EMA_ALPHA * x + (1.0 - EMA_ALPHA) * self.ema[sku];
        } else {
            self.ema[sku] = x;
            self.ema_initialized[sku] = true;
        }
    }

    /// log1p demand `lag` days back (lag 1 = yesterday); 0 when unseen.
    pub fn lag(&self, sku: usize, lag: usize) -> f64 {
        self.lags[sku].get(lag - 1).copied().unwrap_or(0.0)
    }
}

/// Assemble the feature vector for one SKU from rolling history plus the
/// current price vector. `day_index` is days since the window start.
pub fn assemble_features(
    history: &DemandHistory,
    graph: &ItemGraph,
    catalog: &Catalog,
    sku: usize,
    date: NaiveDate,
    day_index: usize,
    prices: &[f64],
) -> DemandFeatures {
    let mut x = vec![0.0; layout::LEN];
    let own = prices[sku];
    x[layout::LOG_PRICE] = own.ln();
    x[layout::NORM_PRICE] = own / catalog.reference_price[sku];
    let neighbors = graph.out_neighbors(sku);
    x[layout::NEIGHBOR_LOG_PRICE] = if neighbors.is_empty() {
        own.ln()
    } else {
        neighbors.iter().map(|&(j, _)| prices[j].ln()).sum::<f64>() / neighbors.len() as f64
    };
    x[layout::LAG1] = history.lag(sku, 1);
    x[layout::LAG7] = history.lag(sku, 7);
    x[layout::EMA7] = history.ema[sku];
    x[layout::DOW_START + date.weekday().num_days_from_monday() as usize] = 1.0;
    x[layout::MONTH_START + (date.month0() as usize)] = 1.0;
    x[layout::TREND] = day_index as f64 / 365.0;
    DemandFeatures(x)
}

/// Panel-backed featurization for `day` (index into the panel window).
/// Uses only information strictly before `day` for the history terms.
pub fn featurize(
    panel: &SalesPanel,
    catalog: &Catalog,
    graph: &ItemGraph,
    sku: usize,
    day: usize,
    prices: &[f64],
) -> Result<DemandFeatures, DemandError> {
    if day < HISTORY_DAYS {
        return Err(DemandError::InsufficientHistory {
            requested: panel.date_of(day),
            earliest: panel.date_of(HISTORY_DAYS),
        });
    }
    let history = DemandHistory::from_panel(panel, day);
    Ok(assemble_features(&history, graph, catalog, sku, panel.date_of(day), day, prices))
}

/// Observed prices with gaps filled: carry the last observed mean price
/// forward, seeded with the reference price before the first sale.
pub fn imputed_prices(panel: &SalesPanel, catalog: &Catalog) -> Vec<Vec<f64>> {
    let n = panel.skus.len();
    let days = panel.num_days();
    let mut out = vec![vec![0.0; days]; n];
    for i in 0..n {
        let mut last = catalog.reference_price[i];
        for d in 0..days {
            if panel.invoice_count[i][d] > 0 && panel.mean_price[i][d] > 0.0 {
                last = panel.mean_price[i][d];
            }
            out[i][d] = last;
        }
    }
    out
}

/// Fitted per-SKU stochastic demand function. Coefficients are stored in
/// raw feature space (standardization folded in); intercept is separate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DemandOracle {
    pub schema_version: u32,
    pub feature_len: usize,
    pub intercept: Vec<f64>,
    /// coefficients[sku][feature]
    pub coefficients: Vec<Vec<f64>>,
    /// residual standard deviation in log1p space, per SKU
    pub sigma: Vec<f64>,
    /// true when the SKU fell back to the catalog-pooled model
    pub pooled_fallback: Vec<bool>,
}

impl DemandOracle {
    pub fn num_skus(&self) -> usize {
        self.coefficients.len()
    }

    fn response(&self, sku: usize, features: &DemandFeatures) -> Result<f64, DemandError> {
        if sku >= self.num_skus() {
            return Err(DemandError::UnfittedSku(sku, self.num_skus()));
        }
        if features.0.len() != self.feature_len {
            return Err(DemandError::FeatureLen { got: features.0.len(), want: self.feature_len });
        }
        let dot: f64 = self.coefficients[sku]
            .iter()
            .zip(&features.0)
            .map(|(c, x)| c * x)
            .sum();
        Ok(self.intercept[sku] + dot)
    }

    /// Expected quantity: expm1 of the linear response, floored at 0.
    pub fn predict(&self, sku: usize, features: &DemandFeatures) -> Result<f64, DemandError> {
        Ok(self.response(sku, features)?.exp_m1().max(0.0))
    }

    /// Realized quantity: Gaussian noise (scale σ_i) added in log1p
    /// space, inverted, rounded to the nearest integer, floored at 0.
    pub fn sample<R: Rng>(
        &self,
        sku: usize,
        features: &DemandFeatures,
        rng: &mut R,
    ) -> Result<u64, DemandError> {
        let z = self.response(sku, features)?;
        let eps: f64 = if self.sigma[sku] > 0.0 {
            self.sigma[sku] * rng.sample::<f64, _>(StandardNormal)
        } else {
            0.0
        };
        Ok(((z + eps).exp_m1().round().max(0.0)) as u64)
    }

    /// Fitted own-price elasticity of the log1p response at the reference
    /// price: the log-price coefficient plus the normalized-price channel
    /// (d(p/p̄)/d log p = p/p̄ = 1 at p = p̄).
    pub fn own_price_elasticity(&self, sku: usize) -> f64 {
        self.coefficients[sku][layout::LOG_PRICE] + self.coefficients[sku][layout::NORM_PRICE]
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("oracle serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }
}

/// Per-SKU and aggregate held-out diagnostics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SkuDiagnostics {
    pub sku: String,
    pub train_observations: usize,
    pub pooled_fallback: bool,
    pub sigma: f64,
    pub test_rmse_qty: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub r2_log1p: f64,
    pub rmse_qty: f64,
    pub mape_pct: f64,
    pub weighted_rmse_qty: f64,
    pub weighted_mape_pct: f64,
    pub test_start: NaiveDate,
    pub test_end: NaiveDate,
    pub per_sku: Vec<SkuDiagnostics>,
}

#[derive(Debug, Clone)]
pub struct FitConfig {
    pub split: NaiveDate,
    pub ridge_penalty: f64,
    pub min_train_days: usize,
    pub min_sku_observations: usize,
}

impl FitConfig {
    pub fn new(split: NaiveDate) -> Self {
        FitConfig { split, ridge_penalty: 1.0, min_train_days: 30, min_sku_observations: 10 }
    }
}

/// Ridge solve on standardized features with an unpenalized intercept.
/// Returns raw-space (intercept, coefficients).
fn ridge_fit(rows: &[(Vec<f64>, f64)], penalty: f64) -> Option<(f64, Vec<f64>)> {
    let m = rows.len();
    if m == 0 {
        return None;
    }
    let p = rows[0].0.len();
    let mut mean = vec![0.0; p];
    let mut std = vec![0.0; p];
    for (x, _) in rows {
        for j in 0..p {
            mean[j] += x[j];
        }
    }
    for v in &mut mean {
        *v /= m as f64;
    }
    for (x, _) in rows {
        for j in 0..p {
            std[j] += (x[j] - mean[j]).powi(2);
        }
    }
    for v in &mut std {
        *v = (*v / m as f64).sqrt();
        if *v < 1e-12 {
            *v = 1.0; // constant column: standardized to all zeros
        }
    }

    // Design matrix: intercept column + standardized features.
    let mut xtx = DMatrix::zeros(p + 1, p + 1);
    let mut xty = DVector::zeros(p + 1);
    for (x, y) in rows {
        let mut z = vec![1.0; p + 1];
        for j in 0..p {
            z[j + 1] = (x[j] - mean[j]) / std[j];
        }
        for a in 0..p + 1 {
            xty[a] += z[a] * y;
            for b in 0..p + 1 {
                xtx[(a, b)] += z[a] * z[b];
            }
        }
    }
    for j in 1..p + 1 {
        xtx[(j, j)] += penalty;
    }
    let beta = xtx.lu().solve(&xty)?;

    let mut coefs = vec![0.0; p];
    let mut intercept = beta[0];
    for j in 0..p {
        coefs[j] = beta[j + 1] / std[j];
        intercept -= beta[j + 1] * mean[j] / std[j];
    }
    Some((intercept, coefs))
}

/// Fit per-SKU models on pre-split days and compute held-out diagnostics
/// on post-split days. SKUs with too few observed-sale days fall back to
/// a catalog-pooled model, flagged in the diagnostics.
pub fn fit(
    panel: &SalesPanel,
    catalog: &Catalog,
    graph: &ItemGraph,
    config: &FitConfig,
) -> Result<(DemandOracle, FitDiagnostics), DemandError> {
    let n = panel.skus.len();
    let split_day = panel
        .day_of(config.split)
        .ok_or(DemandError::BadSplit(config.split, config.min_train_days))?;
    if split_day < HISTORY_DAYS + config.min_train_days || split_day >= panel.num_days() {
        return Err(DemandError::BadSplit(config.split, config.min_train_days));
    }

    let prices = imputed_prices(panel, catalog);
    let price_col = |d: usize| -> Vec<f64> { (0..n).map(|i| prices[i][d]).collect() };

    // Feature rows per (sku, day), built with a single rolling history so
    // no feature sees its own date.
    let days = panel.num_days();
    let mut rows: Vec<Vec<(Vec<f64>, f64)>> = vec![Vec::new(); n]; // train rows per sku
    let mut test_rows: Vec<Vec<(Vec<f64>, f64)>> = vec![Vec::new(); n];
    let mut observed: Vec<usize> = vec![0; n];
    let mut history = DemandHistory::from_panel(panel, HISTORY_DAYS);
    for d in HISTORY_DAYS..days {
        let pcol = price_col(d);
        for i in 0..n {
            let feats =
                assemble_features(&history, graph, catalog, i, panel.date_of(d), d, &pcol);
            let y = panel.quantity[i][d].ln_1p();
            if d < split_day {
                if panel.invoice_count[i][d] > 0 {
                    observed[i] += 1;
                }
                rows[i].push((feats.0, y));
            } else {
                test_rows[i].push((feats.0, y));
            }
        }
        for i in 0..n {
            history.push(i, panel.quantity[i][d]);
        }
    }

    let pooled: Vec<(Vec<f64>, f64)> = rows.iter().flatten().cloned().collect();
    let pooled_model = ridge_fit(&pooled, config.ridge_penalty);

    let mut intercepts = vec![0.0; n];
    let mut coefficients = vec![vec![0.0; layout::LEN]; n];
    let mut sigma = vec![0.0; n];
    let mut pooled_fallback = vec![false; n];
    for i in 0..n {
        let (b0, b) = if observed[i] >= config.min_sku_observations {
            ridge_fit(&rows[i], config.ridge_penalty).ok_or(DemandError::Singular(i))?
        } else {
            pooled_fallback[i] = true;
            pooled_model.clone().ok_or(DemandError::Singular(i))?
        };
        let mut ss = 0.0;
        for (x, y) in &rows[i] {
            let pred = b0 + b.iter().zip(x).map(|(c, v)| c * v).sum::<f64>();
            ss += (y - pred).powi(2);
        }
        sigma[i] = (ss / rows[i].len() as f64).sqrt();
        intercepts[i] = b0;
        coefficients[i] = b;
    }

    let oracle = DemandOracle {
        schema_version: FEATURE_SCHEMA_VERSION,
        feature_len: layout::LEN,
        intercept: intercepts,
        coefficients,
        sigma,
        pooled_fallback: pooled_fallback.clone(),
    };

    // Held-out diagnostics on the post-split window.
    let mut y_all = Vec::new();
    let mut yhat_all = Vec::new();
    let mut per_sku = Vec::with_capacity(n);
    for i in 0..n {
        let mut sku_sq = 0.0;
        for (x, y) in &test_rows[i] {
            let z = oracle.intercept[i]
                + oracle.coefficients[i].iter().zip(x).map(|(c, v)| c * v).sum::<f64>();
            y_all.push(*y);
            yhat_all.push(z);
            let q = y.exp_m1();
            let qhat = z.exp_m1().max(0.0);
            sku_sq += (q - qhat).powi(2);
        }
        per_sku.push(SkuDiagnostics {
            sku: panel.skus[i].clone(),
            train_observations: observed[i],
            pooled_fallback: pooled_fallback[i],
            sigma: oracle.sigma[i],
            test_rmse_qty: (sku_sq / test_rows[i].len().max(1) as f64).sqrt(),
        });
    }
    let mean_y: f64 = y_all.iter().sum::<f64>() / y_all.len() as f64;
    let ss_tot: f64 = y_all.iter().map(|y| (y - mean_y).powi(2)).sum();
    let ss_res: f64 = y_all.iter().zip(&yhat_all).map(|(y, z)| (y - z).powi(2)).sum();
    let r2 = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 };

    let mut sq = 0.0;
    let mut wsq = 0.0;
    let mut wsum = 0.0;
    let mut ape = 0.0;
    let mut wape = 0.0;
    let mut ape_n = 0usize;
    for (y, z) in y_all.iter().zip(&yhat_all) {
        let q = y.exp_m1();
        let qhat = z.exp_m1().max(0.0);
        sq += (q - qhat).powi(2);
        wsq += q * (q - qhat).powi(2);
        wsum += q;
        if q > 0.0 {
            ape += (q - qhat).abs() / q;
            wape += q * (q - qhat).abs() / q;
            ape_n += 1;
        }
    }
    let diagnostics = FitDiagnostics {
        r2_log1p: r2,
        rmse_qty: (sq / y_all.len() as f64).sqrt(),
        mape_pct: 100.0 * ape / ape_n.max(1) as f64,
        weighted_rmse_qty: if wsum > 0.0 { (wsq / wsum).sqrt() } else { 0.0 },
        weighted_mape_pct: if wsum > 0.0 { 100.0 * wape / wsum } else { 0.0 },
        test_start: panel.date_of(split_day),
        test_end: panel.end,
        per_sku,
    };
    Ok((oracle, diagnostics))
}

pub fn write_diagnostics_csv<W: Write>(d: &FitDiagnostics, mut w: W) -> std::io::Result<()> {
    writeln!(w, "sku,train_observations,pooled_fallback,sigma,test_rmse_qty")?;
    for s in &d.per_sku {
        writeln!(
            w,
            "{},{},{},{:.6},{:.6}",
            s.sku, s.train_observations, s.pooled_fallback, s.sigma, s.test_rmse_qty
        )?;
    }
    writeln!(
        w,
        "__aggregate__,r2_log1p={:.4},rmse={:.4},mape_pct={:.4},weighted_rmse={:.4} weighted_mape_pct={:.4}",
        d.r2_log1p, d.rmse_qty, d.mape_pct, d.weighted_rmse_qty, d.weighted_mape_pct
    )
}

/// Deterministic demand sampler bound to a stream key. Used by the
/// environment so every episode owns an independent noise stream.
pub struct NoiseStream {
    rng: rand_chacha::ChaCha8Rng,
}

impl NoiseStream {
    pub fn new(key: StreamKey) -> Self {
        NoiseStream { rng: key.rng() }
    }

    pub fn rng(&mut self) -> &mut rand_chacha::ChaCha8Rng {
        &mut self.rng
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::ItemGraph;
    use approx::assert_relative_eq;

    fn tiny_catalog(n: usize) -> Catalog {
        Catalog {
            skus: (0..n).map(|i| format!("S{i}")).collect(),
            reference_price: vec![10.0; n],
            unit_cost: vec![7.0; n],
            window_start: NaiveDate::from_ymd_opt(2011, 7, 1).unwrap(),
            window_end: NaiveDate::from_ymd_opt(2011, 7, 31).unwrap(),
        }
    }

    fn flat_panel(n: usize, days: usize, qty: f64) -> SalesPanel {
        SalesPanel {
            skus: (0..n).map(|i| format!("S{i}")).collect(),
            start: NaiveDate::from_ymd_opt(2011, 7, 1).unwrap(),
            end: NaiveDate::from_ymd_opt(2011, 7, 1).unwrap() + chrono::Duration::days(days as i64 - 1),
            quantity: vec![vec![qty; days]; n],
            mean_price: vec![vec![10.0; days]; n],
            invoice_count: vec![vec![1; days]; n],
        }
    }

    #[test]
    fn neighbor_mean_log_price_equals_log_p_when_uniform() {
        let cat = tiny_catalog(3);
        let panel = flat_panel(3, 20, 5.0);
        let mut w = crate::graph::CooccurrenceWeights { n: 3, pairs: Default::default() };
        w.pairs.insert((0, 1), 3);
        w.pairs.insert((0, 2), 3);
        let g = crate::graph::build_graph(&w, 1, 2);
        let prices = vec![8.0; 3];
        let f = featurize(&panel, &cat, &g, 0, 10, &prices).unwrap();
        assert_relative_eq!(f.0[layout::NEIGHBOR_LOG_PRICE], 8.0f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn zero_history_gives_zero_lags_and_ema() {
        let cat = tiny_catalog(1);
        let panel = flat_panel(1, 20, 0.0);
        let g = ItemGraph::edgeless(1);
        let f = featurize(&panel, &cat, &g, 0, 10, &[10.0]).unwrap();
        assert_eq!(f.0[layout::LAG1], 0.0);
        assert_eq!(f.0[layout::LAG7], 0.0);
        assert_eq!(f.0[layout::EMA7], 0.0);
    }

    #[test]
    fn insufficient_history_names_earliest_day() {
        let cat = tiny_catalog(1);
        let panel = flat_panel(1, 20, 1.0);
        let g = ItemGraph::edgeless(1);
        match featurize(&panel, &cat, &g, 0, 3, &[10.0]) {
            Err(DemandError::InsufficientHistory { earliest, .. }) => {
                assert_eq!(earliest, panel.date_of(HISTORY_DAYS));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn lags_and_ema_match_spreadsheet_oracle() {
        // 10-day fixture, quantities 0..9; features at day 9.
        let mut panel = flat_panel(1, 10, 0.0);
        for d in 0..10 {
            panel.quantity[0][d] = d as f64;
        }
        let cat = tiny_catalog(1);
        let g = ItemGraph::edgeless(1);
        let f = featurize(&panel, &cat, &g, 0, 9, &[10.0]).unwrap();
        assert_relative_eq!(f.0[layout::LAG1], 8.0f64.ln_1p(), epsilon = 1e-12);
        assert_relative_eq!(f.0[layout::LAG7], 2.0f64.ln_1p(), epsilon = 1e-12);
        // EMA over log1p(0..=8), alpha 0.25, seeded at the first value.
        let mut ema = 0.0f64.ln_1p();
        for q in 1..=8 {
            ema = 0.25 * (q as f64).ln_1p() + 0.75 * ema;
        }
        assert_relative_eq!(f.0[layout::EMA7], ema, epsilon = 1e-12);
    }

    #[test]
    fn predict_zero_parameters_is_zero() {
        let oracle = DemandOracle {
            schema_version: FEATURE_SCHEMA_VERSION,
            feature_len: layout::LEN,
            intercept: vec![0.0],
            coefficients: vec![vec![0.0; layout::LEN]],
            sigma: vec![0.0],
            pooled_fallback: vec![false],
        };
        let f = DemandFeatures(vec![1.0; layout::LEN]);
        assert_eq!(oracle.predict(0, &f).unwrap(), 0.0);
    }

    #[test]
    fn predict_matches_hand_arithmetic() {
        let mut coefs = vec![0.0; layout::LEN];
        coefs[layout::LOG_PRICE] = -1.5;
        let oracle = DemandOracle {
            schema_version: FEATURE_SCHEMA_VERSION,
            feature_len: layout::LEN,
            intercept: vec![4.0],
            coefficients: vec![coefs],
            sigma: vec![0.0],
            pooled_fallback: vec![false],
        };
        let mut x = vec![0.0; layout::LEN];
        x[layout::LOG_PRICE] = 10.0f64.ln();
        let f = DemandFeatures(x);
        let expected = (4.0 - 1.5 * 10.0f64.ln()).exp_m1();
        assert_relative_eq!(oracle.predict(0, &f).unwrap(), expected, epsilon = 1e-12);
    }

    #[test]
    fn raising_price_lowers_prediction_under_negative_elasticity() {
        let mut coefs = vec![0.0; layout::LEN];
        coefs[layout::LOG_PRICE] = -1.5;
        let oracle = DemandOracle {
            schema_version: FEATURE_SCHEMA_VERSION,
            feature_len: layout::LEN,
            intercept: vec![4.0],
            coefficients: vec![coefs],
            sigma: vec![0.0],
            pooled_fallback: vec![false],
        };
        let mk = |p: f64| {
            let mut x = vec![0.0; layout::LEN];
            x[layout::LOG_PRICE] = p.ln();
            DemandFeatures(x)
        };
        assert!(oracle.predict(0, &mk(12.0)).unwrap() < oracle.predict(0, &mk(8.0)).unwrap());
    }

    #[test]
    fn unfitted_sku_errors() {
        let oracle = DemandOracle {
            schema_version: FEATURE_SCHEMA_VERSION,
            feature_len: layout::LEN,
            intercept: vec![0.0],
            coefficients: vec![vec![0.0; layout::LEN]],
            sigma: vec![0.0],
            pooled_fallback: vec![false],
        };
        let f = DemandFeatures(vec![0.0; layout::LEN]);
        assert!(matches!(oracle.predict(3, &f), Err(DemandError::UnfittedSku(3, 1))));
    }

    #[test]
    fn sample_with_zero_sigma_is_rounded_predict() {
        let mut coefs = vec![0.0; layout::LEN];
        coefs[layout::LOG_PRICE] = -1.0;
        let oracle = DemandOracle {
            schema_version: FEATURE_SCHEMA_VERSION,
            feature_len: layout::LEN,
            intercept: vec![3.0],
            coefficients: vec![coefs],
            sigma: vec![0.0],
            pooled_fallback: vec![false],
        };
        let mut x = vec![0.0; layout::LEN];
        x[layout::LOG_PRICE] = 2.0f64.ln();
        let f = DemandFeatures(x);
        let mut rng = StreamKey::derive("t", &[1]).rng();
        let q = oracle.sample(0, &f, &mut rng).unwrap();
        assert_eq!(q as f64, oracle.predict(0, &f).unwrap().round());
    }

    #[test]
    fn sample_streams_are_reproducible() {
        let oracle = DemandOracle {
            schema_version: FEATURE_SCHEMA_VERSION,
            feature_len: layout::LEN,
            intercept: vec![3.0],
            coefficients: vec![vec![0.0; layout::LEN]],
            sigma: vec![0.4],
            pooled_fallback: vec![false],
        };
        let f = DemandFeatures(vec![0.0; layout::LEN]);
        let draw = |key: StreamKey| -> Vec<u64> {
            let mut rng = key.rng();
            (0..16).map(|_| oracle.sample(0, &f, &mut rng).unwrap()).collect()
        };
        let key = StreamKey::derive("crn", &[5, 1]);
        assert_eq!(draw(key), draw(key));
    }

    #[test]
    fn sample_mean_matches_lognormal_correction() {
        // E[expm1(m + sigma*Z)] = exp(m + sigma^2/2) - 1
        let m = 3.0;
        let sigma = 0.3;
        let oracle = DemandOracle {
            schema_version: FEATURE_SCHEMA_VERSION,
            feature_len: layout::LEN,
            intercept: vec![m],
            coefficients: vec![vec![0.0; layout::LEN]],
            sigma: vec![sigma],
            pooled_fallback: vec![false],
        };
        let f = DemandFeatures(vec![0.0; layout::LEN]);
        let mut rng = StreamKey::derive("mc", &[0]).rng();
        let n = 10_000;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for _ in 0..n {
            let q = oracle.sample(0, &f, &mut rng).unwrap() as f64;
            sum += q;
            sumsq += q * q;
        }
        let mean = sum / n as f64;
        let sd = ((sumsq / n as f64 - mean * mean) / n as f64).sqrt();
        let analytic = (m + sigma * sigma / 2.0).exp() - 1.0;
        // rounding + zero-floor shift the mean by < 0.5 units
        assert!((mean - analytic).abs() < 3.0 * sd + 0.5, "mean {mean} vs {analytic} (se {sd})");
    }

    /// Generate-then-recover: log-linear demand with known elasticity.
    fn synthetic_elastic_panel(
        elasticity: f64,
        days: usize,
        seed: u64,
    ) -> (SalesPanel, Catalog) {
        let n = 2;
        let cat = tiny_catalog(n);
        let mut rng = StreamKey::derive("gen", &[seed]).rng();
        let start = NaiveDate::from_ymd_opt(2011, 7, 1).unwrap();
        let mut quantity = vec![vec![0.0; days]; n];
        let mut mean_price = vec![vec![0.0; days]; n];
        let mut invoice_count = vec![vec![0u32; days]; n];
        for d in 0..days {
            for i in 0..n {
                let mult = [0.8, 0.9, 1.0, 1.1, 1.2][rng.gen_range(0..5)];
                let p = 10.0 * mult;
                let z = 5.0 + elasticity * (p / 10.0f64).ln();
                quantity[i][d] = z.exp_m1().round().max(0.0);
                mean_price[i][d] = p;
                invoice_count[i][d] = 1;
            }
        }
        let panel = SalesPanel {
            skus: cat.skus.clone(),
            start,
            end: start + chrono::Duration::days(days as i64 - 1),
            quantity,
            mean_price,
            invoice_count,
        };
        (panel, cat)
    }

    fn mutual_pair_graph() -> ItemGraph {
        let mut w = crate::graph::CooccurrenceWeights { n: 2, pairs: Default::default() };
        w.pairs.insert((0, 1), 5);
        crate::graph::build_graph(&w, 1, 1)
    }

    #[test]
    fn fit_recovers_known_elasticity() {
        let (panel, cat) = synthetic_elastic_panel(-1.5, 120, 42);
        let g = mutual_pair_graph();
        let cfg = FitConfig {
            split: panel.date_of(100),
            ridge_penalty: 1.0,
            min_train_days: 30,
            min_sku_observations: 10,
        };
        let (oracle, diag) = fit(&panel, &cat, &g, &cfg).unwrap();
        for i in 0..2 {
            let e = oracle.own_price_elasticity(i);
            assert!((e - (-1.5)).abs() < 0.1, "sku {i}: elasticity {e}");
        }
        assert!(diag.r2_log1p > 0.9, "r2 {}", diag.r2_log1p);
    }

    #[test]
    fn refit_on_own_predictions_gives_r2_one_on_train() {
        // Zero-residual case: noiseless linear data is fit exactly on the
        // training set, so training residual sigma is ~0.
        let (panel, cat) = synthetic_elastic_panel(-1.5, 120, 7);
        let g = ItemGraph::edgeless(2);
        let cfg = FitConfig::new(panel.date_of(100));
        let (oracle, _) = fit(&panel, &cat, &g, &cfg).unwrap();
        // Regenerate a panel from the oracle's own predictions and refit.
        let mut panel2 = panel.clone();
        let prices = imputed_prices(&panel, &cat);
        let mut history = DemandHistory::from_panel(&panel, HISTORY_DAYS);
        for d in HISTORY_DAYS..panel.num_days() {
            let pcol: Vec<f64> = (0..2).map(|i| prices[i][d]).collect();
            for i in 0..2 {
                let f = assemble_features(&history, &g, &cat, i, panel.date_of(d), d, &pcol);
                panel2.quantity[i][d] = oracle.predict(i, &f).unwrap();
            }
            for i in 0..2 {
                let q = panel2.quantity[i][d];
                history.push(i, q);
            }
        }
        let (oracle2, _) = fit(&panel2, &cat, &g, &cfg).unwrap();
        // Training residuals should be near zero (R^2 = 1 on train).
        for i in 0..2 {
            assert!(oracle2.sigma[i] < 0.05, "sigma {}", oracle2.sigma[i]);
        }
    }

    #[test]
    fn bad_split_errors() {
        let (panel, cat) = synthetic_elastic_panel(-1.5, 60, 1);
        let g = ItemGraph::edgeless(2);
        let cfg = FitConfig::new(panel.date_of(10)); // < 30 training days
        assert!(matches!(fit(&panel, &cat, &g, &cfg), Err(DemandError::BadSplit(..))));
    }

    #[test]
    fn sparse_sku_falls_back_to_pooled_model() {
        let (mut panel, cat) = synthetic_elastic_panel(-1.5, 120, 3);
        // SKU 1 almost never observed
        for d in 0..120 {
            panel.invoice_count[1][d] = 0;
            panel.quantity[1][d] = 0.0;
        }
        let g = ItemGraph::edgeless(2);
        let cfg = FitConfig::new(panel.date_of(100));
        let (oracle, diag) = fit(&panel, &cat, &g, &cfg).unwrap();
        assert!(oracle.pooled_fallback[1]);
        assert!(!oracle.pooled_fallback[0]);
        assert!(diag.per_sku[1].pooled_fallback);
    }

    #[test]
    fn no_leakage_future_shift_leaves_training_predictions_unchanged() {
        let (panel, cat) = synthetic_elastic_panel(-1.5, 120, 9);
        let g = ItemGraph::edgeless(2);
        let cfg = FitConfig::new(panel.date_of(100));
        let (oracle_a, _) = fit(&panel, &cat, &g, &cfg).unwrap();
        // Perturb post-split quantities only; the fitted model must not move.
        let mut shifted = panel.clone();
        for d in 100..120 {
            for i in 0..2 {
                shifted.quantity[i][d] += 50.0;
            }
        }
        let (oracle_b, _) = fit(&shifted, &cat, &g, &cfg).unwrap();
        assert_eq!(oracle_a.intercept, oracle_b.intercept);
        assert_eq!(oracle_a.coefficients, oracle_b.coefficients);
    }

    #[test]
    fn oracle_json_roundtrip_is_exact() {
        let (panel, cat) = synthetic_elastic_panel(-1.5, 120, 11);
        let g = ItemGraph::edgeless(2);
        let (oracle, _) = fit(&panel, &cat, &g, &FitConfig::new(panel.date_of(100))).unwrap();
        let back = DemandOracle::from_json(&oracle.to_json()).unwrap();
        assert_eq!(oracle.intercept, back.intercept);
        assert_eq!(oracle.coefficients, back.coefficients);
        assert_eq!(oracle.sigma, back.sigma);
    }
}
