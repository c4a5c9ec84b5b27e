//! Bundled 3-SKU synthetic elastic world with known elasticities.
//!
//! Used three ways: as a ready-made [`PricingEnv`] for training and
//! evaluation tests, as an exhaustive static-price profit oracle, and as
//! a deterministic raw-transaction generator so the full CLI pipeline
//! runs without the public dataset.

use chrono::NaiveDate;

use crate::demand::{layout, DemandOracle, FEATURE_SCHEMA_VERSION};
use crate::env::{default_multipliers, EnvConfig, ObsNormalizer, PricingEnv};
use crate::graph::{build_graph, CooccurrenceWeights, ItemGraph};
use crate::ingest::{Catalog, SalesPanel};
use crate::rng::StreamKey;
use rand::Rng;

pub const NUM_SKUS: usize = 3;
/// Distinct reference prices so shared-parameter actors can tell the
/// agents apart through the price features alone.
pub const REFERENCE_PRICES: [f64; NUM_SKUS] = [6.0, 10.0, 16.0];
pub const COST_RATIO: f64 = 0.7;
/// Own-price elasticities per SKU; static optima on the default grid are
/// 0.8, 1.1, and 1.2 respectively.
pub const ELASTICITIES: [f64; NUM_SKUS] = [-8.0, -3.0, -1.5];
/// Pooled cross-price coefficient on the mean neighbor log price.
pub const CROSS_COEFFICIENT: f64 = 0.3;
/// Baseline demand at reference prices.
pub const BASE_QUANTITY: f64 = 50.0;

pub fn window_start() -> NaiveDate {
    NaiveDate::from_ymd_opt(2020, 1, 1).unwrap()
}

pub fn catalog() -> Catalog {
    Catalog {
        skus: vec!["SYN0".into(), "SYN1".into(), "SYN2".into()],
        reference_price: REFERENCE_PRICES.to_vec(),
        unit_cost: REFERENCE_PRICES.iter().map(|p| COST_RATIO * p).collect(),
        window_start: window_start(),
        window_end: window_start() + chrono::Duration::days(119),
    }
}

/// Fully connected triangle graph.
pub fn graph() -> ItemGraph {
    let mut w = CooccurrenceWeights { n: NUM_SKUS, pairs: Default::default() };
    w.pairs.insert((0, 1), 10);
    w.pairs.insert((0, 2), 10);
    w.pairs.insert((1, 2), 10);
    build_graph(&w, 2, 2)
}

/// Hand-set log-linear oracle with the known elasticities. Demand has no
/// lag or seasonal terms, so the optimal policy is a static price vector.
pub fn oracle(sigma: f64) -> DemandOracle {
    let mut intercept = Vec::with_capacity(NUM_SKUS);
    let mut coefficients = Vec::with_capacity(NUM_SKUS);
    for (i, &e) in ELASTICITIES.iter().enumerate() {
        let mut c = vec![0.0; layout::LEN];
        c[layout::LOG_PRICE] = e;
        c[layout::NEIGHBOR_LOG_PRICE] = CROSS_COEFFICIENT;
        coefficients.push(c);
        // calibrated so demand is BASE_QUANTITY at all-reference prices
        let neighbor_ref: f64 = REFERENCE_PRICES
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(_, p)| p.ln())
            .sum::<f64>()
            / (NUM_SKUS - 1) as f64;
        intercept.push(
            (BASE_QUANTITY + 1.0).ln()
                - e * REFERENCE_PRICES[i].ln()
                - CROSS_COEFFICIENT * neighbor_ref,
        );
    }
    DemandOracle {
        schema_version: FEATURE_SCHEMA_VERSION,
        feature_len: layout::LEN,
        intercept,
        coefficients,
        sigma: vec![sigma; NUM_SKUS],
        pooled_fallback: vec![false; NUM_SKUS],
    }
}

/// Flat seeding panel (demand history irrelevant to this oracle).
pub fn panel() -> SalesPanel {
    let cat = catalog();
    let days = 120;
    SalesPanel {
        skus: cat.skus.clone(),
        start: cat.window_start,
        end: cat.window_end,
        quantity: vec![vec![BASE_QUANTITY; days]; NUM_SKUS],
        mean_price: REFERENCE_PRICES.iter().map(|&p| vec![p; days]).collect(),
        invoice_count: vec![vec![1; days]; NUM_SKUS],
    }
}

pub fn env_config(lambda_stab: f64, horizon: usize) -> EnvConfig {
    let cat = catalog();
    EnvConfig {
        multipliers: default_multipliers(),
        horizon,
        lambda_stab,
        gamma: 1.0,
        window_start: cat.window_start + chrono::Duration::days(30),
        window_end: cat.window_end,
    }
}

/// The bundled environment. `sigma` controls demand noise in log1p space.
pub fn env(lambda_stab: f64, sigma: f64, horizon: usize) -> PricingEnv {
    PricingEnv::new(
        catalog(),
        graph(),
        oracle(sigma),
        panel(),
        ObsNormalizer::identity(),
        env_config(lambda_stab, horizon),
    )
    .expect("synthetic fixture config is valid")
}

/// Expected per-step profit of a static joint multiplier assignment,
/// using the oracle's noiseless mean (the rounding applied by `sample`
/// with σ=0 included).
pub fn static_profit(env: &PricingEnv, assignment: &[usize]) -> f64 {
    let n = env.num_agents();
    let prices: Vec<f64> = (0..n)
        .map(|i| env.config.multipliers[assignment[i]] * env.catalog.reference_price[i])
        .collect();
    let history = crate::demand::DemandHistory::empty(n);
    let mut total = 0.0;
    for i in 0..n {
        let f = crate::demand::assemble_features(
            &history,
            &env.graph,
            &env.catalog,
            i,
            env.config.window_start,
            0,
            &prices,
        );
        let q = env.oracle.predict(i, &f).unwrap().round();
        total += (prices[i] - env.catalog.unit_cost[i]) * q;
    }
    total
}

/// Exhaustive grid search over all |M|^n joint static assignments.
/// Returns (best assignment, per-step profit).
pub fn best_static_assignment(env: &PricingEnv) -> (Vec<usize>, f64) {
    let n = env.num_agents();
    let m = env.config.action_space();
    let total = m.pow(n as u32);
    let mut best = (vec![0; n], f64::NEG_INFINITY);
    for code in 0..total {
        let mut assignment = vec![0; n];
        let mut c = code;
        for slot in assignment.iter_mut() {
            *slot = c % m;
            c /= m;
        }
        let profit = static_profit(env, &assignment);
        if profit > best.1 {
            best = (assignment, profit);
        }
    }
    best
}

/// Deterministic raw-transaction generator in the Online Retail II CSV
/// layout, driving the full ingest→graph→fit pipeline. Daily prices
/// cycle through the multiplier grid per SKU; quantities follow the
/// synthetic oracle with mild noise; invoices bundle SKUs so the
/// co-purchase graph is connected.
pub fn write_transactions_csv<W: std::io::Write>(mut w: W, seed: u64) -> std::io::Result<()> {
    let cat = catalog();
    let oracle = oracle(0.0);
    let mults = default_multipliers();
    let mut rng = StreamKey::derive("synthetic-transactions", &[seed]).rng();
    writeln!(w, "Invoice,StockCode,Description,Quantity,InvoiceDate,Price,Customer ID,Country")?;
    let mut invoice_no = 100_000u64;
    let days = 120i64;
    let history = crate::demand::DemandHistory::empty(NUM_SKUS);
    for d in 0..days {
        let date = cat.window_start + chrono::Duration::days(d);
        // per-SKU daily price: independent cycles through the grid
        let prices: Vec<f64> = (0..NUM_SKUS)
            .map(|i| mults[((d as usize) * (i + 2) + i) % mults.len()] * REFERENCE_PRICES[i])
            .collect();
        let quantities: Vec<f64> = (0..NUM_SKUS)
            .map(|i| {
                let f = crate::demand::assemble_features(
                    &history, &graph(), &cat, i, date, d as usize, &prices,
                );
                let noise: f64 = rng.gen_range(0.9..1.1);
                (oracle.predict(i, &f).unwrap() * noise).round().max(1.0)
            })
            .collect();
        // split each day's demand across a few multi-SKU invoices
        let invoices_today = 4;
        for inv in 0..invoices_today {
            invoice_no += 1;
            let customer = 9000 + (invoice_no % 40);
            for i in 0..NUM_SKUS {
                if (inv + i) % 2 == 0 || inv == 0 {
                    let qty = (quantities[i] / invoices_today as f64).round().max(1.0) as i64;
                    writeln!(
                        w,
                        "{invoice_no},{},{} SYNTH,{qty},{date} 10:0{inv}:00,{:.2},{customer},Synthetic",
                        cat.skus[i], cat.skus[i], prices[i]
                    )?;
                }
            }
        }
    }
    Ok(())
}
