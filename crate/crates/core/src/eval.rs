//! CRN-paired evaluation: greedy rollouts under shared random keys,
//! profit/fairness/stability metrics, per-seed paired statistics with a
//! percentile-bootstrap CI, and the stability-weight ablation sweep.

use std::collections::BTreeMap;
use std::io::Write;

use chrono::NaiveDate;
use rand::Rng;
use serde::Serialize;
use thiserror::Error;

use crate::env::{EnvError, Observation, PricingEnv};
use crate::marl::PolicyNet;
use crate::nn::Matrix;
use crate::rng::StreamKey;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("price trajectory needs at least 2 steps, got {0}")]
    TrajectoryTooShort(usize),
    #[error("episodes must be >= 1")]
    NoEpisodes,
    #[error("empty lambda grid")]
    EmptyGrid,
    #[error("result sets are not paired; keys only in A: {only_a:?}, only in B: {only_b:?}")]
    UnpairedKeys { only_a: Vec<(u64, u64)>, only_b: Vec<(u64, u64)> },
    #[error(transparent)]
    Env(#[from] EnvError),
}

/// One greedy evaluation episode.
#[derive(Debug, Clone, Serialize)]
pub struct EpisodeResult {
    pub method: String,
    pub seed: u64,
    pub episode: u64,
    pub start: NaiveDate,
    /// cumulative profit, stability penalty excluded
    pub profit: f64,
    pub per_sku_profit: Vec<f64>,
    /// mean absolute % price change over the episode
    pub stability_pct: f64,
}

fn obs_matrix(obs: &[Observation]) -> Matrix {
    let n = obs.len();
    let d = obs[0].0.len();
    Matrix::from_shape_fn((n, d), |(i, j)| obs[i].0[j])
}

/// Greedy rollouts under deterministic per-episode keys. Episode `e` of
/// seed `s` uses `StreamKey::derive(namespace, [s, e])` for both its
/// start-day draw and its demand-noise stream, so two policies evaluated
/// with the same namespace face identical conditions.
pub fn evaluate(
    env: &PricingEnv,
    policy: &PolicyNet,
    method: &str,
    seed: u64,
    episodes: u64,
    namespace: &str,
) -> Result<Vec<EpisodeResult>, EvalError> {
    if episodes == 0 {
        return Err(EvalError::NoEpisodes);
    }
    let span = (env.max_valid_start() - env.config.window_start).num_days();
    let mut results = Vec::with_capacity(episodes as usize);
    for e in 0..episodes {
        let key = StreamKey::derive(namespace, &[seed, e]);
        let offset = if span > 0 { key.child("start", 0).rng().gen_range(0..=span) } else { 0 };
        let start = env.config.window_start + chrono::Duration::days(offset);
        let (mut state, obs) = env.reset(start, key)?;
        let mut obs = obs_matrix(&obs);
        let mut per_sku = vec![0.0; env.num_agents()];
        let mut trajectory = vec![state.prices.clone()];
        while !state.done {
            let actions = policy.act_greedy(obs, &env.graph);
            let out = env.step(&mut state, &actions)?;
            for (acc, p) in per_sku.iter_mut().zip(&out.per_sku_profit) {
                *acc += p;
            }
            trajectory.push(state.prices.clone());
            obs = obs_matrix(&out.observations);
        }
        results.push(EpisodeResult {
            method: method.to_string(),
            seed,
            episode: e,
            start,
            profit: per_sku.iter().sum(),
            per_sku_profit: per_sku,
            stability_pct: stability_metric(&trajectory)?,
        });
    }
    Ok(results)
}

/// Jain's fairness index with negative inputs clipped to zero.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct JainResult {
    pub index: f64,
    pub clipped_negatives: usize,
    /// all-zero input, index defined as 1 by convention
    pub degenerate_all_zero: bool,
}

pub fn jain_index(values: &[f64]) -> JainResult {
    assert!(!values.is_empty(), "jain_index of an empty vector");
    let clipped_negatives = values.iter().filter(|&&v| v < 0.0).count();
    let x: Vec<f64> = values.iter().map(|&v| v.max(0.0)).collect();
    let sum: f64 = x.iter().sum();
    let sq: f64 = x.iter().map(|v| v * v).sum();
    if sq == 0.0 {
        return JainResult { index: 1.0, clipped_negatives, degenerate_all_zero: true };
    }
    JainResult {
        index: sum * sum / (x.len() as f64 * sq),
        clipped_negatives,
        degenerate_all_zero: false,
    }
}

/// Mean over steps t ≥ 2 and SKUs of |p_t − p_{t−1}| / p_{t−1}, in
/// percent.
pub fn stability_metric(trajectory: &[Vec<f64>]) -> Result<f64, EvalError> {
    if trajectory.len() < 2 {
        return Err(EvalError::TrajectoryTooShort(trajectory.len()));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for w in trajectory.windows(2) {
        for (prev, cur) in w[0].iter().zip(&w[1]) {
            total += (cur - prev).abs() / prev * 100.0;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Per-seed aggregates of one method.
#[derive(Debug, Clone, Serialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub mean_profit: f64,
    pub median_profit: f64,
    /// Jain's index of the seed's mean per-SKU profits
    pub jain: f64,
    pub mean_stability_pct: f64,
}

fn median(sorted: &mut [f64]) -> f64 {
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    }
}

/// Group episode results by seed.
pub fn seed_summaries(results: &[EpisodeResult]) -> Vec<SeedSummary> {
    let mut by_seed: BTreeMap<u64, Vec<&EpisodeResult>> = BTreeMap::new();
    for r in results {
        by_seed.entry(r.seed).or_default().push(r);
    }
    by_seed
        .into_iter()
        .map(|(seed, rows)| {
            let n = rows.len() as f64;
            let mut profits: Vec<f64> = rows.iter().map(|r| r.profit).collect();
            let mean_profit = profits.iter().sum::<f64>() / n;
            let skus = rows[0].per_sku_profit.len();
            let per_sku: Vec<f64> = (0..skus)
                .map(|i| rows.iter().map(|r| r.per_sku_profit[i]).sum::<f64>() / n)
                .collect();
            SeedSummary {
                seed,
                mean_profit,
                median_profit: median(&mut profits),
                jain: jain_index(&per_sku).index,
                mean_stability_pct: rows.iter().map(|r| r.stability_pct).sum::<f64>() / n,
            }
        })
        .collect()
}

/// Paired comparison of two methods evaluated under shared keys.
/// Differences are B − A; a win is a seed where B beats A.
#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub method_a: String,
    pub method_b: String,
    pub seeds: Vec<u64>,
    pub summary_a: Vec<SeedSummary>,
    pub summary_b: Vec<SeedSummary>,
    /// per-seed mean profit difference, B − A
    pub seed_differences: Vec<f64>,
    pub wins: usize,
    pub losses: usize,
    pub ties: usize,
    pub mean_difference: f64,
    /// percentile-bootstrap 95% CI of the mean paired difference
    pub ci_low: f64,
    pub ci_high: f64,
}

fn key_set(results: &[EpisodeResult]) -> Vec<(u64, u64)> {
    let mut keys: Vec<(u64, u64)> = results.iter().map(|r| (r.seed, r.episode)).collect();
    keys.sort_unstable();
    keys
}

/// Percentile bootstrap CI of the mean over a deterministic resample
/// stream.
pub fn bootstrap_ci(values: &[f64], resamples: usize, key: StreamKey) -> (f64, f64) {
    let n = values.len();
    let mut rng = key.rng();
    let mut means: Vec<f64> = (0..resamples)
        .map(|_| {
            let mut s = 0.0;
            for _ in 0..n {
                s += values[rng.gen_range(0..n)];
            }
            s / n as f64
        })
        .collect();
    means.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let lo = means[((resamples as f64 * 0.025) as usize).min(resamples - 1)];
    let hi = means[((resamples as f64 * 0.975) as usize).min(resamples - 1)];
    (lo, hi)
}

pub const BOOTSTRAP_RESAMPLES: usize = 10_000;

pub fn paired_stats(a: &[EpisodeResult], b: &[EpisodeResult]) -> Result<EvalReport, EvalError> {
    let keys_a = key_set(a);
    let keys_b = key_set(b);
    if keys_a != keys_b {
        let only_a: Vec<_> = keys_a.iter().filter(|k| !keys_b.contains(k)).cloned().collect();
        let only_b: Vec<_> = keys_b.iter().filter(|k| !keys_a.contains(k)).cloned().collect();
        return Err(EvalError::UnpairedKeys { only_a, only_b });
    }
    let summary_a = seed_summaries(a);
    let summary_b = seed_summaries(b);
    let seeds: Vec<u64> = summary_a.iter().map(|s| s.seed).collect();
    let seed_differences: Vec<f64> = summary_a
        .iter()
        .zip(&summary_b)
        .map(|(x, y)| y.mean_profit - x.mean_profit)
        .collect();
    let wins = seed_differences.iter().filter(|&&d| d > 0.0).count();
    let losses = seed_differences.iter().filter(|&&d| d < 0.0).count();
    let ties = seed_differences.len() - wins - losses;
    let mean_difference =
        seed_differences.iter().sum::<f64>() / seed_differences.len().max(1) as f64;
    let (ci_low, ci_high) = bootstrap_ci(
        &seed_differences,
        BOOTSTRAP_RESAMPLES,
        StreamKey::derive("paired-bootstrap", &[seed_differences.len() as u64]),
    );
    Ok(EvalReport {
        method_a: a[0].method.clone(),
        method_b: b[0].method.clone(),
        seeds,
        summary_a,
        summary_b,
        seed_differences,
        wins,
        losses,
        ties,
        mean_difference,
        ci_low,
        ci_high,
    })
}

/// One row of the λ_stab frontier.
#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub lambda: f64,
    pub mean_profit: f64,
    pub mean_stability_pct: f64,
}

/// Run the closure per λ, isolating per-row failures so one bad λ does
/// not abort the sweep.
pub fn lambda_sweep<F>(
    lambdas: &[f64],
    mut run: F,
) -> Result<Vec<(f64, Result<SweepRow, String>)>, EvalError>
where
    F: FnMut(f64) -> Result<SweepRow, String>,
{
    if lambdas.is_empty() {
        return Err(EvalError::EmptyGrid);
    }
    Ok(lambdas.iter().map(|&l| (l, run(l))).collect())
}

/// True when stability is non-increasing in λ up to `tolerance_pp`
/// percentage points of allowed inversion.
pub fn stability_non_increasing(rows: &[SweepRow], tolerance_pp: f64) -> bool {
    rows.windows(2).all(|w| w[1].mean_stability_pct <= w[0].mean_stability_pct + tolerance_pp)
}

pub fn write_episodes_csv<W: Write>(results: &[EpisodeResult], mut w: W) -> std::io::Result<()> {
    writeln!(w, "method,seed,episode,start,profit,stability_pct,per_sku_profit")?;
    for r in results {
        let per_sku: Vec<String> = r.per_sku_profit.iter().map(|p| format!("{p:.6}")).collect();
        writeln!(
            w,
            "{},{},{},{},{:.6},{:.6},{}",
            r.method,
            r.seed,
            r.episode,
            r.start,
            r.profit,
            r.stability_pct,
            per_sku.join(";")
        )?;
    }
    Ok(())
}

/// Inverse of [`write_episodes_csv`], at the writer's 6-decimal precision.
pub fn read_episodes_csv<R: std::io::Read>(
    r: R,
) -> Result<Vec<EpisodeResult>, crate::ingest::IngestError> {
    use crate::ingest::IngestError;
    let bad = |d: String| IngestError::BadArtifact(format!("episodes csv: {d}"));
    let mut reader = csv::Reader::from_reader(r);
    let mut results = Vec::new();
    for record in reader.records() {
        let rec = record.map_err(IngestError::Csv)?;
        if rec.len() != 7 {
            return Err(bad("expected 7 columns".into()));
        }
        let per_sku_profit: Result<Vec<f64>, _> = rec[6]
            .split(';')
            .map(|p| p.parse::<f64>().map_err(|_| bad(format!("bad per_sku_profit '{}'", &rec[6]))))
            .collect();
        results.push(EpisodeResult {
            method: rec[0].to_string(),
            seed: rec[1].parse().map_err(|_| bad("bad seed".into()))?,
            episode: rec[2].parse().map_err(|_| bad("bad episode".into()))?,
            start: rec[3].parse().map_err(|_| bad("bad start date".into()))?,
            profit: rec[4].parse().map_err(|_| bad("bad profit".into()))?,
            stability_pct: rec[5].parse().map_err(|_| bad("bad stability_pct".into()))?,
            per_sku_profit: per_sku_profit?,
        });
    }
    Ok(results)
}

pub fn write_report_csv<W: Write>(report: &EvalReport, mut w: W) -> std::io::Result<()> {
    writeln!(
        w,
        "seed,mean_profit_a,median_profit_a,jain_a,stability_a,mean_profit_b,median_profit_b,jain_b,stability_b,difference"
    )?;
    for ((a, b), d) in report
        .summary_a
        .iter()
        .zip(&report.summary_b)
        .zip(&report.seed_differences)
    {
        writeln!(
            w,
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            a.seed,
            a.mean_profit,
            a.median_profit,
            a.jain,
            a.mean_stability_pct,
            b.mean_profit,
            b.median_profit,
            b.jain,
            b.mean_stability_pct,
            d
        )?;
    }
    Ok(())
}

pub fn write_frontier_csv<W: Write>(
    rows: &[(f64, Result<SweepRow, String>)],
    mut w: W,
) -> std::io::Result<()> {
    writeln!(w, "lambda,mean_profit,mean_stability_pct,error")?;
    for (l, row) in rows {
        match row {
            Ok(r) => writeln!(w, "{l},{:.6},{:.6},", r.mean_profit, r.mean_stability_pct)?,
            Err(e) => writeln!(w, "{l},,,{}", e.replace(',', ";"))?,
        }
    }
    Ok(())
}

/// Plot-data CSVs in the layouts of the report figures:
/// 1 mean profit ± CI bars, 2 paired-difference histogram, 3 per-seed
/// difference strip, 4 win/loss/tie counts, 5 per-seed Jain deltas,
/// 6 per-seed stability deltas.
pub fn write_figure_data(report: &EvalReport, dir: &std::path::Path) -> std::io::Result<()> {
    std::fs::create_dir_all(dir)?;
    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len().max(1) as f64;

    let mut f1 = std::fs::File::create(dir.join("fig1_mean_profit.csv"))?;
    writeln!(f1, "method,mean_profit,ci_low,ci_high")?;
    for (label, summary) in [(&report.method_a, &report.summary_a), (&report.method_b, &report.summary_b)] {
        let profits: Vec<f64> = summary.iter().map(|s| s.mean_profit).collect();
        let (lo, hi) = bootstrap_ci(
            &profits,
            BOOTSTRAP_RESAMPLES,
            StreamKey::derive("figure-ci", &[profits.len() as u64]),
        );
        writeln!(f1, "{label},{:.6},{lo:.6},{hi:.6}", mean(&profits))?;
    }

    let mut f2 = std::fs::File::create(dir.join("fig2_difference_histogram.csv"))?;
    writeln!(f2, "seed,difference")?;
    for (s, d) in report.seeds.iter().zip(&report.seed_differences) {
        writeln!(f2, "{s},{d:.6}")?;
    }

    let mut f3 = std::fs::File::create(dir.join("fig3_seed_strip.csv"))?;
    writeln!(f3, "seed,profit_a,profit_b")?;
    for (a, b) in report.summary_a.iter().zip(&report.summary_b) {
        writeln!(f3, "{},{:.6},{:.6}", a.seed, a.mean_profit, b.mean_profit)?;
    }

    let mut f4 = std::fs::File::create(dir.join("fig4_win_loss.csv"))?;
    writeln!(f4, "outcome,count")?;
    writeln!(f4, "win,{}", report.wins)?;
    writeln!(f4, "loss,{}", report.losses)?;
    writeln!(f4, "tie,{}", report.ties)?;

    let mut f5 = std::fs::File::create(dir.join("fig5_jain_delta.csv"))?;
    writeln!(f5, "seed,jain_a,jain_b,delta")?;
    for (a, b) in report.summary_a.iter().zip(&report.summary_b) {
        writeln!(f5, "{},{:.6},{:.6},{:.6}", a.seed, a.jain, b.jain, b.jain - a.jain)?;
    }

    let mut f6 = std::fs::File::create(dir.join("fig6_stability_delta.csv"))?;
    writeln!(f6, "seed,stability_a,stability_b,delta")?;
    for (a, b) in report.summary_a.iter().zip(&report.summary_b) {
        writeln!(
            f6,
            "{},{:.6},{:.6},{:.6}",
            a.seed,
            a.mean_stability_pct,
            b.mean_stability_pct,
            b.mean_stability_pct - a.mean_stability_pct
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::marl::{Architecture, PolicyNet, DEFAULT_HEADS, DEFAULT_HIDDEN};
    use crate::synthetic;
    use approx::assert_relative_eq;

    fn fresh_policy(seed: u64) -> PolicyNet {
        let mut rng = StreamKey::derive("eval-test-policy", &[seed]).rng();
        PolicyNet::new(
            Architecture::Mappo,
            crate::env::OBS_LEN,
            5,
            DEFAULT_HIDDEN,
            DEFAULT_HEADS,
            0.0,
            0.0,
            &mut rng,
        )
    }

    #[test]
    fn jain_fixtures() {
        assert_relative_eq!(jain_index(&[2.0, 2.0, 2.0]).index, 1.0, epsilon = 1e-12);
        assert_relative_eq!(jain_index(&[1.0, 0.0, 0.0, 0.0]).index, 0.25, epsilon = 1e-12);
        assert_relative_eq!(jain_index(&[3.0, 1.0]).index, 0.8, epsilon = 1e-12);
    }

    #[test]
    fn jain_clips_negatives_and_flags_all_zero() {
        let r = jain_index(&[3.0, -5.0]);
        assert_eq!(r.clipped_negatives, 1);
        assert_relative_eq!(r.index, 1.0 / 2.0, epsilon = 1e-12); // [3,0]
        let z = jain_index(&[0.0, -1.0]);
        assert!(z.degenerate_all_zero);
        assert_eq!(z.index, 1.0);
    }

    proptest::proptest! {
        #[test]
        fn jain_bounds_and_scale_invariance(
            values in proptest::collection::vec(0.0f64..100.0, 1..20),
            c in 0.01f64..100.0,
        ) {
            let r = jain_index(&values);
            let n = values.len() as f64;
            proptest::prop_assert!(r.index >= 1.0 / n - 1e-12);
            proptest::prop_assert!(r.index <= 1.0 + 1e-12);
            if !r.degenerate_all_zero {
                let scaled: Vec<f64> = values.iter().map(|v| v * c).collect();
                let rs = jain_index(&scaled);
                proptest::prop_assert!((r.index - rs.index).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn stability_fixtures() {
        assert_relative_eq!(
            stability_metric(&[vec![10.0, 5.0], vec![10.0, 5.0], vec![10.0, 5.0]]).unwrap(),
            0.0,
            epsilon = 1e-12
        );
        assert_relative_eq!(
            stability_metric(&[vec![10.0], vec![11.0]]).unwrap(),
            10.0,
            epsilon = 1e-12
        );
        assert_relative_eq!(
            stability_metric(&[vec![10.0], vec![11.0], vec![11.0]]).unwrap(),
            5.0,
            epsilon = 1e-12
        );
        assert!(matches!(
            stability_metric(&[vec![10.0]]),
            Err(EvalError::TrajectoryTooShort(1))
        ));
    }

    #[test]
    fn evaluate_is_deterministic() {
        let env = synthetic::env(0.0, 0.3, 6);
        let p = fresh_policy(0);
        let a = evaluate(&env, &p, "m", 1, 5, "crn-test").unwrap();
        let b = evaluate(&env, &p, "m", 1, 5, "crn-test").unwrap();
        assert_eq!(a.len(), 5);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.profit.to_bits(), y.profit.to_bits());
            assert_eq!(x.start, y.start);
        }
    }

    #[test]
    fn profit_equals_per_sku_sum() {
        let env = synthetic::env(2.0, 0.3, 6);
        let p = fresh_policy(1);
        for r in evaluate(&env, &p, "m", 0, 8, "crn-sum").unwrap() {
            assert_relative_eq!(r.profit, r.per_sku_profit.iter().sum::<f64>(), epsilon = 1e-9);
        }
    }

    #[test]
    fn label_swap_negates_differences_exactly() {
        let env = synthetic::env(0.0, 0.3, 6);
        let pa = fresh_policy(2);
        let pb = fresh_policy(3);
        let mut a = Vec::new();
        let mut b = Vec::new();
        for seed in 0..4 {
            a.extend(evaluate(&env, &pa, "a", seed, 6, "crn-swap").unwrap());
            b.extend(evaluate(&env, &pb, "b", seed, 6, "crn-swap").unwrap());
        }
        let ab = paired_stats(&a, &b).unwrap();
        let ba = paired_stats(&b, &a).unwrap();
        for (x, y) in ab.seed_differences.iter().zip(&ba.seed_differences) {
            assert_eq!(x.to_bits(), (-y).to_bits());
        }
        assert_eq!(ab.wins, ba.losses);
        assert_eq!(ab.ties, ba.ties);
    }

    #[test]
    fn identical_results_give_all_ties_and_zero_ci() {
        let env = synthetic::env(0.0, 0.3, 6);
        let p = fresh_policy(4);
        let mut a = Vec::new();
        for seed in 0..3 {
            a.extend(evaluate(&env, &p, "m", seed, 4, "crn-tie").unwrap());
        }
        let rep = paired_stats(&a, &a).unwrap();
        assert_eq!((rep.wins, rep.losses, rep.ties), (0, 0, 3));
        assert_eq!(rep.mean_difference, 0.0);
        assert_eq!((rep.ci_low, rep.ci_high), (0.0, 0.0));
    }

    #[test]
    fn hand_fixture_counts_wins_and_losses() {
        // synthesize per-seed deltas {+1, +1, -1} directly
        let mk = |method: &str, seed: u64, profit: f64| EpisodeResult {
            method: method.into(),
            seed,
            episode: 0,
            start: synthetic::window_start(),
            profit,
            per_sku_profit: vec![profit],
            stability_pct: 0.0,
        };
        let a = vec![mk("a", 0, 10.0), mk("a", 1, 10.0), mk("a", 2, 10.0)];
        let b = vec![mk("b", 0, 11.0), mk("b", 1, 11.0), mk("b", 2, 9.0)];
        let rep = paired_stats(&a, &b).unwrap();
        assert_eq!((rep.wins, rep.losses, rep.ties), (2, 1, 0));
        assert_relative_eq!(rep.mean_difference, 1.0 / 3.0, epsilon = 1e-12);
        assert_eq!(rep.wins + rep.losses + rep.ties, rep.seeds.len());
    }

    #[test]
    fn unpaired_key_sets_error_lists_missing_keys() {
        let env = synthetic::env(0.0, 0.3, 6);
        let p = fresh_policy(5);
        let a = evaluate(&env, &p, "a", 0, 3, "crn-mismatch").unwrap();
        let b = evaluate(&env, &p, "b", 0, 2, "crn-mismatch").unwrap();
        match paired_stats(&a, &b) {
            Err(EvalError::UnpairedKeys { only_a, only_b }) => {
                assert_eq!(only_a, vec![(0, 2)]);
                assert!(only_b.is_empty());
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn crn_pairing_reduces_difference_variance() {
        let env = synthetic::env(0.0, 0.5, 6);
        let pa = fresh_policy(6);
        let pb = fresh_policy(7);
        let episodes = 60;
        let paired_a = evaluate(&env, &pa, "a", 0, episodes, "crn-var").unwrap();
        let paired_b = evaluate(&env, &pb, "b", 0, episodes, "crn-var").unwrap();
        let indep_b = evaluate(&env, &pb, "b", 0, episodes, "crn-var-other").unwrap();
        let variance = |xs: &[f64]| {
            let m = xs.iter().sum::<f64>() / xs.len() as f64;
            xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64
        };
        let d_paired: Vec<f64> = paired_a
            .iter()
            .zip(&paired_b)
            .map(|(x, y)| y.profit - x.profit)
            .collect();
        let d_indep: Vec<f64> = paired_a
            .iter()
            .zip(&indep_b)
            .map(|(x, y)| y.profit - x.profit)
            .collect();
        assert!(
            variance(&d_paired) < variance(&d_indep),
            "paired {} vs independent {}",
            variance(&d_paired),
            variance(&d_indep)
        );
    }

    #[test]
    fn lambda_sweep_isolates_failures_and_rejects_empty_grid() {
        assert!(matches!(lambda_sweep(&[], |_| unreachable!()), Err(EvalError::EmptyGrid)));
        let rows = lambda_sweep(&[0.0, 0.5, 2.0], |l| {
            if l == 0.5 {
                Err("boom".to_string())
            } else {
                Ok(SweepRow { lambda: l, mean_profit: 1.0, mean_stability_pct: 10.0 - l })
            }
        })
        .unwrap();
        assert_eq!(rows.len(), 3);
        assert!(rows[0].1.is_ok());
        assert!(rows[1].1.is_err());
        assert!(rows[2].1.is_ok());
    }

    #[test]
    fn stability_trend_check_allows_small_inversions() {
        let mk = |l: f64, s: f64| SweepRow { lambda: l, mean_profit: 0.0, mean_stability_pct: s };
        assert!(stability_non_increasing(&[mk(0.0, 10.0), mk(0.5, 8.0), mk(2.0, 8.05)], 0.1));
        assert!(!stability_non_increasing(&[mk(0.0, 10.0), mk(0.5, 8.0), mk(2.0, 8.5)], 0.1));
    }

    #[test]
    fn report_files_are_written() {
        let env = synthetic::env(0.0, 0.3, 6);
        let pa = fresh_policy(8);
        let pb = fresh_policy(9);
        let mut a = Vec::new();
        let mut b = Vec::new();
        for seed in 0..3 {
            a.extend(evaluate(&env, &pa, "a", seed, 3, "crn-files").unwrap());
            b.extend(evaluate(&env, &pb, "b", seed, 3, "crn-files").unwrap());
        }
        let rep = paired_stats(&a, &b).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_figure_data(&rep, dir.path()).unwrap();
        for f in [
            "fig1_mean_profit.csv",
            "fig2_difference_histogram.csv",
            "fig3_seed_strip.csv",
            "fig4_win_loss.csv",
            "fig5_jain_delta.csv",
            "fig6_stability_delta.csv",
        ] {
            assert!(dir.path().join(f).exists(), "{f} missing");
        }
        let mut csv = Vec::new();
        write_report_csv(&rep, &mut csv).unwrap();
        assert_eq!(String::from_utf8(csv).unwrap().lines().count(), 4);
        let mut eps = Vec::new();
        write_episodes_csv(&a, &mut eps).unwrap();
        assert_eq!(String::from_utf8(eps).unwrap().lines().count(), 10);

        let back = read_episodes_csv(eps_copy(&a).as_slice()).unwrap();
        assert_eq!(back.len(), a.len());
        for (r, o) in back.iter().zip(&a) {
            assert_eq!(r.method, o.method);
            assert_eq!((r.seed, r.episode, r.start), (o.seed, o.episode, o.start));
            assert_relative_eq!(r.profit, o.profit, epsilon = 1e-6);
            assert_relative_eq!(r.stability_pct, o.stability_pct, epsilon = 1e-6);
            assert_eq!(r.per_sku_profit.len(), o.per_sku_profit.len());
        }
    }

    fn eps_copy(results: &[EpisodeResult]) -> Vec<u8> {
        let mut buf = Vec::new();
        write_episodes_csv(results, &mut buf).unwrap();
        buf
    }
}
