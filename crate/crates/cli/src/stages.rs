//! Pipeline stages. Each stage reads the previous stage's artifacts
//! (verifying their manifest hashes), runs the corresponding core
//! module, and writes its own artifacts plus a manifest.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use pricing_lab_core::demand::{self, DemandOracle, FitConfig};
use pricing_lab_core::env::{ObsNormalizer, PricingEnv};
use pricing_lab_core::eval as ev;
use pricing_lab_core::graph::{self, GraphSidecar, ItemGraph};
use pricing_lab_core::ingest::{self, Catalog, SalesPanel, Transaction};
use pricing_lab_core::marl::{write_training_curve_csv, Architecture, PolicyNet, Trainer};
use pricing_lab_core::nn::Checkpoint;
use pricing_lab_core::synthetic;
use serde::Serialize;

use crate::config::{lambda_dir, run_dir, RunConfig};
use crate::manifest::{hash_file, verify_stage, Manifest};

fn write_artifact<F>(dir: &Path, name: &str, write: F) -> Result<()>
where
    F: FnOnce(&mut Vec<u8>) -> std::io::Result<()>,
{
    let mut buf = Vec::new();
    write(&mut buf)?;
    fs::write(dir.join(name), buf)
        .with_context(|| format!("cannot write {}/{name}", dir.display()))?;
    Ok(())
}

fn read_artifact(work_dir: &Path, relative: &str) -> Result<Vec<u8>> {
    fs::read(work_dir.join(relative))
        .with_context(|| format!("cannot read artifact {relative}"))
}

/// Copy the hashes of upstream outputs we depend on into this stage's
/// input map, prefixed with the upstream stage directory.
fn record_upstream(manifest: &mut Manifest, upstream: &Manifest, stage_rel: &str, names: &[&str]) {
    for name in names {
        if let Some(hash) = upstream.outputs.get(*name) {
            manifest.inputs.insert(format!("{stage_rel}/{name}"), hash.clone());
        }
    }
}

/// Regenerate the bundled synthetic transaction fixture at the raw-data
/// path. The generator is deterministic in the seed.
pub fn cmd_synth(config: &RunConfig, seed: u64) -> Result<()> {
    if let Some(parent) = config.paths.raw_data.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut buf = Vec::new();
    synthetic::write_transactions_csv(&mut buf, seed)?;
    fs::write(&config.paths.raw_data, buf)
        .with_context(|| format!("cannot write {}", config.paths.raw_data.display()))?;
    println!("synth: wrote {}", config.paths.raw_data.display());
    Ok(())
}

#[derive(Serialize)]
struct IngestSummary {
    transactions: usize,
    invoices: usize,
    customers: usize,
    rejected_rows: usize,
}

pub fn cmd_ingest(config: &RunConfig, work_dir: &Path) -> Result<()> {
    let raw = &config.paths.raw_data;
    let loaded = ingest::load_transactions(raw)
        .with_context(|| format!("cannot ingest raw data file {}", raw.display()))?;
    let cleaned = ingest::clean(loaded.transactions);
    let out = ingest::trim(
        &cleaned,
        (config.ingest.window_start, config.ingest.window_end),
        config.ingest.top_n,
        config.ingest.cost_ratio,
    )?;
    let (transactions, invoices, customers) = ingest::summarize(&out.rows);

    let dir = work_dir.join("ingest");
    fs::create_dir_all(&dir)?;
    write_artifact(&dir, "catalog.csv", |w| ingest::write_catalog_csv(&out.catalog, w))?;
    write_artifact(&dir, "panel.csv", |w| ingest::write_panel_csv(&out.panel, w))?;
    write_artifact(&dir, "rows.csv", |w| ingest::write_rows_csv(&out.rows, w))?;
    write_artifact(&dir, "rejects.csv", |w| ingest::write_rejects_csv(&loaded.rejects, w))?;
    let summary = IngestSummary {
        transactions,
        invoices,
        customers,
        rejected_rows: loaded.rejects.len(),
    };
    write_artifact(&dir, "summary.json", |w| {
        serde_json::to_writer_pretty(&mut *w, &summary)?;
        w.push(b'\n');
        Ok(())
    })?;

    let mut manifest = Manifest::new("ingest", config);
    manifest.inputs.insert("raw_data".into(), hash_file(raw)?);
    for name in ["catalog.csv", "panel.csv", "rows.csv", "rejects.csv", "summary.json"] {
        manifest.record_output(&dir, name)?;
    }
    manifest.write(&dir)?;
    println!(
        "ingest: {transactions} transactions, {invoices} invoices, {customers} customers, \
         {} SKUs, {} rejects",
        out.catalog.len(),
        loaded.rejects.len()
    );
    Ok(())
}

fn load_catalog(work_dir: &Path) -> Result<Catalog> {
    Ok(ingest::read_catalog_csv(read_artifact(work_dir, "ingest/catalog.csv")?.as_slice())?)
}

fn load_panel(work_dir: &Path, catalog: &Catalog) -> Result<SalesPanel> {
    Ok(ingest::read_panel_csv(read_artifact(work_dir, "ingest/panel.csv")?.as_slice(), catalog)?)
}

fn load_rows(work_dir: &Path) -> Result<Vec<Transaction>> {
    Ok(ingest::read_rows_csv(read_artifact(work_dir, "ingest/rows.csv")?.as_slice())?)
}

fn load_graph(work_dir: &Path, catalog: &Catalog) -> Result<ItemGraph> {
    let sidecar: GraphSidecar =
        serde_json::from_slice(&read_artifact(work_dir, "graph/graph.json")?)?;
    Ok(graph::read_edge_list_csv(
        read_artifact(work_dir, "graph/edges.csv")?.as_slice(),
        catalog,
        &sidecar,
    )?)
}

fn load_oracle(work_dir: &Path) -> Result<DemandOracle> {
    let text = String::from_utf8(read_artifact(work_dir, "fit/oracle.json")?)?;
    Ok(DemandOracle::from_json(&text)?)
}

fn load_normalizer(work_dir: &Path) -> Result<ObsNormalizer> {
    Ok(serde_json::from_slice(&read_artifact(work_dir, "fit/normalizer.json")?)?)
}

pub fn cmd_graph(config: &RunConfig, work_dir: &Path) -> Result<()> {
    let upstream = verify_stage(work_dir, "ingest", "ingest")?;
    let catalog = load_catalog(work_dir)?;
    let rows = load_rows(work_dir)?;
    let weights = graph::cooccurrence_counts(&rows, &catalog);
    let g = graph::build_graph(&weights, config.graph.tau, config.graph.k);
    let components = graph::weak_components(&g);

    let dir = work_dir.join("graph");
    fs::create_dir_all(&dir)?;
    write_artifact(&dir, "edges.csv", |w| graph::write_edge_list_csv(&g, &catalog, w))?;
    write_artifact(&dir, "graph.json", |w| {
        serde_json::to_writer_pretty(&mut *w, &GraphSidecar::of(&g))?;
        w.push(b'\n');
        Ok(())
    })?;

    let mut manifest = Manifest::new("graph", config);
    record_upstream(&mut manifest, &upstream, "ingest", &["catalog.csv", "rows.csv"]);
    manifest.record_output(&dir, "edges.csv")?;
    manifest.record_output(&dir, "graph.json")?;
    manifest.write(&dir)?;
    println!(
        "graph: {} directed edges, {} weak component(s) over {} SKUs",
        g.edge_count(),
        components.len(),
        catalog.len()
    );
    Ok(())
}

pub fn cmd_fit(config: &RunConfig, work_dir: &Path) -> Result<()> {
    let up_ingest = verify_stage(work_dir, "ingest", "ingest")?;
    let up_graph = verify_stage(work_dir, "graph", "graph")?;
    let catalog = load_catalog(work_dir)?;
    let panel = load_panel(work_dir, &catalog)?;
    let g = load_graph(work_dir, &catalog)?;

    let mut fit_config = FitConfig::new(config.demand.split);
    fit_config.ridge_penalty = config.demand.ridge_penalty;
    let (oracle, diagnostics) = demand::fit(&panel, &catalog, &g, &fit_config)?;
    let split_day = panel
        .day_of(config.demand.split)
        .context("demand split date outside panel window")?;
    let normalizer = ObsNormalizer::fit(&panel, &catalog, &g, 0, split_day);

    let dir = work_dir.join("fit");
    fs::create_dir_all(&dir)?;
    write_artifact(&dir, "oracle.json", |w| {
        w.extend_from_slice(oracle.to_json().as_bytes());
        w.push(b'\n');
        Ok(())
    })?;
    write_artifact(&dir, "diagnostics.csv", |w| demand::write_diagnostics_csv(&diagnostics, w))?;
    write_artifact(&dir, "normalizer.json", |w| {
        serde_json::to_writer_pretty(&mut *w, &normalizer)?;
        w.push(b'\n');
        Ok(())
    })?;

    let mut manifest = Manifest::new("fit", config);
    record_upstream(&mut manifest, &up_ingest, "ingest", &["catalog.csv", "panel.csv"]);
    record_upstream(&mut manifest, &up_graph, "graph", &["edges.csv", "graph.json"]);
    for name in ["oracle.json", "diagnostics.csv", "normalizer.json"] {
        manifest.record_output(&dir, name)?;
    }
    manifest.write(&dir)?;
    println!(
        "fit: held-out R2(log1p) {:.4}, RMSE {:.3} units, {} pooled fallback(s)",
        diagnostics.r2_log1p,
        diagnostics.rmse_qty,
        diagnostics.per_sku.iter().filter(|s| s.pooled_fallback).count()
    );
    Ok(())
}

/// Shared inputs for the train and eval stages.
struct World {
    catalog: Catalog,
    panel: SalesPanel,
    graph: ItemGraph,
    oracle: DemandOracle,
    normalizer: ObsNormalizer,
    fit_inputs: Vec<(String, String)>,
}

fn load_world(config: &RunConfig, work_dir: &Path) -> Result<World> {
    let up_ingest = verify_stage(work_dir, "ingest", "ingest")?;
    let up_graph = verify_stage(work_dir, "graph", "graph")?;
    let up_fit = verify_stage(work_dir, "fit", "fit")?;
    let catalog = load_catalog(work_dir)?;
    let panel = load_panel(work_dir, &catalog)?;
    let graph = load_graph(work_dir, &catalog)?;
    let oracle = load_oracle(work_dir)?;
    let normalizer = load_normalizer(work_dir)?;
    let _ = config;
    let mut fit_inputs = Vec::new();
    for (stage_rel, up, names) in [
        ("ingest", &up_ingest, vec!["catalog.csv", "panel.csv"]),
        ("graph", &up_graph, vec!["edges.csv", "graph.json"]),
        ("fit", &up_fit, vec!["oracle.json", "diagnostics.csv", "normalizer.json"]),
    ] {
        for name in names {
            if let Some(h) = up.outputs.get(name) {
                fit_inputs.push((format!("{stage_rel}/{name}"), h.clone()));
            }
        }
    }
    Ok(World { catalog, panel, graph, oracle, normalizer, fit_inputs })
}

impl World {
    fn env(&self, config: &RunConfig, lambda: f64) -> Result<PricingEnv> {
        Ok(PricingEnv::new(
            self.catalog.clone(),
            self.graph.clone(),
            self.oracle.clone(),
            self.panel.clone(),
            self.normalizer.clone(),
            config.env_config(lambda, self.catalog.window_end),
        )?)
    }
}

#[derive(Serialize)]
struct RunStatus {
    arch: String,
    lambda: f64,
    seed: u64,
    status: String,
}

#[derive(Serialize)]
struct RunMetrics {
    best_validation_profit: f64,
    env_steps: usize,
    diverged_at: Option<usize>,
}

pub fn cmd_train(config: &RunConfig, work_dir: &Path) -> Result<()> {
    let world = load_world(config, work_dir)?;
    let mut statuses = Vec::new();
    let mut successes = 0usize;

    for arch in config.architectures() {
        for &lambda in &config.lambdas() {
            let env = world.env(config, lambda)?;
            for &seed in &config.train.seeds {
                let rel = run_dir(arch, lambda, seed);
                match train_one(config, work_dir, &world, &env, arch, lambda, seed, &rel) {
                    Ok(profit) => {
                        successes += 1;
                        println!(
                            "train: {arch} {} seed {seed} best validation profit {profit:.2}",
                            lambda_dir(lambda)
                        );
                        statuses.push(RunStatus {
                            arch: arch.to_string(),
                            lambda,
                            seed,
                            status: "ok".into(),
                        });
                    }
                    // a failed seed must not abort the other seeds
                    Err(e) => {
                        eprintln!(
                            "train: {arch} {} seed {seed} FAILED: {e:#}",
                            lambda_dir(lambda)
                        );
                        statuses.push(RunStatus {
                            arch: arch.to_string(),
                            lambda,
                            seed,
                            status: format!("failed: {e:#}"),
                        });
                    }
                }
            }
        }
    }

    let dir = work_dir.join("train");
    fs::create_dir_all(&dir)?;
    write_artifact(&dir, "runs.json", |w| {
        serde_json::to_writer_pretty(&mut *w, &statuses)?;
        w.push(b'\n');
        Ok(())
    })?;
    if successes == 0 {
        bail!("train: every (architecture, lambda, seed) run failed");
    }
    println!("train: {successes}/{} runs succeeded", statuses.len());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn train_one(
    config: &RunConfig,
    work_dir: &Path,
    world: &World,
    env: &PricingEnv,
    arch: Architecture,
    lambda: f64,
    seed: u64,
    rel: &PathBuf,
) -> Result<f64> {
    let train_config = config.train_config(seed);
    let trainer = Trainer::new(env, arch, train_config)?;
    let output = trainer.run()?;

    let dir = work_dir.join(rel);
    fs::create_dir_all(&dir)?;
    write_artifact(&dir, "checkpoint.json", |w| {
        w.extend_from_slice(output.net.checkpoint().to_json().as_bytes());
        w.push(b'\n');
        Ok(())
    })?;
    write_artifact(&dir, "curve.csv", |w| write_training_curve_csv(&output.curve, w))?;
    let metrics = RunMetrics {
        best_validation_profit: output.best_validation_profit,
        env_steps: output.env_steps,
        diverged_at: output.diverged_at,
    };
    write_artifact(&dir, "metrics.json", |w| {
        serde_json::to_writer_pretty(&mut *w, &metrics)?;
        w.push(b'\n');
        Ok(())
    })?;

    let mut manifest = Manifest::new("train", config);
    for (name, hash) in &world.fit_inputs {
        manifest.inputs.insert(name.clone(), hash.clone());
    }
    manifest.inputs.insert("lambda".into(), format!("{lambda}"));
    for name in ["checkpoint.json", "curve.csv", "metrics.json"] {
        manifest.record_output(&dir, name)?;
    }
    manifest.write(&dir)?;
    Ok(output.best_validation_profit)
}

fn load_policy(work_dir: &Path, rel: &Path) -> Result<PolicyNet> {
    let text = String::from_utf8(fs::read(work_dir.join(rel).join("checkpoint.json"))?)?;
    Ok(PolicyNet::from_checkpoint(Checkpoint::from_json(&text)?)?)
}

fn episodes_file(arch: Architecture, lambda: f64) -> String {
    format!("episodes_{arch}_{}.csv", lambda_dir(lambda))
}

pub fn cmd_eval(config: &RunConfig, work_dir: &Path) -> Result<()> {
    let world = load_world(config, work_dir)?;
    let dir = work_dir.join("eval");
    fs::create_dir_all(&dir)?;
    let mut manifest = Manifest::new("eval", config);
    for (name, hash) in &world.fit_inputs {
        manifest.inputs.insert(name.clone(), hash.clone());
    }
    let mut outputs: Vec<String> = Vec::new();

    for arch in config.architectures() {
        let mut frontier_rows = Vec::new();
        for &lambda in &config.lambdas() {
            let env = world.env(config, lambda)?;
            let mut results = Vec::new();
            for &seed in &config.train.seeds {
                let rel = run_dir(arch, lambda, seed);
                let rel_str = rel.to_string_lossy().to_string();
                // a missing or failed training run drops this seed only
                let run_manifest = match verify_stage(work_dir, &rel_str, "train") {
                    Ok(m) => m,
                    Err(e) => {
                        eprintln!("eval: skipping {rel_str}: {e:#}");
                        continue;
                    }
                };
                manifest.inputs.insert(
                    format!("{rel_str}/checkpoint.json"),
                    run_manifest.outputs["checkpoint.json"].clone(),
                );
                let policy = load_policy(work_dir, &rel)?;
                results.extend(ev::evaluate(
                    &env,
                    &policy,
                    &arch.to_string(),
                    seed,
                    config.eval.episodes,
                    &config.eval.crn_namespace,
                )?);
            }
            if results.is_empty() {
                eprintln!(
                    "eval: no checkpoints for {arch} {}; train first",
                    lambda_dir(lambda)
                );
                frontier_rows.push((lambda, Err("no trained checkpoints".to_string())));
                continue;
            }
            let name = episodes_file(arch, lambda);
            write_artifact(&dir, &name, |w| ev::write_episodes_csv(&results, w))?;
            outputs.push(name);
            let n = results.len() as f64;
            frontier_rows.push((
                lambda,
                Ok(ev::SweepRow {
                    lambda,
                    mean_profit: results.iter().map(|r| r.profit).sum::<f64>() / n,
                    mean_stability_pct: results.iter().map(|r| r.stability_pct).sum::<f64>() / n,
                }),
            ));
            println!(
                "eval: {arch} {} -> {} episodes across {} seed(s)",
                lambda_dir(lambda),
                results.len(),
                results.iter().map(|r| r.seed).collect::<std::collections::BTreeSet<_>>().len()
            );
        }
        let frontier_name = format!("frontier_{arch}.csv");
        write_artifact(&dir, &frontier_name, |w| ev::write_frontier_csv(&frontier_rows, w))?;
        outputs.push(frontier_name);
    }

    if outputs.iter().all(|n| n.starts_with("frontier")) {
        bail!("eval: no episodes were evaluated; run `pricing-lab train` first");
    }
    for name in &outputs {
        manifest.record_output(&dir, name)?;
    }
    manifest.write(&dir)?;
    Ok(())
}

pub fn cmd_report(config: &RunConfig, work_dir: &Path) -> Result<()> {
    let up_eval = verify_stage(work_dir, "eval", "eval")?;
    let archs = config.architectures();
    if archs.len() < 2 {
        bail!(
            "report needs two architectures to pair (got {:?}); \
             rerun train/eval without --arch",
            config.train.archs
        );
    }
    let lambda = config.lambdas()[0];
    let read_eps = |arch: Architecture| -> Result<Vec<ev::EpisodeResult>> {
        let name = episodes_file(arch, lambda);
        if !up_eval.outputs.contains_key(&name) {
            bail!("eval output {name} missing; rerun `pricing-lab eval`");
        }
        Ok(ev::read_episodes_csv(read_artifact(work_dir, &format!("eval/{name}"))?.as_slice())?)
    };
    let a = read_eps(archs[0])?;
    let b = read_eps(archs[1])?;
    let report = ev::paired_stats(&a, &b)?;

    let dir = work_dir.join("report");
    fs::create_dir_all(&dir)?;
    write_artifact(&dir, "report.csv", |w| ev::write_report_csv(&report, w))?;
    write_artifact(&dir, "report.json", |w| {
        serde_json::to_writer_pretty(&mut *w, &report)?;
        w.push(b'\n');
        Ok(())
    })?;
    ev::write_figure_data(&report, &dir)?;

    let mut manifest = Manifest::new("report", config);
    record_upstream(
        &mut manifest,
        &up_eval,
        "eval",
        &[&episodes_file(archs[0], lambda), &episodes_file(archs[1], lambda)],
    );
    let figures = [
        "fig1_mean_profit.csv",
        "fig2_difference_histogram.csv",
        "fig3_seed_strip.csv",
        "fig4_win_loss.csv",
        "fig5_jain_delta.csv",
        "fig6_stability_delta.csv",
    ];
    for name in ["report.csv", "report.json"].iter().chain(figures.iter()) {
        manifest.record_output(&dir, name)?;
    }
    manifest.write(&dir)?;
    println!(
        "report: {} vs {}: mean difference {:.2} (95% CI [{:.2}, {:.2}]), {}W/{}L/{}T",
        report.method_a,
        report.method_b,
        report.mean_difference,
        report.ci_low,
        report.ci_high,
        report.wins,
        report.losses,
        report.ties
    );
    Ok(())
}
