//! Criterion benchmarks for the pipeline hot paths: environment
//! stepping, GAT forward passes, GAE, one PPO update, and graph
//! construction.

use criterion::{criterion_group, criterion_main, Criterion};
use pricing_lab_core::graph::{build_graph, CooccurrenceWeights};
use pricing_lab_core::marl::{compute_gae, Architecture, TrainConfig, Trainer};
use pricing_lab_core::nn::{GatLayer, GatMode, Matrix, Params, Tape};
use pricing_lab_core::rng::StreamKey;
use pricing_lab_core::synthetic;
use rand::Rng;

fn bench_env_step(c: &mut Criterion) {
    let env = synthetic::env(0.1, 0.05, 10);
    let key = StreamKey::derive("bench-env", &[0]);
    c.bench_function("env_episode_10_steps", |b| {
        b.iter(|| {
            let (mut state, _) = env.reset(env.config.window_start, key).unwrap();
            let mut total = 0.0;
            while !state.done {
                total += env.step(&mut state, &[0, 2, 4]).unwrap().reward;
            }
            total
        })
    });
}

fn bench_gat_forward(c: &mut Criterion) {
    let n = 60;
    let d_in = 64;
    let mut rng = StreamKey::derive("bench-gat", &[0]).rng();
    let mut params = Params::new();
    let layer = GatLayer::new(&mut params, "gat", 4, d_in, 16, 0.0, 0.0, &mut rng);
    let mut weights = CooccurrenceWeights { n, pairs: Default::default() };
    for i in 0..n {
        for j in (i + 1)..n {
            weights.pairs.insert((i, j), ((i * n + j) % 97 + 1) as u32);
        }
    }
    let graph = build_graph(&weights, 1, 12);
    let h = Matrix::from_shape_fn((n, d_in), |_| rng.gen_range(-1.0..1.0));
    c.bench_function("gat_forward_60_nodes_4_heads", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let pvars = params.inject(&mut tape);
            let emb = tape.leaf(h.clone());
            let out = layer.forward(&mut tape, &pvars, emb, &graph, &mut GatMode::Eval);
            tape.value(out.z).sum()
        })
    });
}

fn bench_gae(c: &mut Criterion) {
    let mut rng = StreamKey::derive("bench-gae", &[0]).rng();
    let len = 1024;
    let rewards: Vec<f64> = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let values: Vec<f64> = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let dones: Vec<bool> = (0..len).map(|_| rng.gen::<f64>() < 0.05).collect();
    c.bench_function("gae_1024_steps", |b| {
        b.iter(|| compute_gae(&rewards, &values, &dones, Some(0.3), 0.99, 0.95).unwrap())
    });
}

fn bench_ppo_update(c: &mut Criterion) {
    let env = synthetic::env(0.0, 0.05, 10);
    let config = TrainConfig {
        total_steps: 256,
        num_envs: 2,
        rollout_steps: 64,
        epochs: 1,
        minibatch_size: 128,
        hidden: 32,
        heads: 2,
        seed: 3,
        ..TrainConfig::default()
    };
    c.bench_function("ppo_update_384_agent_steps", |b| {
        b.iter(|| {
            let mut trainer = Trainer::new(&env, Architecture::MappoGat, config.clone()).unwrap();
            let (mut buffer, _) = trainer.collect().unwrap();
            trainer.update(&mut buffer).unwrap().policy_loss
        })
    });
}

fn bench_graph_build(c: &mut Criterion) {
    let n = 60;
    let mut weights = CooccurrenceWeights { n, pairs: Default::default() };
    for i in 0..n {
        for j in (i + 1)..n {
            weights.pairs.insert((i, j), ((i * 7 + j * 13) % 50 + 1) as u32);
        }
    }
    c.bench_function("build_graph_60_nodes_k12", |b| b.iter(|| build_graph(&weights, 2, 12)));
}

criterion_group!(
    benches,
    bench_env_step,
    bench_gat_forward,
    bench_gae,
    bench_ppo_update,
    bench_graph_build
);
criterion_main!(benches);
