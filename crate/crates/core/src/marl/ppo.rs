//! Rollout storage and the clipped PPO update.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::gae::{compute_gae, GaeError};
use super::nets::{PolicyNet, DEFAULT_HEADS, DEFAULT_HIDDEN};
use crate::env::EnvError;
use crate::graph::ItemGraph;
use crate::nn::{GatMode, Matrix, NnError, Sgd, Tape};

#[derive(Debug, Error)]
pub enum MarlError {
    #[error("invalid training config: {0}")]
    BadConfig(String),
    #[error("non-finite loss in epoch {epoch}, minibatch {minibatch}; update aborted")]
    NonFiniteLoss { epoch: usize, minibatch: usize },
    #[error("parameters diverged (non-finite) at update {update}")]
    Diverged { update: usize },
    #[error(transparent)]
    Gae(#[from] GaeError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// One environment step of experience: joint observation matrix, joint
/// action, behavior log-probs, shared team reward, central value.
#[derive(Debug, Clone)]
pub struct StepSample {
    pub obs: Matrix,
    pub actions: Vec<usize>,
    pub log_probs: Vec<f64>,
    pub reward: f64,
    pub value: f64,
    pub done: bool,
}

/// Fixed-size on-policy buffer, env-major layout (`env * steps + t`).
#[derive(Debug, Clone)]
pub struct RolloutBuffer {
    pub num_envs: usize,
    pub steps_per_env: usize,
    pub samples: Vec<StepSample>,
    /// V of the state following each env's last stored step
    pub bootstrap: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl RolloutBuffer {
    pub fn new(num_envs: usize, steps_per_env: usize) -> Self {
        RolloutBuffer {
            num_envs,
            steps_per_env,
            samples: Vec::with_capacity(num_envs * steps_per_env),
            bootstrap: vec![0.0; num_envs],
            advantages: Vec::new(),
            returns: Vec::new(),
        }
    }

    pub fn push(&mut self, sample: StepSample) {
        assert!(self.samples.len() < self.num_envs * self.steps_per_env, "buffer overfull");
        self.samples.push(sample);
    }

    pub fn is_full(&self) -> bool {
        self.samples.len() == self.num_envs * self.steps_per_env
    }

    pub fn mean_reward(&self) -> f64 {
        let n = self.samples.len().max(1) as f64;
        self.samples.iter().map(|s| s.reward).sum::<f64>() / n
    }

    /// Compute GAE advantages and returns for every env slice.
    pub fn finish(&mut self, gamma: f64, lambda: f64) -> Result<(), GaeError> {
        assert!(self.is_full(), "finish called on a partial buffer");
        self.advantages.clear();
        self.returns.clear();
        for e in 0..self.num_envs {
            let slice = &self.samples[e * self.steps_per_env..(e + 1) * self.steps_per_env];
            let rewards: Vec<f64> = slice.iter().map(|s| s.reward).collect();
            let values: Vec<f64> = slice.iter().map(|s| s.value).collect();
            let dones: Vec<bool> = slice.iter().map(|s| s.done).collect();
            let (adv, ret) =
                compute_gae(&rewards, &values, &dones, Some(self.bootstrap[e]), gamma, lambda)?;
            self.advantages.extend(adv);
            self.returns.extend(ret);
        }
        Ok(())
    }
}

/// PPO hyperparameters and run shape. `reward_scale: None` calibrates
/// automatically to unit reward standard deviation on the first rollout.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub total_steps: usize,
    pub num_envs: usize,
    pub rollout_steps: usize,
    pub epochs: usize,
    /// minibatch size in agent-steps
    pub minibatch_size: usize,
    pub clip: f64,
    pub gae_lambda: f64,
    pub value_coef: f64,
    pub entropy_coef: f64,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub max_grad_norm: Option<f64>,
    pub hidden: usize,
    pub heads: usize,
    pub attn_dropout: f64,
    pub edge_drop: f64,
    pub reward_scale: Option<f64>,
    pub seed: u64,
    /// run greedy validation every this many updates
    pub validation_every: usize,
    pub validation_episodes: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            total_steps: 60_000,
            num_envs: 8,
            rollout_steps: 128,
            epochs: 4,
            minibatch_size: 256,
            clip: 0.2,
            gae_lambda: 0.95,
            value_coef: 0.5,
            entropy_coef: 0.02,
            learning_rate: 0.05,
            momentum: 0.9,
            weight_decay: 1e-4,
            max_grad_norm: Some(0.5),
            hidden: DEFAULT_HIDDEN,
            heads: DEFAULT_HEADS,
            attn_dropout: 0.1,
            edge_drop: 0.1,
            reward_scale: None,
            seed: 0,
            validation_every: 5,
            validation_episodes: 8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), MarlError> {
        if !(0.05..=0.5).contains(&self.clip) {
            return Err(MarlError::BadConfig(format!("clip {} outside [0.05, 0.5]", self.clip)));
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return Err(MarlError::BadConfig("gae_lambda must lie in [0, 1]".into()));
        }
        if self.num_envs == 0 || self.rollout_steps == 0 || self.epochs == 0 {
            return Err(MarlError::BadConfig("num_envs, rollout_steps, epochs must be >= 1".into()));
        }
        if self.minibatch_size == 0 {
            return Err(MarlError::BadConfig("minibatch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(MarlError::BadConfig("learning_rate must be > 0".into()));
        }
        if !(0.0..=0.9).contains(&self.attn_dropout) || !(0.0..=0.9).contains(&self.edge_drop) {
            return Err(MarlError::BadConfig("dropout rates must lie in [0, 0.9]".into()));
        }
        Ok(())
    }

    pub fn updates(&self) -> usize {
        (self.total_steps / (self.num_envs * self.rollout_steps)).max(1)
    }
}

/// Aggregated diagnostics of one PPO update.
#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct UpdateStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
    pub approx_kl: f64,
}

/// One full PPO update over the buffer: `epochs` passes of shuffled
/// minibatches with advantages standardized inside each minibatch.
pub fn ppo_update(
    net: &mut PolicyNet,
    sgd: &mut Sgd,
    buffer: &RolloutBuffer,
    graph: &ItemGraph,
    config: &TrainConfig,
    shuffle_rng: &mut ChaCha8Rng,
    dropout_rng: &mut ChaCha8Rng,
) -> Result<UpdateStats, MarlError> {
    let num_agents = buffer.samples[0].actions.len();
    let steps_per_batch = (config.minibatch_size / num_agents).max(1);
    let mut stats = UpdateStats::default();
    let mut batches_seen = 0usize;

    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..buffer.samples.len()).collect();
        order.shuffle(shuffle_rng);
        for (mb, chunk) in order.chunks(steps_per_batch).enumerate() {
            let s = minibatch_step(net, sgd, buffer, graph, config, chunk, dropout_rng)
                .map_err(|e| match e {
                    MarlError::Nn(NnError::NonFinite(_)) => {
                        MarlError::NonFiniteLoss { epoch, minibatch: mb }
                    }
                    other => other,
                })?;
            stats.policy_loss += s.policy_loss;
            stats.value_loss += s.value_loss;
            stats.entropy += s.entropy;
            stats.clip_fraction += s.clip_fraction;
            stats.approx_kl += s.approx_kl;
            batches_seen += 1;
        }
    }
    let k = batches_seen.max(1) as f64;
    stats.policy_loss /= k;
    stats.value_loss /= k;
    stats.entropy /= k;
    stats.clip_fraction /= k;
    stats.approx_kl /= k;
    Ok(stats)
}

fn minibatch_step(
    net: &mut PolicyNet,
    sgd: &mut Sgd,
    buffer: &RolloutBuffer,
    graph: &ItemGraph,
    config: &TrainConfig,
    chunk: &[usize],
    dropout_rng: &mut ChaCha8Rng,
) -> Result<UpdateStats, MarlError> {
    let num_agents = buffer.samples[0].actions.len();
    let agent_steps = (chunk.len() * num_agents) as f64;

    // standardize advantages within the minibatch
    let adv_raw: Vec<f64> = chunk.iter().map(|&i| buffer.advantages[i]).collect();
    let mean = adv_raw.iter().sum::<f64>() / adv_raw.len() as f64;
    let var = adv_raw.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / adv_raw.len() as f64;
    let std = var.sqrt().max(1e-8);
    let adv: Vec<f64> = adv_raw.iter().map(|a| (a - mean) / std).collect();

    let mut tape = Tape::new();
    let pvars = net.params.inject(&mut tape);
    let mut policy_sum = None; // Σ min(r·A, clip(r)·A)
    let mut entropy_sum = None;
    let mut value_sum = None; // Σ (V − R)²
    let mut clip_hits = 0usize;
    let mut kl_sum = 0.0;
    let stochastic = config.attn_dropout > 0.0 || config.edge_drop > 0.0;

    for (pos, &idx) in chunk.iter().enumerate() {
        let sample = &buffer.samples[idx];
        let mut mode =
            if stochastic { GatMode::Train(&mut *dropout_rng) } else { GatMode::Eval };
        let out = net.forward(&mut tape, &pvars, sample.obs.clone(), graph, &mut mode);
        let (chosen, entropy) =
            crate::nn::CategoricalHead::evaluate(&mut tape, out.log_probs, &sample.actions);
        let old = tape.leaf(Matrix::from_shape_vec(
            (num_agents, 1),
            sample.log_probs.clone(),
        )
        .expect("log-prob column"));
        let log_ratio = tape.sub(chosen, old);
        let ratio = tape.exp(log_ratio);

        for i in 0..num_agents {
            let r = tape.value(ratio)[(i, 0)];
            if (r - 1.0).abs() > config.clip {
                clip_hits += 1;
            }
            kl_sum += sample.log_probs[i] - tape.value(chosen)[(i, 0)];
        }

        let a = adv[pos];
        let surr1 = tape.scalar_affine(ratio, a, 0.0);
        let clipped = tape.clamp(ratio, 1.0 - config.clip, 1.0 + config.clip);
        let surr2 = tape.scalar_affine(clipped, a, 0.0);
        let objective = tape.minimum(surr1, surr2);
        let obj_sum = tape.sum_all(objective);
        policy_sum = Some(match policy_sum {
            Some(acc) => tape.add(acc, obj_sum),
            None => obj_sum,
        });

        let ent = tape.sum_all(entropy);
        entropy_sum = Some(match entropy_sum {
            Some(acc) => tape.add(acc, ent),
            None => ent,
        });

        let v = net.value(&mut tape, &pvars, out.features);
        let target = tape.leaf(Matrix::from_elem((1, 1), buffer.returns[idx]));
        let diff = tape.sub(v, target);
        let sq = tape.mul(diff, diff);
        value_sum = Some(match value_sum {
            Some(acc) => tape.add(acc, sq),
            None => sq,
        });
    }

    let policy_sum = policy_sum.expect("non-empty minibatch");
    let entropy_sum = entropy_sum.expect("non-empty minibatch");
    let value_sum = value_sum.expect("non-empty minibatch");
    // loss = −E[obj] + c_v·E[(V−R)²] − c_e·E[H]
    let policy_term = tape.scalar_affine(policy_sum, -1.0 / agent_steps, 0.0);
    let value_term =
        tape.scalar_affine(value_sum, config.value_coef / chunk.len() as f64, 0.0);
    let entropy_term =
        tape.scalar_affine(entropy_sum, -config.entropy_coef / agent_steps, 0.0);
    let partial = tape.add(policy_term, value_term);
    let loss = tape.add(partial, entropy_term);

    let mut grads = tape.backward(loss)?;
    if let Some(max_norm) = config.max_grad_norm {
        clip_global_norm(&mut grads, max_norm);
    }
    sgd.step(&mut net.params, &grads, &pvars);

    Ok(UpdateStats {
        policy_loss: tape.scalar(policy_term),
        value_loss: tape.scalar(value_term) / config.value_coef.max(1e-12),
        entropy: tape.scalar(entropy_sum) / agent_steps,
        clip_fraction: clip_hits as f64 / agent_steps,
        approx_kl: kl_sum / agent_steps,
    })
}

fn clip_global_norm(grads: &mut [Option<Matrix>], max_norm: f64) {
    let total: f64 = grads
        .iter()
        .flatten()
        .map(|g| g.iter().map(|x| x * x).sum::<f64>())
        .sum();
    let norm = total.sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            g.mapv_inplace(|x| x * scale);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    /// Scalar clipped-objective oracle.
    fn clipped_objective(ratio: f64, clip: f64, advantage: f64) -> f64 {
        let surr1 = ratio * advantage;
        let surr2 = ratio.clamp(1.0 - clip, 1.0 + clip) * advantage;
        surr1.min(surr2)
    }

    #[test]
    fn clip_fixtures_match_hand_values() {
        assert_relative_eq!(clipped_objective(1.5, 0.2, 1.0), 1.2, epsilon = 1e-12);
        assert_relative_eq!(clipped_objective(0.5, 0.2, -1.0), -0.8, epsilon = 1e-12);
        // inside the clip band the objective is just r·A
        assert_relative_eq!(clipped_objective(1.1, 0.2, 2.0), 2.2, epsilon = 1e-12);
        assert_relative_eq!(clipped_objective(0.9, 0.2, -2.0), -1.8, epsilon = 1e-12);
    }

    #[test]
    fn tape_objective_matches_scalar_oracle() {
        // the same expression as minibatch_step builds, checked against
        // the scalar oracle on a grid of (ratio, advantage)
        for &(r, a) in &[(1.5, 1.0), (0.5, -1.0), (1.05, 0.7), (0.7, 0.3), (1.4, -0.2)] {
            let mut tape = Tape::new();
            let ratio = tape.leaf(Matrix::from_elem((1, 1), r));
            let surr1 = tape.scalar_affine(ratio, a, 0.0);
            let clipped = tape.clamp(ratio, 0.8, 1.2);
            let surr2 = tape.scalar_affine(clipped, a, 0.0);
            let obj = tape.minimum(surr1, surr2);
            assert_relative_eq!(tape.scalar(obj), clipped_objective(r, 0.2, a), epsilon = 1e-12);
        }
    }

    #[test]
    fn buffer_gae_concatenates_env_slices() {
        let mut buf = RolloutBuffer::new(2, 2);
        let mk = |reward: f64, value: f64, done: bool| StepSample {
            obs: Matrix::zeros((1, 1)),
            actions: vec![0],
            log_probs: vec![0.0],
            reward,
            value,
            done,
        };
        buf.push(mk(1.0, 0.5, false));
        buf.push(mk(2.0, 0.2, true));
        buf.push(mk(-1.0, 0.0, false));
        buf.push(mk(0.5, 0.1, false));
        buf.bootstrap = vec![9.0, 0.3];
        buf.finish(0.9, 0.95).unwrap();
        let (a0, _) =
            compute_gae(&[1.0, 2.0], &[0.5, 0.2], &[false, true], Some(9.0), 0.9, 0.95).unwrap();
        let (a1, _) =
            compute_gae(&[-1.0, 0.5], &[0.0, 0.1], &[false, false], Some(0.3), 0.9, 0.95).unwrap();
        assert_eq!(&buf.advantages[..2], &a0[..]);
        assert_eq!(&buf.advantages[2..], &a1[..]);
        assert_eq!(buf.returns.len(), 4);
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        let mut c = TrainConfig::default();
        c.clip = 0.6;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.gae_lambda = 1.5;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.num_envs = 0;
        assert!(c.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }

    #[test]
    fn grad_clip_preserves_direction_and_caps_norm() {
        let mut grads = vec![
            Some(Matrix::from_elem((2, 2), 3.0)),
            None,
            Some(Matrix::from_elem((1, 1), 4.0)),
        ];
        // ‖g‖ = sqrt(4·9 + 16) = sqrt(52)
        clip_global_norm(&mut grads, 1.0);
        let total: f64 = grads
            .iter()
            .flatten()
            .map(|g| g.iter().map(|x| x * x).sum::<f64>())
            .sum();
        assert_relative_eq!(total.sqrt(), 1.0, epsilon = 1e-12);
        let a = grads[0].as_ref().unwrap()[(0, 0)];
        let b = grads[2].as_ref().unwrap()[(0, 0)];
        assert_relative_eq!(b / a, 4.0 / 3.0, epsilon = 1e-12);
    }
}
