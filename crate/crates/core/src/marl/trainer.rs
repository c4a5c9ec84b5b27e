//! The training loop: parallel-episode rollout collection, PPO updates,
//! periodic greedy validation with best-checkpoint retention, and a
//! divergence guard that falls back to the last good parameters.

use chrono::NaiveDate;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::nets::{Architecture, PolicyNet};
use super::ppo::{ppo_update, MarlError, RolloutBuffer, StepSample, TrainConfig, UpdateStats};
use crate::env::{EnvState, Observation, PricingEnv};
use crate::nn::{Matrix, Sgd};
use crate::rng::StreamKey;

/// One finished training episode, sufficient to replay it exactly.
#[derive(Debug, Clone)]
pub struct EpisodeRecord {
    pub env_index: usize,
    pub key: StreamKey,
    pub start: NaiveDate,
    pub actions: Vec<Vec<usize>>,
    /// raw (unscaled) team rewards
    pub rewards: Vec<f64>,
}

struct EnvSlot {
    state: EnvState,
    obs: Matrix,
    episode: EpisodeRecord,
}

/// One row of the training curve.
#[derive(Debug, Clone, Serialize)]
pub struct CurvePoint {
    pub update: usize,
    pub env_steps: usize,
    /// mean raw per-step team reward over the rollout
    pub mean_reward: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
    pub approx_kl: f64,
    pub validation_profit: Option<f64>,
}

pub struct TrainOutput {
    /// parameters of the best validation checkpoint
    pub net: PolicyNet,
    pub curve: Vec<CurvePoint>,
    pub best_validation_profit: f64,
    /// update index where training aborted on non-finite values, if any
    pub diverged_at: Option<usize>,
    pub env_steps: usize,
}

pub struct Trainer<'a> {
    pub env: &'a PricingEnv,
    pub net: PolicyNet,
    pub config: TrainConfig,
    sgd: Sgd,
    root: StreamKey,
    action_rng: ChaCha8Rng,
    shuffle_rng: ChaCha8Rng,
    dropout_rng: ChaCha8Rng,
    slots: Vec<EnvSlot>,
    episode_counter: u64,
    reward_scale: Option<f64>,
    reward_shift: f64,
    /// episodes finished during collection, for replay checks
    pub completed_episodes: Vec<EpisodeRecord>,
    pub env_steps: usize,
}

fn obs_matrix(obs: &[Observation]) -> Matrix {
    let n = obs.len();
    let d = obs[0].0.len();
    Matrix::from_shape_fn((n, d), |(i, j)| obs[i].0[j])
}

impl<'a> Trainer<'a> {
    pub fn new(
        env: &'a PricingEnv,
        architecture: Architecture,
        config: TrainConfig,
    ) -> Result<Self, MarlError> {
        config.validate()?;
        let root = StreamKey::derive("train", &[config.seed]);
        let mut init_rng = root.child("init", 0).rng();
        let net = PolicyNet::new(
            architecture,
            crate::env::OBS_LEN,
            env.config.action_space(),
            config.hidden,
            config.heads,
            config.attn_dropout,
            config.edge_drop,
            &mut init_rng,
        );
        let sgd = Sgd::new(config.learning_rate, config.momentum, config.weight_decay);
        let mut trainer = Trainer {
            env,
            net,
            sgd,
            action_rng: root.child("actions", 0).rng(),
            shuffle_rng: root.child("shuffle", 0).rng(),
            dropout_rng: root.child("dropout", 0).rng(),
            root,
            slots: Vec::new(),
            episode_counter: 0,
            reward_scale: config.reward_scale,
            reward_shift: 0.0,
            completed_episodes: Vec::new(),
            env_steps: 0,
            config,
        };
        for e in 0..trainer.config.num_envs {
            let slot = trainer.fresh_slot(e)?;
            trainer.slots.push(slot);
        }
        Ok(trainer)
    }

    /// Draw a start day uniformly over the valid window, keyed by episode.
    fn draw_start(&self, key: StreamKey) -> NaiveDate {
        let span = (self.env.max_valid_start() - self.env.config.window_start).num_days();
        let offset = if span > 0 {
            key.child("start", 0).rng().gen_range(0..=span)
        } else {
            0
        };
        self.env.config.window_start + chrono::Duration::days(offset)
    }

    fn fresh_slot(&mut self, env_index: usize) -> Result<EnvSlot, MarlError> {
        let key = self.root.child("episode", self.episode_counter);
        self.episode_counter += 1;
        let start = self.draw_start(key);
        let (state, obs) = self.env.reset(start, key)?;
        Ok(EnvSlot {
            state,
            obs: obs_matrix(&obs),
            episode: EpisodeRecord {
                env_index,
                key,
                start,
                actions: Vec::new(),
                rewards: Vec::new(),
            },
        })
    }

    /// Fill one rollout buffer. Rewards are stored scaled; the returned
    /// mean is raw.
    pub fn collect(&mut self) -> Result<(RolloutBuffer, f64), MarlError> {
        let env = self.env;
        let mut buffer = RolloutBuffer::new(self.config.num_envs, self.config.rollout_steps);
        let mut raw_sum = 0.0;
        for _ in 0..self.config.rollout_steps {
            for e in 0..self.config.num_envs {
                let obs = self.slots[e].obs.clone();
                let (actions, log_probs, value) =
                    self.net.act_sample(obs.clone(), &env.graph, &mut self.action_rng);
                let slot = &mut self.slots[e];
                let out = env.step(&mut slot.state, &actions)?;
                slot.episode.actions.push(actions.clone());
                slot.episode.rewards.push(out.reward);
                raw_sum += out.reward;
                buffer.push(StepSample {
                    obs,
                    actions,
                    log_probs,
                    reward: out.reward,
                    value,
                    done: out.done,
                });
                if out.done {
                    let fresh = self.fresh_slot(e)?;
                    let finished = std::mem::replace(&mut self.slots[e], fresh);
                    self.completed_episodes.push(finished.episode);
                } else {
                    self.slots[e].obs = obs_matrix(&out.observations);
                }
                self.env_steps += 1;
            }
        }
        // env-major layout expected downstream; collection above is
        // time-major, so reorder
        let mut samples = Vec::with_capacity(buffer.samples.len());
        for e in 0..self.config.num_envs {
            for t in 0..self.config.rollout_steps {
                samples.push(buffer.samples[t * self.config.num_envs + e].clone());
            }
        }
        buffer.samples = samples;
        for e in 0..self.config.num_envs {
            buffer.bootstrap[e] =
                self.net.state_value(self.slots[e].obs.clone(), &self.env.graph);
        }
        let raw_mean = raw_sum / buffer.samples.len() as f64;

        // Rewards enter the learner centered and scaled to unit variance
        // (calibrated once on the first rollout); with a fixed horizon the
        // shift leaves the optimal policy unchanged but keeps value targets
        // small enough that the gradient clip does not swallow the policy
        // gradient.
        if self.reward_scale.is_none() {
            let rewards: Vec<f64> = buffer.samples.iter().map(|s| s.reward).collect();
            let mean = rewards.iter().sum::<f64>() / rewards.len() as f64;
            let var =
                rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / rewards.len() as f64;
            let std = var.sqrt();
            self.reward_shift = mean;
            self.reward_scale =
                Some(if std > 1e-8 { 1.0 / std } else { 1.0 / mean.abs().max(1.0) });
        }
        let scale = self.reward_scale.unwrap();
        for s in &mut buffer.samples {
            s.reward = (s.reward - self.reward_shift) * scale;
        }
        Ok((buffer, raw_mean))
    }

    /// Mean greedy episode profit (stability penalty excluded) over fixed
    /// validation episode keys, so successive checkpoints are compared
    /// under common random numbers.
    pub fn validate(&self) -> Result<f64, MarlError> {
        let mut total = 0.0;
        for e in 0..self.config.validation_episodes {
            let key = self.root.child("val", e as u64);
            let start = self.draw_start(key);
            let (mut state, obs) = self.env.reset(start, key)?;
            let mut obs = obs_matrix(&obs);
            while !state.done {
                let actions = self.net.act_greedy(obs, &self.env.graph);
                let out = self.env.step(&mut state, &actions)?;
                total += out.per_sku_profit.iter().sum::<f64>();
                obs = obs_matrix(&out.observations);
            }
        }
        Ok(total / self.config.validation_episodes as f64)
    }

    pub fn update(&mut self, buffer: &mut RolloutBuffer) -> Result<UpdateStats, MarlError> {
        buffer.finish(self.env.config.gamma, self.config.gae_lambda)?;
        ppo_update(
            &mut self.net,
            &mut self.sgd,
            buffer,
            &self.env.graph,
            &self.config,
            &mut self.shuffle_rng,
            &mut self.dropout_rng,
        )
    }

    /// Full run: collect/update until the step budget, validating on the
    /// configured cadence and keeping the best greedy checkpoint.
    pub fn run(mut self) -> Result<TrainOutput, MarlError> {
        let updates = self.config.updates();
        let mut curve = Vec::with_capacity(updates);
        let mut best_profit = f64::NEG_INFINITY;
        let mut best_net: Option<PolicyNet> = None;
        let mut diverged_at = None;

        for u in 0..updates {
            let (mut buffer, mean_reward) = self.collect()?;
            let stats = match self.update(&mut buffer) {
                Ok(s) => s,
                Err(MarlError::NonFiniteLoss { .. }) => {
                    diverged_at = Some(u);
                    break;
                }
                Err(other) => return Err(other),
            };
            if !self.net.params.all_finite() {
                diverged_at = Some(u);
                break;
            }
            let run_validation = (u + 1) % self.config.validation_every == 0 || u + 1 == updates;
            let validation_profit = if run_validation {
                let vp = self.validate()?;
                if vp > best_profit {
                    best_profit = vp;
                    best_net = Some(self.net.clone());
                }
                Some(vp)
            } else {
                None
            };
            curve.push(CurvePoint {
                update: u,
                env_steps: self.env_steps,
                mean_reward,
                policy_loss: stats.policy_loss,
                value_loss: stats.value_loss,
                entropy: stats.entropy,
                clip_fraction: stats.clip_fraction,
                approx_kl: stats.approx_kl,
                validation_profit,
            });
        }

        // if training never reached a validation point (or diverged before
        // the first one), validate whatever parameters we have, provided
        // they are finite
        if best_net.is_none() && self.net.params.all_finite() {
            best_profit = self.validate()?;
            best_net = Some(self.net.clone());
        }
        let net = best_net.ok_or(MarlError::Diverged { update: diverged_at.unwrap_or(0) })?;
        Ok(TrainOutput {
            net,
            curve,
            best_validation_profit: best_profit,
            diverged_at,
            env_steps: self.env_steps,
        })
    }
}

/// Training-curve dump, one row per update.
pub fn write_training_curve_csv<W: std::io::Write>(
    curve: &[CurvePoint],
    mut w: W,
) -> std::io::Result<()> {
    writeln!(
        w,
        "update,env_steps,mean_reward,policy_loss,value_loss,entropy,clip_fraction,approx_kl,validation_profit"
    )?;
    for p in curve {
        let vp = p.validation_profit.map(|v| format!("{v:.6}")).unwrap_or_default();
        writeln!(
            w,
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{vp}",
            p.update,
            p.env_steps,
            p.mean_reward,
            p.policy_loss,
            p.value_loss,
            p.entropy,
            p.clip_fraction,
            p.approx_kl
        )?;
    }
    Ok(())
}
