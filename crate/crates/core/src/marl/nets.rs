//! Actor-critic networks for both architectures.
//!
//! Both variants map per-agent observations to a width-`2·hidden`
//! per-agent feature row: the graph-attentive variant concatenates the
//! encoder output with a multi-head GAT pass over the item graph, the
//! plain variant substitutes a dense mixer layer of the same width so
//! total parameter counts stay within 20% of each other. Actors read
//! only per-agent rows; the centralized critic mean-pools the rows, so
//! its value is invariant to agent ordering.

use std::fmt;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;

use crate::graph::ItemGraph;
use crate::nn::{
    CategoricalHead, Checkpoint, GatLayer, GatMode, Matrix, Mlp, NnError, Params, Tape, Var,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Architecture {
    Mappo,
    MappoGat,
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Architecture::Mappo => write!(f, "mappo"),
            Architecture::MappoGat => write!(f, "mappo-gat"),
        }
    }
}

impl FromStr for Architecture {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mappo" => Ok(Architecture::Mappo),
            "mappo-gat" => Ok(Architecture::MappoGat),
            other => Err(format!("unknown architecture '{other}' (expected mappo or mappo-gat)")),
        }
    }
}

pub const DEFAULT_HIDDEN: usize = 64;
pub const DEFAULT_HEADS: usize = 4;

/// Shared-parameter actor plus centralized pooled critic.
#[derive(Debug, Clone)]
pub struct PolicyNet {
    pub architecture: Architecture,
    pub obs_dim: usize,
    pub num_actions: usize,
    pub hidden: usize,
    pub params: Params,
    encoder: Mlp,
    mixer: Option<Mlp>,
    gat: Option<GatLayer>,
    actor_head: Mlp,
    critic_proj: Mlp,
    critic_head: Mlp,
}

pub struct ForwardOutput {
    /// per-agent feature rows (n × 2·hidden)
    pub features: Var,
    pub logits: Var,
    /// row-wise log-softmax of the logits
    pub log_probs: Var,
}

impl PolicyNet {
    pub fn new(
        architecture: Architecture,
        obs_dim: usize,
        num_actions: usize,
        hidden: usize,
        heads: usize,
        attn_dropout: f64,
        edge_drop: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        assert!(hidden % heads == 0, "hidden must divide evenly across heads");
        let mut params = Params::new();
        let encoder = Mlp::new(&mut params, "enc", &[obs_dim, hidden], true, rng);
        let (mixer, gat) = match architecture {
            Architecture::Mappo => {
                (Some(Mlp::new(&mut params, "mix", &[hidden, 2 * hidden], true, rng)), None)
            }
            Architecture::MappoGat => (
                None,
                Some(GatLayer::new(
                    &mut params,
                    "gat",
                    heads,
                    hidden,
                    hidden / heads,
                    attn_dropout,
                    edge_drop,
                    rng,
                )),
            ),
        };
        let actor_head =
            Mlp::new(&mut params, "actor", &[2 * hidden, hidden, num_actions], false, rng);
        let critic_proj = Mlp::new(&mut params, "vproj", &[2 * hidden, hidden], true, rng);
        let critic_head = Mlp::new(&mut params, "vhead", &[hidden, hidden, 1], false, rng);
        PolicyNet {
            architecture,
            obs_dim,
            num_actions,
            hidden,
            params,
            encoder,
            mixer,
            gat,
            actor_head,
            critic_proj,
            critic_head,
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.params.total_scalars()
    }

    /// obs: (n × obs_dim) → logits (n × |M|) and the feature rows the
    /// critic consumes.
    pub fn forward(
        &self,
        tape: &mut Tape,
        pvars: &[Var],
        obs: Matrix,
        graph: &ItemGraph,
        mode: &mut GatMode,
    ) -> ForwardOutput {
        let x = tape.leaf(obs);
        let h = self.encoder.forward(tape, pvars, x);
        let features = match self.architecture {
            Architecture::Mappo => self.mixer.as_ref().unwrap().forward(tape, pvars, h),
            Architecture::MappoGat => {
                let out = self.gat.as_ref().unwrap().forward(tape, pvars, h, graph, mode);
                tape.concat_cols(h, out.z)
            }
        };
        let logits = self.actor_head.forward(tape, pvars, features);
        let log_probs = CategoricalHead::log_probs(tape, logits);
        ForwardOutput { features, logits, log_probs }
    }

    /// Centralized value: mean-pool the per-agent projections, then a
    /// dense head. Returns a 1×1 var.
    pub fn value(&self, tape: &mut Tape, pvars: &[Var], features: Var) -> Var {
        let proj = self.critic_proj.forward(tape, pvars, features);
        let pooled = tape.mean_rows(proj);
        self.critic_head.forward(tape, pvars, pooled)
    }

    /// Non-differentiable sampling pass for rollout collection.
    pub fn act_sample(
        &self,
        obs: Matrix,
        graph: &ItemGraph,
        action_rng: &mut ChaCha8Rng,
    ) -> (Vec<usize>, Vec<f64>, f64) {
        let mut tape = Tape::new();
        let pvars = self.params.inject(&mut tape);
        let out = self.forward(&mut tape, &pvars, obs, graph, &mut GatMode::Eval);
        let actions = CategoricalHead::sample_actions(&tape, out.log_probs, action_rng);
        let lp = tape.value(out.log_probs);
        let log_probs: Vec<f64> = actions.iter().enumerate().map(|(i, &a)| lp[(i, a)]).collect();
        let value = self.value(&mut tape, &pvars, out.features);
        let v = tape.scalar(value);
        (actions, log_probs, v)
    }

    /// Deterministic argmax pass for evaluation and validation.
    pub fn act_greedy(&self, obs: Matrix, graph: &ItemGraph) -> Vec<usize> {
        let mut tape = Tape::new();
        let pvars = self.params.inject(&mut tape);
        let out = self.forward(&mut tape, &pvars, obs, graph, &mut GatMode::Eval);
        CategoricalHead::greedy_actions(&tape, out.log_probs)
    }

    /// Value of a state without gradients (GAE bootstrap).
    pub fn state_value(&self, obs: Matrix, graph: &ItemGraph) -> f64 {
        let mut tape = Tape::new();
        let pvars = self.params.inject(&mut tape);
        let out = self.forward(&mut tape, &pvars, obs, graph, &mut GatMode::Eval);
        let value = self.value(&mut tape, &pvars, out.features);
        tape.scalar(value)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_params(&self.params, &self.architecture.to_string())
    }

    /// Rebuild a net from a checkpoint; dimensions are recovered from the
    /// stored parameter shapes.
    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self, NnError> {
        let architecture = Architecture::from_str(&ck.architecture)
            .map_err(NnError::Checkpoint)?;
        let shape = |name: &str| -> Result<(usize, usize), NnError> {
            ck.params
                .iter()
                .find(|e| e.name == name)
                .map(|e| (e.rows, e.cols))
                .ok_or_else(|| NnError::Checkpoint(format!("missing parameter {name}")))
        };
        let (obs_dim, hidden) = shape("enc.w0")?;
        let (_, num_actions) = shape("actor.w1")?;
        let heads = match architecture {
            Architecture::Mappo => DEFAULT_HEADS.min(hidden),
            Architecture::MappoGat => {
                ck.params.iter().filter(|e| e.name.starts_with("gat.proj")).count()
            }
        };
        let mut rng = crate::rng::StreamKey::derive("checkpoint-load", &[0]).rng();
        let mut net =
            PolicyNet::new(architecture, obs_dim, num_actions, hidden, heads, 0.0, 0.0, &mut rng);
        let loaded = ck.into_params()?;
        if loaded.entries.len() != net.params.entries.len() {
            return Err(NnError::Checkpoint(format!(
                "parameter count mismatch: checkpoint has {}, architecture expects {}",
                loaded.entries.len(),
                net.params.entries.len()
            )));
        }
        for (have, want) in loaded.entries.iter().zip(&net.params.entries) {
            if have.name != want.name || have.value.dim() != want.value.dim() {
                return Err(NnError::Checkpoint(format!(
                    "parameter mismatch: checkpoint {} {:?} vs expected {} {:?}",
                    have.name,
                    have.value.dim(),
                    want.name,
                    want.value.dim()
                )));
            }
        }
        net.params = loaded;
        Ok(net)
    }
}
