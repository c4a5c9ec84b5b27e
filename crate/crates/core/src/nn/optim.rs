//! Parameter storage, SGD with momentum and selective L2 weight decay,
//! and versioned JSON checkpoints with bit-exact reload.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tape::{Matrix, NnError, Tape, Var};

/// One named trainable matrix. `decay` marks GAT projection matrices,
/// the only group subject to L2 weight decay.
#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub value: Matrix,
    pub decay: bool,
}

/// Flat, ordered collection of trainable parameters.
#[derive(Debug, Clone, Default)]
pub struct Params {
    pub entries: Vec<ParamEntry>,
}

impl Params {
    pub fn new() -> Self {
        Params::default()
    }

    /// Register a parameter initialized uniformly, scaled by fan-in.
    pub fn init<R: Rng>(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        fan_in: usize,
        decay: bool,
        rng: &mut R,
    ) -> usize {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let value = Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-bound..bound));
        self.entries.push(ParamEntry { name: name.to_string(), value, decay });
        self.entries.len() - 1
    }

    pub fn zeros(&mut self, name: &str, rows: usize, cols: usize, decay: bool) -> usize {
        self.entries.push(ParamEntry {
            name: name.to_string(),
            value: Matrix::zeros((rows, cols)),
            decay,
        });
        self.entries.len() - 1
    }

    /// Push every parameter onto a fresh tape; returns leaf vars aligned
    /// with `entries`.
    pub fn inject(&self, tape: &mut Tape) -> Vec<Var> {
        self.entries.iter().map(|e| tape.leaf(e.value.clone())).collect()
    }

    pub fn total_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|e| e.value.iter().all(|x| x.is_finite()))
    }
}

/// Plain SGD with optional momentum. Weight decay applies only to
/// entries flagged `decay` (GAT projections).
#[derive(Debug, Clone)]
pub struct Sgd {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Matrix>,
}

impl Sgd {
    pub fn new(learning_rate: f64, momentum: f64, weight_decay: f64) -> Self {
        Sgd { learning_rate, momentum, weight_decay, velocity: Vec::new() }
    }

    /// Apply one step. `grads` is the tape gradient table; `vars` are the
    /// leaf vars from [`Params::inject`] in entry order.
    pub fn step(&mut self, params: &mut Params, grads: &[Option<Matrix>], vars: &[Var]) {
        if self.velocity.is_empty() {
            self.velocity = params.entries.iter().map(|e| Matrix::zeros(e.value.dim())).collect();
        }
        for (i, entry) in params.entries.iter_mut().enumerate() {
            let Some(g) = grads[vars[i].0].as_ref() else { continue };
            assert_eq!(g.dim(), entry.value.dim(), "sgd_step: gradient shape mismatch");
            let mut update = g.clone();
            if entry.decay && self.weight_decay > 0.0 {
                update += &(&entry.value * self.weight_decay);
            }
            if self.momentum > 0.0 {
                self.velocity[i] = &self.velocity[i] * self.momentum + &update;
                update = self.velocity[i].clone();
            }
            entry.value.scaled_add(-self.learning_rate, &update);
        }
    }
}

/// Versioned checkpoint with named parameter groups. JSON with full f64
/// round-trip, so reload is bit-exact.
#[derive(Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub architecture: String,
    pub params: Vec<CheckpointEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CheckpointEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub decay: bool,
    pub data: Vec<u64>, // f64 bit patterns, row-major
}

pub const CHECKPOINT_VERSION: u32 = 1;

impl Checkpoint {
    pub fn from_params(params: &Params, architecture: &str) -> Self {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            architecture: architecture.to_string(),
            params: params
                .entries
                .iter()
                .map(|e| CheckpointEntry {
                    name: e.name.clone(),
                    rows: e.value.nrows(),
                    cols: e.value.ncols(),
                    decay: e.decay,
                    data: e.value.iter().map(|x| x.to_bits()).collect(),
                })
                .collect(),
        }
    }

    pub fn into_params(self) -> Result<Params, NnError> {
        if self.version != CHECKPOINT_VERSION {
            return Err(NnError::Checkpoint(format!(
                "version {} != supported {CHECKPOINT_VERSION}",
                self.version
            )));
        }
        let mut params = Params::new();
        for e in self.params {
            if e.data.len() != e.rows * e.cols {
                return Err(NnError::Checkpoint(format!("shape mismatch for '{}'", e.name)));
            }
            let value = Array2::from_shape_vec(
                (e.rows, e.cols),
                e.data.into_iter().map(f64::from_bits).collect(),
            )
            .map_err(|err| NnError::Checkpoint(err.to_string()))?;
            params.entries.push(ParamEntry { name: e.name, value, decay: e.decay });
        }
        Ok(params)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, NnError> {
        serde_json::from_str(s).map_err(|e| NnError::Checkpoint(e.to_string()))
    }
}
