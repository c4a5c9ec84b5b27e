//! Minimal differentiable-computation core sized for tiny networks:
//! a reverse-mode tape over dense matrices, MLP and multi-head graph
//! attention layers, categorical action heads, and SGD with selective
//! weight decay. No GPU, no mixed precision, no general-purpose autodiff
//! beyond the ops this artifact needs.

mod layers;
mod optim;
mod tape;

pub use layers::{CategoricalHead, GatLayer, GatMode, Mlp};
pub use optim::{Checkpoint, ParamEntry, Params, Sgd};
pub use tape::{Matrix, NnError, Tape, Var};
