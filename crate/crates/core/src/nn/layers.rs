//! Network building blocks: dense MLP stacks, a multi-head graph
//! attention layer over the sparse item graph, and a categorical action
//! head with sampling, log-probability, and entropy.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::optim::Params;
use super::tape::{Matrix, Tape, Var};
use crate::graph::ItemGraph;

/// Dense affine stack with tanh between layers.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub sizes: Vec<usize>,
    weights: Vec<usize>,
    biases: Vec<usize>,
    /// apply tanh after the final layer too (encoders yes, heads no)
    activate_last: bool,
}

impl Mlp {
    pub fn new<R: Rng>(
        params: &mut Params,
        prefix: &str,
        sizes: &[usize],
        activate_last: bool,
        rng: &mut R,
    ) -> Self {
        assert!(sizes.len() >= 2, "mlp needs at least input and output sizes");
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for l in 0..sizes.len() - 1 {
            weights.push(params.init(
                &format!("{prefix}.w{l}"),
                sizes[l],
                sizes[l + 1],
                sizes[l],
                false,
                rng,
            ));
            biases.push(params.zeros(&format!("{prefix}.b{l}"), 1, sizes[l + 1], false));
        }
        Mlp { sizes: sizes.to_vec(), weights, biases, activate_last }
    }

    /// input: (batch × sizes[0]) → (batch × sizes.last())
    pub fn forward(&self, tape: &mut Tape, pvars: &[Var], input: Var) -> Var {
        let mut h = input;
        let last = self.weights.len() - 1;
        for l in 0..self.weights.len() {
            h = tape.matmul(h, pvars[self.weights[l]]);
            h = tape.add_row(h, pvars[self.biases[l]]);
            if l < last || self.activate_last {
                h = tape.tanh(h);
            }
        }
        h
    }
}

/// Forward-pass mode for stochastic regularizers.
pub enum GatMode<'a> {
    /// deterministic: no attention dropout, no edge drop
    Eval,
    /// stochastic regularization driven by the given stream
    Train(&'a mut ChaCha8Rng),
}

/// Multi-head graph attention over `{self} ∪ N(i)`. Heads are
/// concatenated, so the output dimension is `heads · d_head`. Projection
/// matrices carry the weight-decay flag.
#[derive(Debug, Clone)]
pub struct GatLayer {
    pub heads: usize,
    pub d_in: usize,
    pub d_head: usize,
    pub leaky_slope: f64,
    pub attn_dropout: f64,
    pub edge_drop: f64,
    projections: Vec<usize>,
    attn_src: Vec<usize>,
    attn_dst: Vec<usize>,
}

pub struct GatOutput {
    pub z: Var,
    /// edge list actually used, (src, dst), self-edge first per node
    pub edges: Vec<(usize, usize)>,
    /// per-head attention coefficient columns aligned with `edges`
    pub alphas: Vec<Var>,
}

impl GatLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        params: &mut Params,
        prefix: &str,
        heads: usize,
        d_in: usize,
        d_head: usize,
        attn_dropout: f64,
        edge_drop: f64,
        rng: &mut R,
    ) -> Self {
        let mut projections = Vec::new();
        let mut attn_src = Vec::new();
        let mut attn_dst = Vec::new();
        for h in 0..heads {
            projections.push(params.init(&format!("{prefix}.proj{h}"), d_in, d_head, d_in, true, rng));
            attn_src.push(params.init(&format!("{prefix}.attn_src{h}"), d_head, 1, d_head, false, rng));
            attn_dst.push(params.init(&format!("{prefix}.attn_dst{h}"), d_head, 1, d_head, false, rng));
        }
        GatLayer {
            heads,
            d_in,
            d_head,
            leaky_slope: 0.2,
            attn_dropout,
            edge_drop,
            projections,
            attn_src,
            attn_dst,
        }
    }

    pub fn output_dim(&self) -> usize {
        self.heads * self.d_head
    }

    /// embeddings: (n × d_in) → (n × heads·d_head)
    pub fn forward(
        &self,
        tape: &mut Tape,
        pvars: &[Var],
        embeddings: Var,
        graph: &ItemGraph,
        mode: &mut GatMode,
    ) -> GatOutput {
        let n = tape.value(embeddings).nrows();
        assert_eq!(n, graph.n, "gat_forward: graph node count mismatch");
        assert_eq!(
            tape.value(embeddings).ncols(),
            self.d_in,
            "gat_forward: embedding dimension mismatch"
        );

        // Attention set is {i} ∪ N(i); the self edge is never dropped.
        let mut srcs = Vec::new();
        let mut dsts = Vec::new();
        for i in 0..n {
            srcs.push(i);
            dsts.push(i);
            for &(j, _) in graph.out_neighbors(i) {
                if let GatMode::Train(rng) = mode {
                    if self.edge_drop > 0.0 && rng.gen::<f64>() < self.edge_drop {
                        continue;
                    }
                }
                srcs.push(i);
                dsts.push(j);
            }
        }
        let num_edges = srcs.len();

        // One dropout mask per head, drawn before building head graphs so
        // stream consumption order is fixed.
        let dropout_masks: Vec<Option<Matrix>> = (0..self.heads)
            .map(|_| match mode {
                GatMode::Train(rng) if self.attn_dropout > 0.0 => {
                    let keep = 1.0 - self.attn_dropout;
                    Some(Matrix::from_shape_fn((num_edges, 1), |_| {
                        if rng.gen::<f64>() < keep {
                            1.0 / keep
                        } else {
                            0.0
                        }
                    }))
                }
                _ => None,
            })
            .collect();

        let mut head_outputs = Vec::with_capacity(self.heads);
        let mut alphas = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let projected = tape.matmul(embeddings, pvars[self.projections[h]]); // n×d_head
            let score_src = tape.matmul(projected, pvars[self.attn_src[h]]); // n×1
            let score_dst = tape.matmul(projected, pvars[self.attn_dst[h]]);
            let e_src = tape.gather_rows(score_src, srcs.clone());
            let e_dst = tape.gather_rows(score_dst, dsts.clone());
            let scores = tape.add(e_src, e_dst);
            let scores = tape.leaky_relu(scores, self.leaky_slope);
            let mut alpha = tape.segment_softmax(scores, srcs.clone());
            alphas.push(alpha);
            if let Some(mask) = &dropout_masks[h] {
                alpha = tape.mul_const(alpha, mask.clone());
            }
            let messages = tape.gather_rows(projected, dsts.clone());
            let weighted = tape.mul_col(messages, alpha);
            head_outputs.push(tape.scatter_add_rows(weighted, srcs.clone(), n));
        }

        let mut z = head_outputs[0];
        for &head in &head_outputs[1..] {
            z = tape.concat_cols(z, head);
        }
        GatOutput { z, edges: srcs.into_iter().zip(dsts).collect(), alphas }
    }
}

/// Categorical distribution over discrete actions, parameterized by a
/// logits matrix (one row per agent).
pub struct CategoricalHead;

pub struct CategoricalSample {
    pub actions: Vec<usize>,
    /// (n × 1) log π(a_i | o_i) of the chosen actions
    pub log_probs: Var,
    /// (n × 1) entropy per agent
    pub entropy: Var,
}

impl CategoricalHead {
    /// Row-wise log-softmax of the logits.
    pub fn log_probs(tape: &mut Tape, logits: Var) -> Var {
        tape.log_softmax_rows(logits)
    }

    /// Sample one action per row from the supplied stream.
    pub fn sample_actions(tape: &Tape, log_probs: Var, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let lp = tape.value(log_probs);
        lp.rows()
            .into_iter()
            .map(|row| {
                let u: f64 = rng.gen();
                let mut acc = 0.0;
                let last = row.len() - 1;
                for (a, &l) in row.iter().enumerate() {
                    acc += l.exp();
                    if u < acc {
                        return a;
                    }
                }
                last
            })
            .collect()
    }

    /// Argmax per row, for deterministic evaluation.
    pub fn greedy_actions(tape: &Tape, log_probs: Var) -> Vec<usize> {
        let lp = tape.value(log_probs);
        lp.rows()
            .into_iter()
            .map(|row| {
                row.iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .map(|(i, _)| i)
                    .unwrap()
            })
            .collect()
    }

    /// Differentiable pieces for the chosen actions.
    pub fn evaluate(tape: &mut Tape, log_probs: Var, actions: &[usize]) -> (Var, Var) {
        let chosen = tape.gather_col_per_row(log_probs, actions.to_vec());
        let probs = tape.exp(log_probs);
        let p_logp = tape.mul(probs, log_probs);
        let neg_entropy = tape.row_sum(p_logp);
        let entropy = tape.scalar_affine(neg_entropy, -1.0, 0.0);
        (chosen, entropy)
    }

    /// Sample + log-prob + entropy in one pass.
    pub fn sample(tape: &mut Tape, logits: Var, rng: &mut ChaCha8Rng) -> CategoricalSample {
        let log_probs = Self::log_probs(tape, logits);
        let actions = Self::sample_actions(tape, log_probs, rng);
        let (chosen, entropy) = Self::evaluate(tape, log_probs, &actions);
        CategoricalSample { actions, log_probs: chosen, entropy }
    }
}
