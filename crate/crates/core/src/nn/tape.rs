//! Reverse-mode tape over dense `f64` matrices.
//!
//! Every forward op appends a node recording its parents and enough
//! auxiliary data to replay the chain rule. `backward` walks the tape in
//! reverse and accumulates gradients for every node that influenced the
//! loss. Shapes are validated eagerly; mismatches are programmer errors
//! and panic with the offending op.

use ndarray::{s, Array2, Axis};
use thiserror::Error;

pub type Matrix = Array2<f64>;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("non-finite value encountered in {0}")]
    NonFinite(String),
    #[error("checkpoint schema mismatch: {0}")]
    Checkpoint(String),
}

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub usize);

enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    /// matrix (r×c) + row vector (1×c), broadcast over rows
    AddRow(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    /// matrix (r×c) ∘ column (r×1), broadcast over columns
    MulCol(usize, usize),
    /// elementwise product with a constant matrix (dropout masks)
    MulConst(usize, Matrix),
    /// k·x + b
    ScalarAffine(usize, f64),
    LeakyRelu(usize, f64),
    Tanh(usize),
    Exp(usize),
    ConcatCols(usize, usize),
    /// out row r = in row idx[r]
    GatherRows(usize, Vec<usize>),
    /// out[seg[r]] += in row r; output has `n_out` rows
    ScatterAddRows(usize, Vec<usize>),
    /// softmax over contiguous segments of an E×1 score column
    SegmentSoftmax(usize, Vec<usize>),
    SumAll(usize),
    MeanAll(usize),
    /// mean over rows: (r×c) -> (1×c)
    MeanRows(usize),
    /// sum over columns: (r×c) -> (r×1)
    RowSum(usize),
    LogSoftmaxRows(usize),
    /// out[r,0] = x[r, idx[r]]
    GatherColPerRow(usize, Vec<usize>),
    Minimum(usize, usize),
    Clamp(usize, f64, f64),
}

struct Node {
    value: Matrix,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(av.ncols(), bv.nrows(), "matmul: {:?} x {:?}", av.dim(), bv.dim());
        let value = av.dot(bv);
        self.push(value, Op::MatMul(a.0, b.0))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(av.dim(), bv.dim(), "add: shape mismatch");
        self.push(av + bv, Op::Add(a.0, b.0))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (av, rv) = (&self.nodes[a.0].value, &self.nodes[row.0].value);
        assert_eq!(rv.nrows(), 1, "add_row: bias must be 1×c");
        assert_eq!(av.ncols(), rv.ncols(), "add_row: width mismatch");
        self.push(av + rv, Op::AddRow(a.0, row.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(av.dim(), bv.dim(), "sub: shape mismatch");
        self.push(av - bv, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(av.dim(), bv.dim(), "mul: shape mismatch");
        self.push(av * bv, Op::Mul(a.0, b.0))
    }

    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let (av, cv) = (&self.nodes[a.0].value, &self.nodes[col.0].value);
        assert_eq!(cv.ncols(), 1, "mul_col: scale must be r×1");
        assert_eq!(av.nrows(), cv.nrows(), "mul_col: height mismatch");
        self.push(av * cv, Op::MulCol(a.0, col.0))
    }

    pub fn mul_const(&mut self, a: Var, mask: Matrix) -> Var {
        let av = &self.nodes[a.0].value;
        assert_eq!(av.dim(), mask.dim(), "mul_const: shape mismatch");
        self.push(av * &mask, Op::MulConst(a.0, mask))
    }

    pub fn scalar_affine(&mut self, a: Var, k: f64, b: f64) -> Var {
        let value = self.nodes[a.0].value.mapv(|x| k * x + b);
        self.push(value, Op::ScalarAffine(a.0, k))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let value = self.nodes[a.0].value.mapv(|x| if x > 0.0 { x } else { slope * x });
        self.push(value, Op::LeakyRelu(a.0, slope))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(f64::tanh);
        self.push(value, Op::Tanh(a.0))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(f64::exp);
        self.push(value, Op::Exp(a.0))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(av.nrows(), bv.nrows(), "concat_cols: height mismatch");
        let value = ndarray::concatenate(Axis(1), &[av.view(), bv.view()]).unwrap();
        self.push(value, Op::ConcatCols(a.0, b.0))
    }

    pub fn gather_rows(&mut self, a: Var, idx: Vec<usize>) -> Var {
        let av = &self.nodes[a.0].value;
        let mut value = Matrix::zeros((idx.len(), av.ncols()));
        for (r, &i) in idx.iter().enumerate() {
            value.row_mut(r).assign(&av.row(i));
        }
        self.push(value, Op::GatherRows(a.0, idx))
    }

    pub fn scatter_add_rows(&mut self, a: Var, seg: Vec<usize>, n_out: usize) -> Var {
        let av = &self.nodes[a.0].value;
        assert_eq!(av.nrows(), seg.len(), "scatter_add_rows: segment length mismatch");
        let mut value = Matrix::zeros((n_out, av.ncols()));
        for (r, &i) in seg.iter().enumerate() {
            let row = av.row(r).to_owned();
            value.row_mut(i).scaled_add(1.0, &row);
        }
        self.push(value, Op::ScatterAddRows(a.0, seg))
    }

    /// Softmax over contiguous segments of a score column. `seg[r]` is the
    /// segment id of row r; rows of a segment must be contiguous.
    pub fn segment_softmax(&mut self, a: Var, seg: Vec<usize>) -> Var {
        let av = &self.nodes[a.0].value;
        assert_eq!(av.ncols(), 1, "segment_softmax: scores must be E×1");
        assert_eq!(av.nrows(), seg.len());
        let mut value = Matrix::zeros((av.nrows(), 1));
        let mut start = 0;
        while start < seg.len() {
            let mut end = start + 1;
            while end < seg.len() && seg[end] == seg[start] {
                end += 1;
            }
            let max = (start..end).map(|r| av[(r, 0)]).fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for r in start..end {
                let e = (av[(r, 0)] - max).exp();
                value[(r, 0)] = e;
                denom += e;
            }
            for r in start..end {
                value[(r, 0)] /= denom;
            }
            start = end;
        }
        self.push(value, Op::SegmentSoftmax(a.0, seg))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Matrix::from_elem((1, 1), self.nodes[a.0].value.sum());
        self.push(value, Op::SumAll(a.0))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let value = Matrix::from_elem((1, 1), av.sum() / av.len() as f64);
        self.push(value, Op::MeanAll(a.0))
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let value = av.mean_axis(Axis(0)).unwrap().insert_axis(Axis(0));
        self.push(value, Op::MeanRows(a.0))
    }

    pub fn row_sum(&mut self, a: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let value = av.sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(value, Op::RowSum(a.0))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let mut value = av.clone();
        for mut row in value.rows_mut() {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            row.mapv_inplace(|x| x - lse);
        }
        self.push(value, Op::LogSoftmaxRows(a.0))
    }

    pub fn gather_col_per_row(&mut self, a: Var, idx: Vec<usize>) -> Var {
        let av = &self.nodes[a.0].value;
        assert_eq!(av.nrows(), idx.len(), "gather_col_per_row: index length mismatch");
        let mut value = Matrix::zeros((idx.len(), 1));
        for (r, &c) in idx.iter().enumerate() {
            value[(r, 0)] = av[(r, c)];
        }
        self.push(value, Op::GatherColPerRow(a.0, idx))
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(av.dim(), bv.dim(), "minimum: shape mismatch");
        let mut value = av.clone();
        value.zip_mut_with(bv, |x, &y| *x = x.min(y));
        self.push(value, Op::Minimum(a.0, b.0))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let value = self.nodes[a.0].value.mapv(|x| x.clamp(lo, hi));
        self.push(value, Op::Clamp(a.0, lo, hi))
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = &self.nodes[v.0].value;
        assert_eq!(m.dim(), (1, 1), "scalar: not a 1×1 value");
        m[(0, 0)]
    }

    /// Reverse-mode sweep from a scalar loss. Errors if the loss is not
    /// finite. Returns one gradient slot per tape node (None when the
    /// node does not influence the loss).
    pub fn backward(&self, loss: Var) -> Result<Vec<Option<Matrix>>, NnError> {
        let loss_val = self.scalar(loss);
        if !loss_val.is_finite() {
            return Err(NnError::NonFinite("loss".to_string()));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Matrix::from_elem((1, 1), 1.0));

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.accumulate_parents(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(grads)
    }

    fn add_grad(grads: &mut [Option<Matrix>], id: usize, delta: Matrix) {
        match &mut grads[id] {
            Some(g) => *g += &delta,
            slot @ None => *slot = Some(delta),
        }
    }

    fn accumulate_parents(&self, id: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                Self::add_grad(grads, *a, g.dot(&bv.t()));
                Self::add_grad(grads, *b, av.t().dot(g));
            }
            Op::Add(a, b) => {
                Self::add_grad(grads, *a, g.clone());
                Self::add_grad(grads, *b, g.clone());
            }
            Op::AddRow(a, row) => {
                Self::add_grad(grads, *a, g.clone());
                Self::add_grad(grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::Sub(a, b) => {
                Self::add_grad(grads, *a, g.clone());
                Self::add_grad(grads, *b, -g);
            }
            Op::Mul(a, b) => {
                Self::add_grad(grads, *a, g * &self.nodes[*b].value);
                Self::add_grad(grads, *b, g * &self.nodes[*a].value);
            }
            Op::MulCol(a, col) => {
                let (av, cv) = (&self.nodes[*a].value, &self.nodes[*col].value);
                Self::add_grad(grads, *a, g * cv);
                let dcol = (g * av).sum_axis(Axis(1)).insert_axis(Axis(1));
                Self::add_grad(grads, *col, dcol);
            }
            Op::MulConst(a, mask) => {
                Self::add_grad(grads, *a, g * mask);
            }
            Op::ScalarAffine(a, k) => {
                Self::add_grad(grads, *a, g * *k);
            }
            Op::LeakyRelu(a, slope) => {
                let av = &self.nodes[*a].value;
                let mut d = g.clone();
                d.zip_mut_with(av, |gi, &x| {
                    if x <= 0.0 {
                        *gi *= slope;
                    }
                });
                Self::add_grad(grads, *a, d);
            }
            Op::Tanh(a) => {
                let y = &self.nodes[id].value;
                Self::add_grad(grads, *a, g * &y.mapv(|v| 1.0 - v * v));
            }
            Op::Exp(a) => {
                Self::add_grad(grads, *a, g * &self.nodes[id].value);
            }
            Op::ConcatCols(a, b) => {
                let ca = self.nodes[*a].value.ncols();
                Self::add_grad(grads, *a, g.slice(s![.., ..ca]).to_owned());
                Self::add_grad(grads, *b, g.slice(s![.., ca..]).to_owned());
            }
            Op::GatherRows(a, idx) => {
                let av = &self.nodes[*a].value;
                let mut d = Matrix::zeros(av.dim());
                for (r, &i) in idx.iter().enumerate() {
                    let row = g.row(r).to_owned();
                    d.row_mut(i).scaled_add(1.0, &row);
                }
                Self::add_grad(grads, *a, d);
            }
            Op::ScatterAddRows(a, seg) => {
                let mut d = Matrix::zeros(self.nodes[*a].value.dim());
                for (r, &i) in seg.iter().enumerate() {
                    d.row_mut(r).assign(&g.row(i));
                }
                Self::add_grad(grads, *a, d);
            }
            Op::SegmentSoftmax(a, seg) => {
                let y = &self.nodes[id].value;
                let mut d = Matrix::zeros(y.dim());
                let mut start = 0;
                while start < seg.len() {
                    let mut end = start + 1;
                    while end < seg.len() && seg[end] == seg[start] {
                        end += 1;
                    }
                    let dot: f64 = (start..end).map(|r| g[(r, 0)] * y[(r, 0)]).sum();
                    for r in start..end {
                        d[(r, 0)] = y[(r, 0)] * (g[(r, 0)] - dot);
                    }
                    start = end;
                }
                Self::add_grad(grads, *a, d);
            }
            Op::SumAll(a) => {
                let av = &self.nodes[*a].value;
                Self::add_grad(grads, *a, Matrix::from_elem(av.dim(), g[(0, 0)]));
            }
            Op::MeanAll(a) => {
                let av = &self.nodes[*a].value;
                let scale = g[(0, 0)] / av.len() as f64;
                Self::add_grad(grads, *a, Matrix::from_elem(av.dim(), scale));
            }
            Op::MeanRows(a) => {
                let av = &self.nodes[*a].value;
                let rows = av.nrows() as f64;
                let mut d = Matrix::zeros(av.dim());
                for mut row in d.rows_mut() {
                    row.assign(&(g.row(0).to_owned() / rows));
                }
                Self::add_grad(grads, *a, d);
            }
            Op::RowSum(a) => {
                let av = &self.nodes[*a].value;
                let mut d = Matrix::zeros(av.dim());
                for (r, mut row) in d.rows_mut().into_iter().enumerate() {
                    row.fill(g[(r, 0)]);
                }
                Self::add_grad(grads, *a, d);
            }
            Op::LogSoftmaxRows(a) => {
                let y = &self.nodes[id].value;
                let mut d = g.clone();
                for (r, mut row) in d.rows_mut().into_iter().enumerate() {
                    let gsum: f64 = g.row(r).sum();
                    for (c, v) in row.iter_mut().enumerate() {
                        *v -= y[(r, c)].exp() * gsum;
                    }
                }
                Self::add_grad(grads, *a, d);
            }
            Op::GatherColPerRow(a, idx) => {
                let av = &self.nodes[*a].value;
                let mut d = Matrix::zeros(av.dim());
                for (r, &c) in idx.iter().enumerate() {
                    d[(r, c)] = g[(r, 0)];
                }
                Self::add_grad(grads, *a, d);
            }
            Op::Minimum(a, b) => {
                let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let mut da = Matrix::zeros(av.dim());
                let mut db = Matrix::zeros(bv.dim());
                for ((idx, &x), &y) in av.indexed_iter().zip(bv.iter()) {
                    if x <= y {
                        da[idx] = g[idx];
                    } else {
                        db[idx] = g[idx];
                    }
                }
                Self::add_grad(grads, *a, da);
                Self::add_grad(grads, *b, db);
            }
            Op::Clamp(a, lo, hi) => {
                let av = &self.nodes[*a].value;
                let mut d = g.clone();
                d.zip_mut_with(av, |gi, &x| {
                    if x < *lo || x > *hi {
                        *gi = 0.0;
                    }
                });
                Self::add_grad(grads, *a, d);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::array;

    #[test]
    fn matmul_gradients_match_hand_derivation() {
        let mut t = Tape::new();
        let a = t.leaf(array![[1.0, 2.0], [3.0, 4.0]]);
        let b = t.leaf(array![[5.0], [6.0]]);
        let c = t.matmul(a, b);
        let loss = t.sum_all(c);
        let g = t.backward(loss).unwrap();
        // d sum(A·B)/dA = 1·Bᵀ per row
        assert_eq!(g[a.0].as_ref().unwrap(), &array![[5.0, 6.0], [5.0, 6.0]]);
        assert_eq!(g[b.0].as_ref().unwrap(), &array![[4.0], [6.0]]);
    }

    #[test]
    fn loss_sum_of_params_gives_unit_gradients() {
        let mut t = Tape::new();
        let p = t.leaf(array![[1.0, -2.0], [0.5, 3.0]]);
        let loss = t.sum_all(p);
        let g = t.backward(loss).unwrap();
        assert_eq!(g[p.0].as_ref().unwrap(), &Matrix::from_elem((2, 2), 1.0));
    }

    #[test]
    fn off_path_parameter_has_no_gradient() {
        let mut t = Tape::new();
        let p = t.leaf(array![[1.0]]);
        let q = t.leaf(array![[2.0]]);
        let loss = t.sum_all(p);
        let g = t.backward(loss).unwrap();
        assert!(g[q.0].is_none());
    }

    #[test]
    fn segment_softmax_normalizes_and_backprops() {
        let mut t = Tape::new();
        let scores = t.leaf(array![[1.0], [2.0], [0.5], [0.0], [3.0]]);
        let y = t.segment_softmax(scores, vec![0, 0, 0, 1, 1]);
        let v = t.value(y);
        assert_relative_eq!(v.slice(s![..3, 0]).sum(), 1.0, epsilon = 1e-12);
        assert_relative_eq!(v.slice(s![3.., 0]).sum(), 1.0, epsilon = 1e-12);
        // gradient of sum(softmax) within a full segment is 0
        let loss = t.sum_all(y);
        let g = t.backward(loss).unwrap();
        let gs = g[scores.0].as_ref().unwrap();
        for x in gs.iter() {
            assert_relative_eq!(*x, 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn nonfinite_loss_is_an_error() {
        let mut t = Tape::new();
        let p = t.leaf(array![[f64::INFINITY]]);
        let loss = t.sum_all(p);
        assert!(matches!(t.backward(loss), Err(NnError::NonFinite(_))));
    }

    #[test]
    #[should_panic(expected = "matmul")]
    fn shape_mismatch_panics() {
        let mut t = Tape::new();
        let a = t.leaf(Matrix::zeros((2, 3)));
        let b = t.leaf(Matrix::zeros((2, 3)));
        t.matmul(a, b);
    }

    /// Central finite differences over every op in one composite graph.
    #[test]
    fn finite_difference_composite_graph() {
        let build = |x: &Matrix, w: &Matrix| -> f64 {
            let mut t = Tape::new();
            let xv = t.leaf(x.clone());
            let wv = t.leaf(w.clone());
            let h = t.matmul(xv, wv);
            let h = t.tanh(h);
            let h = t.leaky_relu(h, 0.2);
            let e = t.exp(h);
            let lsm = t.log_softmax_rows(e);
            let picked = t.gather_col_per_row(lsm, vec![0, 1, 0]);
            let gathered = t.gather_rows(picked, vec![0, 0, 1, 2]);
            let scattered = t.scatter_add_rows(gathered, vec![0, 1, 1, 0], 2);
            let sm = t.segment_softmax(scattered, vec![0, 0]);
            let loss = t.mean_all(sm);
            t.scalar(loss)
        };
        let x = array![[0.3, -0.1], [0.7, 0.2], [-0.4, 0.5]];
        let w = array![[0.6, -0.2, 0.1], [0.05, 0.4, -0.3]];

        let mut t = Tape::new();
        let xv = t.leaf(x.clone());
        let wv = t.leaf(w.clone());
        let h = t.matmul(xv, wv);
        let h = t.tanh(h);
        let h = t.leaky_relu(h, 0.2);
        let e = t.exp(h);
        let lsm = t.log_softmax_rows(e);
        let picked = t.gather_col_per_row(lsm, vec![0, 1, 0]);
        let gathered = t.gather_rows(picked, vec![0, 0, 1, 2]);
        let scattered = t.scatter_add_rows(gathered, vec![0, 1, 1, 0], 2);
        let sm = t.segment_softmax(scattered, vec![0, 0]);
        let loss = t.mean_all(sm);
        let grads = t.backward(loss).unwrap();

        let step = 1e-5;
        let gw = grads[wv.0].as_ref().unwrap();
        for idx in [(0usize, 0usize), (0, 2), (1, 1)] {
            let mut wp = w.clone();
            wp[idx] += step;
            let mut wm = w.clone();
            wm[idx] -= step;
            let fd = (build(&x, &wp) - build(&x, &wm)) / (2.0 * step);
            assert_relative_eq!(gw[idx], fd, max_relative = 1e-6, epsilon = 1e-10);
        }
    }
}
