//! Matrix-level reverse-mode differentiation.
//!
//! A `Tape` records one forward pass as a flat list of nodes; each op only
//! references earlier nodes, so walking the list backwards visits every op
//! exactly once. Gradients are computed only into nodes that need them
//! (parameters and anything between a parameter and the loss), which keeps
//! the backward pass from materializing gradients for large constant inputs
//! such as feature matrices.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::kernels::{self, GroupIndex};
use super::matrix::{Matrix, TensorError};

const BCE_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul(Var, Var),
    /// A * B^T
    MatMulNT(Var, Var),
    AddBias(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Dropout {
        input: Var,
        mask: Vec<f64>,
    },
    GroupMean {
        input: Var,
        index: Arc<GroupIndex>,
    },
    PairDot {
        left: Var,
        right: Var,
        pairs: Arc<Vec<(u32, u32)>>,
    },
    BceSum {
        pred: Var,
        target: Arc<Matrix>,
    },
    SoftmaxCe {
        logits: Var,
        labels: Arc<Vec<usize>>,
        rows: Arc<Vec<usize>>,
        /// softmax probabilities of the selected rows, cached at forward time
        probs: Matrix,
    },
}

struct Node {
    value: Arc<Matrix>,
    grad: Option<Matrix>,
    requires_grad: bool,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    loss_recorded: bool,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&mut self, value: Matrix, requires_grad: bool, op: Op) -> Var {
        self.push_arc(Arc::new(value), requires_grad, op)
    }

    fn push_arc(&mut self, value: Arc<Matrix>, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant input; no gradient is computed for it.
    pub fn input(&mut self, m: Matrix) -> Var {
        self.push(m, false, Op::Leaf)
    }

    /// Constant input shared by reference (large matrices reused every epoch).
    pub fn input_shared(&mut self, m: Arc<Matrix>) -> Var {
        self.push_arc(m, false, Op::Leaf)
    }

    /// Trainable parameter; gradient is available after `backward`.
    pub fn param(&mut self, m: &Matrix) -> Var {
        self.push(m.clone(), true, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Matrix> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.cols() != vb.rows() {
            return Err(TensorError::ShapeMismatch {
                expected: format!("inner dims to agree ({}x{} * {}x{})", va.rows(), va.cols(), vb.rows(), vb.cols()),
                got: format!("{} vs {}", va.cols(), vb.rows()),
            });
        }
        let out = kernels::matmul(va, vb);
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(out, rg, Op::MatMul(a, b)))
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.cols() != vb.cols() {
            return Err(TensorError::ShapeMismatch {
                expected: format!("matching widths ({} and {})", va.cols(), vb.cols()),
                got: "transpose product".into(),
            });
        }
        let out = kernels::matmul_nt(va, vb);
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(out, rg, Op::MatMulNT(a, b)))
    }

    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var, TensorError> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[bias.0].value);
        if vb.rows() != 1 || vb.cols() != va.cols() {
            return Err(TensorError::ShapeMismatch {
                expected: format!("1x{} bias", va.cols()),
                got: format!("{}x{}", vb.rows(), vb.cols()),
            });
        }
        let out = kernels::add_bias(va, vb);
        let rg = self.needs(a) || self.needs(bias);
        Ok(self.push(out, rg, Op::AddBias(a, bias)))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = kernels::relu(&self.nodes[a.0].value);
        let rg = self.needs(a);
        self.push(out, rg, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = kernels::sigmoid(&self.nodes[a.0].value);
        let rg = self.needs(a);
        self.push(out, rg, Op::Sigmoid(a))
    }

    /// Inverted dropout: kept entries are scaled by 1/(1-p).
    pub fn dropout(&mut self, a: Var, p: f64, rng: &mut ChaCha8Rng) -> Var {
        assert!((0.0..1.0).contains(&p));
        let va = &self.nodes[a.0].value;
        let scale = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..va.rows() * va.cols())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { scale })
            .collect();
        let mut out = (**va).clone();
        for (v, m) in out.data_mut().iter_mut().zip(&mask) {
            *v *= m;
        }
        let rg = self.needs(a);
        self.push(out, rg, Op::Dropout { input: a, mask })
    }

    /// Mean over each group of input rows. Empty groups are rejected; use
    /// `group_mean_allow_empty` where the zero-vector convention applies.
    pub fn group_mean(&mut self, a: Var, index: Arc<GroupIndex>) -> Result<Var, TensorError> {
        if let Some(g) = index.has_empty_group() {
            return Err(TensorError::EmptyGroup(g));
        }
        self.group_mean_allow_empty(a, index)
    }

    /// Same pooling, but empty groups produce zero rows (isolated nodes).
    pub fn group_mean_allow_empty(
        &mut self,
        a: Var,
        index: Arc<GroupIndex>,
    ) -> Result<Var, TensorError> {
        let va = &self.nodes[a.0].value;
        if index.input_rows() != va.rows() {
            return Err(TensorError::ShapeMismatch {
                expected: format!("{} input rows", index.input_rows()),
                got: format!("{}", va.rows()),
            });
        }
        let out = kernels::group_mean(va, &index);
        let rg = self.needs(a);
        Ok(self.push(out, rg, Op::GroupMean { input: a, index }))
    }

    /// 1xK row of dot products between selected row pairs of two matrices.
    pub fn pair_dot(
        &mut self,
        left: Var,
        right: Var,
        pairs: Arc<Vec<(u32, u32)>>,
    ) -> Result<Var, TensorError> {
        let (vl, vr) = (&self.nodes[left.0].value, &self.nodes[right.0].value);
        if vl.cols() != vr.cols() {
            return Err(TensorError::ShapeMismatch {
                expected: format!("matching widths ({} and {})", vl.cols(), vr.cols()),
                got: "pair_dot".into(),
            });
        }
        for &(i, j) in pairs.iter() {
            if i as usize >= vl.rows() || j as usize >= vr.rows() {
                return Err(TensorError::IndexOutOfRange(format!("pair ({i}, {j})")));
            }
        }
        let out = kernels::pair_dot(vl, vr, &pairs);
        let rg = self.needs(left) || self.needs(right);
        Ok(self.push(out, rg, Op::PairDot { left, right, pairs }))
    }

    /// Summed binary cross-entropy; predictions are clamped away from {0,1}.
    pub fn bce_sum(&mut self, pred: Var, target: Arc<Matrix>) -> Result<Var, TensorError> {
        let vp = &self.nodes[pred.0].value;
        if (vp.rows(), vp.cols()) != (target.rows(), target.cols()) {
            return Err(TensorError::ShapeMismatch {
                expected: format!("{}x{}", vp.rows(), vp.cols()),
                got: format!("{}x{}", target.rows(), target.cols()),
            });
        }
        let t = target.data();
        let loss = kernels::rowwise_sum(vp, |idx, p| {
            let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            -(t[idx] * p.ln() + (1.0 - t[idx]) * (1.0 - p).ln())
        });
        let rg = self.needs(pred);
        let out = Matrix::from_vec(1, 1, vec![loss])?;
        self.loss_recorded = true;
        Ok(self.push(out, rg, Op::BceSum { pred, target }))
    }

    /// Mean softmax cross-entropy over the selected rows, stabilized by
    /// max-subtraction.
    pub fn softmax_ce(
        &mut self,
        logits: Var,
        labels: Arc<Vec<usize>>,
        rows: Arc<Vec<usize>>,
    ) -> Result<Var, TensorError> {
        let vl = &self.nodes[logits.0].value;
        if rows.is_empty() {
            return Err(TensorError::EmptyInput("softmax_ce over zero rows".into()));
        }
        if labels.len() != vl.rows() {
            return Err(TensorError::ShapeMismatch {
                expected: format!("{} labels", vl.rows()),
                got: format!("{}", labels.len()),
            });
        }
        let classes = vl.cols();
        let mut probs = Matrix::zeros(rows.len(), classes);
        let mut total = 0.0;
        for (k, &r) in rows.iter().enumerate() {
            if r >= vl.rows() {
                return Err(TensorError::IndexOutOfRange(format!("row {r}")));
            }
            let label = labels[r];
            if label >= classes {
                return Err(TensorError::IndexOutOfRange(format!(
                    "label {label} for {classes} classes"
                )));
            }
            let row = vl.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for &v in row {
                denom += (v - max).exp();
            }
            for (c, &v) in row.iter().enumerate() {
                probs.set(k, c, (v - max).exp() / denom);
            }
            total += denom.ln() - (row[label] - max);
        }
        let loss = total / rows.len() as f64;
        let rg = self.needs(logits);
        let out = Matrix::from_vec(1, 1, vec![loss])?;
        self.loss_recorded = true;
        Ok(self.push(out, rg, Op::SoftmaxCe {
            logits,
            labels,
            rows,
            probs,
        }))
    }

    /// Reverse pass from a recorded scalar loss; gradients land on every
    /// parameter reachable from it.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if !self.loss_recorded {
            return Err(TensorError::NoLoss);
        }
        let lv = &self.nodes[loss.0].value;
        if (lv.rows(), lv.cols()) != (1, 1) {
            return Err(TensorError::NonScalarLoss {
                rows: lv.rows(),
                cols: lv.cols(),
            });
        }
        self.nodes[loss.0].grad = Some(Matrix::from_vec(1, 1, vec![1.0])?);

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad || self.nodes[idx].grad.is_none() {
                continue;
            }
            let grad = self.nodes[idx].grad.take().expect("grad present");
            match &self.nodes[idx].op {
                Op::Leaf => {
                    self.nodes[idx].grad = Some(grad);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let (a, b) = (*a, *b);
                    if self.needs(a) {
                        // dA = dC * B^T
                        let da = kernels::matmul_nt(&grad, &self.nodes[b.0].value);
                        self.accumulate(a, da);
                    }
                    if self.needs(b) {
                        // dB = A^T * dC
                        let at = self.nodes[a.0].value.transpose();
                        let db = kernels::matmul(&at, &grad);
                        self.accumulate(b, db);
                    }
                }
                Op::MatMulNT(a, b) => {
                    let (a, b) = (*a, *b);
                    if self.needs(a) {
                        // dA = dC * B
                        let da = kernels::matmul(&grad, &self.nodes[b.0].value);
                        self.accumulate(a, da);
                    }
                    if self.needs(b) {
                        // dB = dC^T * A
                        let dct = grad.transpose();
                        let db = kernels::matmul(&dct, &self.nodes[a.0].value);
                        self.accumulate(b, db);
                    }
                }
                Op::AddBias(a, bias) => {
                    let (a, bias) = (*a, *bias);
                    if self.needs(a) {
                        self.accumulate(a, grad.clone());
                    }
                    if self.needs(bias) {
                        let cols = grad.cols();
                        let mut db = Matrix::zeros(1, cols);
                        for r in 0..grad.rows() {
                            for c in 0..cols {
                                db.set(0, c, db.get(0, c) + grad.get(r, c));
                            }
                        }
                        self.accumulate(bias, db);
                    }
                }
                Op::Relu(a) => {
                    let a = *a;
                    if self.needs(a) {
                        let input = &self.nodes[a.0].value;
                        let mut da = grad.clone();
                        for (g, &x) in da.data_mut().iter_mut().zip(input.data()) {
                            if x <= 0.0 {
                                *g = 0.0;
                            }
                        }
                        self.accumulate(a, da);
                    }
                }
                Op::Sigmoid(a) => {
                    let a = *a;
                    if self.needs(a) {
                        let out = &self.nodes[idx].value;
                        let mut da = grad.clone();
                        for (g, &s) in da.data_mut().iter_mut().zip(out.data()) {
                            *g *= s * (1.0 - s);
                        }
                        self.accumulate(a, da);
                    }
                }
                Op::Dropout { input, mask } => {
                    let input = *input;
                    if self.needs(input) {
                        let mut da = grad.clone();
                        for (g, m) in da.data_mut().iter_mut().zip(mask) {
                            *g *= m;
                        }
                        self.accumulate(input, da);
                    }
                }
                Op::GroupMean { input, index } => {
                    let input = *input;
                    if self.needs(input) {
                        let da = kernels::group_mean_backward(&grad, index);
                        self.accumulate(input, da);
                    }
                }
                Op::PairDot { left, right, pairs } => {
                    let (left, right) = (*left, *right);
                    let pairs = Arc::clone(pairs);
                    let g = grad.row(0).to_vec();
                    if self.needs(left) {
                        let vr = &self.nodes[right.0].value;
                        let mut dl = Matrix::zeros(self.nodes[left.0].value.rows(), vr.cols());
                        for (k, &(i, j)) in pairs.iter().enumerate() {
                            let row = vr.row(j as usize).to_vec();
                            let dst = dl.row_mut(i as usize);
                            for (d, x) in dst.iter_mut().zip(&row) {
                                *d += g[k] * x;
                            }
                        }
                        self.accumulate(left, dl);
                    }
                    if self.needs(right) {
                        let vl = &self.nodes[left.0].value;
                        let mut dr = Matrix::zeros(self.nodes[right.0].value.rows(), vl.cols());
                        for (k, &(i, j)) in pairs.iter().enumerate() {
                            let row = vl.row(i as usize).to_vec();
                            let dst = dr.row_mut(j as usize);
                            for (d, x) in dst.iter_mut().zip(&row) {
                                *d += g[k] * x;
                            }
                        }
                        self.accumulate(right, dr);
                    }
                }
                Op::BceSum { pred, target } => {
                    let pred = *pred;
                    if self.needs(pred) {
                        let scale = grad.get(0, 0);
                        let vp = &self.nodes[pred.0].value;
                        let t = target.data();
                        let mut dp = Matrix::zeros(vp.rows(), vp.cols());
                        for (idx2, g) in dp.data_mut().iter_mut().enumerate() {
                            let p = vp.data()[idx2].clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
                            *g = scale * (-(t[idx2] / p) + (1.0 - t[idx2]) / (1.0 - p));
                        }
                        self.accumulate(pred, dp);
                    }
                }
                Op::SoftmaxCe {
                    logits,
                    labels,
                    rows,
                    probs,
                } => {
                    let logits = *logits;
                    if self.needs(logits) {
                        let scale = grad.get(0, 0) / rows.len() as f64;
                        let vl = &self.nodes[logits.0].value;
                        let mut dl = Matrix::zeros(vl.rows(), vl.cols());
                        for (k, &r) in rows.iter().enumerate() {
                            for c in 0..vl.cols() {
                                let delta = if labels[r] == c { 1.0 } else { 0.0 };
                                dl.set(r, c, dl.get(r, c) + scale * (probs.get(k, c) - delta));
                            }
                        }
                        self.accumulate(logits, dl);
                    }
                }
            }
            // Interior node: value no longer needed for gradient propagation
            // upstream of it, but keep the grad only on leaves.
            if !matches!(self.nodes[idx].op, Op::Leaf) {
                self.nodes[idx].grad = None;
            } else {
                self.nodes[idx].grad = Some(grad);
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, g: Matrix) {
        match &mut self.nodes[v.0].grad {
            Some(existing) => {
                for (a, b) in existing.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            None => self.nodes[v.0].grad = Some(g),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn backward_of_sum_is_ones() {
        // f(W) = sum(W) expressed as ones^T * W * ones
        let w_val = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let mut tape = Tape::new();
        let w = tape.param(&w_val);
        let left = tape.input(Matrix::from_rows(&[vec![1.0, 1.0]]));
        let right = tape.input(Matrix::from_rows(&[vec![1.0], vec![1.0]]));
        let lw = tape.matmul(left, w).unwrap();
        let s = tape.matmul(lw, right).unwrap();
        // mark the scalar as a loss through bce against itself? No: use the
        // dedicated entry point by treating s as a recorded loss.
        tape.loss_recorded = true;
        tape.backward(s).unwrap();
        let grad = tape.grad(w).unwrap();
        assert_eq!(grad, &Matrix::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]]));
    }

    #[test]
    fn backward_without_loss_errors() {
        let mut tape = Tape::new();
        let a = tape.param(&Matrix::from_rows(&[vec![1.0]]));
        assert_eq!(tape.backward(a).unwrap_err(), TensorError::NoLoss);
    }

    #[test]
    fn bce_hand_values() {
        // pred = 0.5, target = 1 -> ln 2
        let mut tape = Tape::new();
        let p = tape.input(Matrix::from_rows(&[vec![0.5]]));
        let t = Arc::new(Matrix::from_rows(&[vec![1.0]]));
        let loss = tape.bce_sum(p, t).unwrap();
        assert!((tape.value(loss).get(0, 0) - std::f64::consts::LN_2).abs() < 1e-12);

        // perfect reconstruction -> ~0 under the clamp
        let mut tape = Tape::new();
        let p = tape.input(Matrix::from_rows(&[vec![1.0, 0.0]]));
        let t = Arc::new(Matrix::from_rows(&[vec![1.0, 0.0]]));
        let loss = tape.bce_sum(p, t).unwrap();
        assert!(tape.value(loss).get(0, 0).abs() < 1e-9);
    }

    #[test]
    fn bce_matches_scalar_loop_oracle() {
        let pred = Matrix::from_rows(&[
            vec![0.2, 0.7, 0.5],
            vec![0.9, 0.1, 0.4],
            vec![0.6, 0.3, 0.8],
        ]);
        let target = Matrix::from_rows(&[
            vec![0.0, 1.0, 1.0],
            vec![1.0, 0.0, 0.0],
            vec![1.0, 0.0, 1.0],
        ]);
        let mut expected = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let p: f64 = pred.get(i, j);
                let t = target.get(i, j);
                expected -= t * p.ln() + (1.0 - t) * (1.0 - p).ln();
            }
        }
        let mut tape = Tape::new();
        let p = tape.input(pred);
        let loss = tape.bce_sum(p, Arc::new(target)).unwrap();
        assert!((tape.value(loss).get(0, 0) - expected).abs() < 1e-12);
    }

    #[test]
    fn softmax_ce_uniform_and_saturated() {
        let mut tape = Tape::new();
        let logits = tape.input(Matrix::from_rows(&[vec![0.3, 0.3, 0.3], vec![0.3, 0.3, 0.3]]));
        let loss = tape
            .softmax_ce(logits, Arc::new(vec![0, 2]), Arc::new(vec![0, 1]))
            .unwrap();
        assert!((tape.value(loss).get(0, 0) - 3.0f64.ln()).abs() < 1e-12);

        let mut tape = Tape::new();
        let logits = tape.input(Matrix::from_rows(&[vec![100.0, 0.0]]));
        let loss = tape
            .softmax_ce(logits, Arc::new(vec![0]), Arc::new(vec![0]))
            .unwrap();
        assert!(tape.value(loss).get(0, 0) < 1e-9);
    }

    #[test]
    fn softmax_ce_rejects_empty_mask() {
        let mut tape = Tape::new();
        let logits = tape.input(Matrix::from_rows(&[vec![0.0, 1.0]]));
        let err = tape
            .softmax_ce(logits, Arc::new(vec![0]), Arc::new(vec![]))
            .unwrap_err();
        assert!(matches!(err, TensorError::EmptyInput(_)));
    }

    #[test]
    fn dropout_scales_and_masks() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut tape = Tape::new();
        let x = tape.param(&Matrix::from_vec(4, 4, vec![1.0; 16]).unwrap());
        let y = tape.dropout(x, 0.5, &mut rng);
        for &v in tape.value(y).data() {
            assert!(v == 0.0 || (v - 2.0).abs() < 1e-15);
        }
    }

    #[test]
    fn untouched_parameter_has_no_gradient_path() {
        let mut tape = Tape::new();
        let used = tape.param(&Matrix::from_rows(&[vec![0.4]]));
        let unused = tape.param(&Matrix::from_rows(&[vec![0.9]]));
        let s = tape.sigmoid(used);
        let loss = tape
            .bce_sum(s, Arc::new(Matrix::from_rows(&[vec![1.0]])))
            .unwrap();
        tape.backward(loss).unwrap();
        assert!(tape.grad(used).is_some());
        assert!(tape.grad(unused).is_none());
    }
}
