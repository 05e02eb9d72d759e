//! Reverse-mode automatic differentiation over whole matrices.
//!
//! Every operation appends a node whose value is computed eagerly. Parents
//! always have a smaller index than their children, so walking the node list
//! backwards is a valid topological order and each node is visited once.

use crate::error::{shape_err, NnError, Result};
use crate::matrix::{gemm_nn_acc, gemm_nt_acc, gemm_tn_acc, Matrix};
use crate::params::{ParamId, ParamStore};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Affine(Var, f64),
    SoftmaxRows(Var),
    Tanh(Var),
    Sigmoid(Var),
    ConcatCols(Var, Var),
    Row(Var, usize),
    Square(Var),
    Sum(Var),
    SoftmaxCrossEntropy { logits: Var, label: usize, probs: Vec<f64> },
    KlSoftmax { p_logits: Var, q_logits: Var, p: Vec<f64>, q: Vec<f64> },
    BinaryCrossEntropy { logit: Var, target: f64 },
    WeightedSum(Vec<(Var, f64)>),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Parameters of one [`ParamStore`] placed on a tape, indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn get(&self, id: ParamId) -> Var {
        self.vars[id.index()]
    }
}

/// Gradients for every parameter of a store, aligned with its ids.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    grads: Vec<Matrix>,
}

impl Gradients {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            grads: store
                .ids()
                .map(|id| {
                    let (r, c) = store.get(id).shape();
                    Matrix::zeros(r, c)
                })
                .collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.grads[id.index()]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.grads[id.index()]
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Matrix> {
        self.grads.iter()
    }

    pub fn scale(&mut self, s: f64) {
        for g in &mut self.grads {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
}

/// Gradients of the loss with respect to every node that needed one.
#[derive(Debug)]
pub struct NodeGrads {
    grads: Vec<Option<Matrix>>,
}

impl NodeGrads {
    /// Gradient with respect to `v`, or `None` when the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Option<&Matrix> {
        self.grads[v.0].as_ref()
    }

    /// Collects parameter gradients for a store that was bound with [`Tape::bind`].
    pub fn params(&self, bound: &Bound, store: &ParamStore) -> Gradients {
        let mut out = Gradients::zeros_like(store);
        for id in store.ids() {
            if let Some(g) = self.wrt(bound.get(id)) {
                out.get_mut(id).add_assign(g);
            }
        }
        out
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

/// Numerically stable softmax of a slice.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let mut out = logits.to_vec();
    softmax_in_place(&mut out);
    out
}

/// `ln Σ exp(x)` with max subtraction.
pub fn log_sum_exp(x: &[f64]) -> f64 {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
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

    /// Scalar value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.get(0, 0)
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// Constant input; no gradient flows into it.
    pub fn input(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Input, false)
    }

    /// Differentiable leaf.
    pub fn leaf(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Leaf, true)
    }

    /// Places every tensor of `store` on the tape. Frozen stores become
    /// constants that still propagate gradients to their consumers' other inputs.
    pub fn bind(&mut self, store: &ParamStore, trainable: bool) -> Bound {
        let vars = store
            .ids()
            .map(|id| {
                let m = store.get(id).clone();
                if trainable {
                    self.leaf(m)
                } else {
                    self.input(m)
                }
            })
            .collect();
        Bound { vars }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        if ac != br {
            return Err(shape_err("matmul", format!("({ar},{ac}) x ({br},{bc})")));
        }
        let mut out = Matrix::zeros(ar, bc);
        gemm_nn_acc(self.value(a), self.value(b), &mut out);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        if ac != bc {
            return Err(shape_err("matmul_t", format!("({ar},{ac}) x ({br},{bc})ᵀ")));
        }
        let mut out = Matrix::zeros(ar, br);
        gemm_nt_acc(self.value(a), self.value(b), &mut out);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::MatMulT(a, b), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(
                "add",
                format!("{:?} + {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    /// Adds a 1×c row vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        if self.shape(bias) != (1, c) {
            return Err(shape_err(
                "add_row",
                format!("({r},{c}) + {:?}", self.shape(bias)),
            ));
        }
        let mut out = self.value(a).clone();
        let b = self.value(bias).data().to_vec();
        for i in 0..r {
            for (o, bv) in out.row_mut(i).iter_mut().zip(&b) {
                *o += bv;
            }
        }
        let ng = self.needs(a) || self.needs(bias);
        Ok(self.push(out, Op::AddRow(a, bias), ng))
    }

    /// `x · w + b` for a weight `w` and 1×c bias `b`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add_row(xw, b)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(
                "mul",
                format!("{:?} * {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let (r, c) = self.shape(a);
        let out = Matrix::from_vec(r, c, data)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    /// `scale · a + shift`, elementwise.
    pub fn scale_shift(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let out = self.value(a).map(|x| scale * x + shift);
        let ng = self.needs(a);
        self.push(out, Op::Affine(a, scale), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.scale_shift(a, s, 0.0)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for r in 0..out.rows() {
            softmax_in_place(out.row_mut(r));
        }
        let ng = self.needs(a);
        self.push(out, Op::SoftmaxRows(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        let ng = self.needs(a);
        self.push(out, Op::Tanh(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        let ng = self.needs(a);
        self.push(out, Op::Sigmoid(a), ng)
    }

    /// Horizontal concatenation `[a | b]`.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        if ar != br {
            return Err(shape_err("concat_cols", format!("({ar},{ac}) | ({br},{bc})")));
        }
        let mut out = Matrix::zeros(ar, ac + bc);
        for r in 0..ar {
            let row = out.row_mut(r);
            row[..ac].copy_from_slice(self.nodes[a.0].value.row(r));
            row[ac..].copy_from_slice(self.nodes[b.0].value.row(r));
        }
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::ConcatCols(a, b), ng))
    }

    /// Row `r` of `a` as a 1×c matrix.
    pub fn row(&mut self, a: Var, r: usize) -> Result<Var> {
        let (ar, _) = self.shape(a);
        if r >= ar {
            return Err(shape_err("row", format!("row {r} of {ar}")));
        }
        let out = Matrix::row_vector(self.value(a).row(r).to_vec());
        let ng = self.needs(a);
        Ok(self.push(out, Op::Row(a, r), ng))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * x);
        let ng = self.needs(a);
        self.push(out, Op::Square(a), ng)
    }

    /// Sum of all entries, as 1×1.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let ng = self.needs(a);
        self.push(Matrix::filled(1, 1, s), Op::Sum(a), ng)
    }

    /// `−ln softmax(logits)[label]` for a 1×L logit row.
    pub fn softmax_cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let (r, l) = self.shape(logits);
        if r != 1 {
            return Err(shape_err("softmax_cross_entropy", format!("({r},{l}) logits")));
        }
        if label >= l {
            return Err(NnError::Index { index: label, len: l });
        }
        let z = self.value(logits).data();
        let loss = log_sum_exp(z) - z[label];
        let probs = softmax(z);
        let ng = self.needs(logits);
        Ok(self.push(
            Matrix::filled(1, 1, loss),
            Op::SoftmaxCrossEntropy {
                logits,
                label,
                probs,
            },
            ng,
        ))
    }

    /// `KL(softmax(p_logits) ‖ softmax(q_logits))` for two 1×L rows.
    pub fn kl_softmax(&mut self, p_logits: Var, q_logits: Var) -> Result<Var> {
        let (pr, pl) = self.shape(p_logits);
        if pr != 1 || self.shape(q_logits) != (1, pl) {
            return Err(shape_err(
                "kl_softmax",
                format!("({pr},{pl}) vs {:?}", self.shape(q_logits)),
            ));
        }
        let zp = self.value(p_logits).data();
        let zq = self.value(q_logits).data();
        let lp = log_sum_exp(zp);
        let lq = log_sum_exp(zq);
        let p = softmax(zp);
        let q = softmax(zq);
        // log p − log q computed from logits avoids log of underflowed probabilities
        let kl: f64 = p
            .iter()
            .zip(zp.iter().zip(zq))
            .map(|(pi, (a, b))| pi * ((a - lp) - (b - lq)))
            .sum();
        let ng = self.needs(p_logits) || self.needs(q_logits);
        Ok(self.push(
            Matrix::filled(1, 1, kl.max(0.0)),
            Op::KlSoftmax {
                p_logits,
                q_logits,
                p,
                q,
            },
            ng,
        ))
    }

    /// Binary cross-entropy of `sigmoid(logit)` against `target ∈ [0, 1]`, for a 1×1 logit.
    pub fn binary_cross_entropy(&mut self, logit: Var, target: f64) -> Result<Var> {
        if self.shape(logit) != (1, 1) {
            return Err(shape_err("binary_cross_entropy", format!("logit shape {:?}", self.shape(logit))));
        }
        let z = self.scalar(logit);
        let loss = z.max(0.0) - z * target + (-z.abs()).exp().ln_1p();
        let ng = self.needs(logit);
        Ok(self.push(
            Matrix::filled(1, 1, loss),
            Op::BinaryCrossEntropy { logit, target },
            ng,
        ))
    }

    /// `Σ wᵢ · xᵢ` over same-shaped terms.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let Some(&(first, _)) = terms.first() else {
            return Err(shape_err("weighted_sum", "no terms"));
        };
        let (r, c) = self.shape(first);
        let mut out = Matrix::zeros(r, c);
        let mut ng = false;
        for &(v, w) in terms {
            if self.shape(v) != (r, c) {
                return Err(shape_err(
                    "weighted_sum",
                    format!("{:?} vs ({r},{c})", self.shape(v)),
                ));
            }
            out.add_scaled(self.value(v), w);
            ng |= self.needs(v);
        }
        Ok(self.push(out, Op::WeightedSum(terms.to_vec()), ng))
    }

    /// Propagates `d loss / d node` for every node the loss depends on.
    pub fn backward(&self, loss: Var) -> Result<NodeGrads> {
        if self.shape(loss) != (1, 1) {
            return Err(shape_err("backward", format!("loss shape {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::filled(1, 1, 1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(NodeGrads { grads })
    }

    fn propagate(&self, node: &Node, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let nodes = &self.nodes;
        match &node.op {
            Op::Input | Op::Leaf => {}
            Op::MatMul(a, b) => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    gemm_nt_acc(g, &nodes[b.0].value, ga);
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    gemm_tn_acc(&nodes[a.0].value, g, gb);
                }
            }
            Op::MatMulT(a, b) => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    gemm_nn_acc(g, &nodes[b.0].value, ga);
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    gemm_tn_acc(g, &nodes[a.0].value, gb);
                }
            }
            Op::Add(a, b) => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    ga.add_assign(g);
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    gb.add_assign(g);
                }
            }
            Op::AddRow(a, bias) => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    ga.add_assign(g);
                }
                if let Some(gb) = slot(nodes, grads, *bias) {
                    for r in 0..g.rows() {
                        for (o, v) in gb.data_mut().iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                }
            }
            Op::Mul(a, b) => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    for ((o, gv), bv) in ga.data_mut().iter_mut().zip(g.data()).zip(nodes[b.0].value.data()) {
                        *o += gv * bv;
                    }
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    for ((o, gv), av) in gb.data_mut().iter_mut().zip(g.data()).zip(nodes[a.0].value.data()) {
                        *o += gv * av;
                    }
                }
            }
            Op::Affine(a, s) => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    ga.add_scaled(g, *s);
                }
            }
            Op::SoftmaxRows(a) => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    let y = &node.value;
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for ((o, yv), gv) in ga.row_mut(r).iter_mut().zip(yr).zip(gr) {
                            *o += yv * (gv - dot);
                        }
                    }
                }
            }
            Op::Tanh(a) => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    for ((o, y), gv) in ga.data_mut().iter_mut().zip(node.value.data()).zip(g.data()) {
                        *o += gv * (1.0 - y * y);
                    }
                }
            }
            Op::Sigmoid(a) => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    for ((o, y), gv) in ga.data_mut().iter_mut().zip(node.value.data()).zip(g.data()) {
                        *o += gv * y * (1.0 - y);
                    }
                }
            }
            Op::ConcatCols(a, b) => {
                let ac = nodes[a.0].value.cols();
                if let Some(ga) = slot(nodes, grads, *a) {
                    for r in 0..g.rows() {
                        for (o, v) in ga.row_mut(r).iter_mut().zip(&g.row(r)[..ac]) {
                            *o += v;
                        }
                    }
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    for r in 0..g.rows() {
                        for (o, v) in gb.row_mut(r).iter_mut().zip(&g.row(r)[ac..]) {
                            *o += v;
                        }
                    }
                }
            }
            Op::Row(a, row) => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    for (o, v) in ga.row_mut(*row).iter_mut().zip(g.data()) {
                        *o += v;
                    }
                }
            }
            Op::Square(a) => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    for ((o, x), gv) in ga.data_mut().iter_mut().zip(nodes[a.0].value.data()).zip(g.data()) {
                        *o += 2.0 * x * gv;
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    let s = g.get(0, 0);
                    for o in ga.data_mut() {
                        *o += s;
                    }
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                label,
                probs,
            } => {
                if let Some(ga) = slot(nodes, grads, *logits) {
                    let s = g.get(0, 0);
                    for (k, (o, p)) in ga.data_mut().iter_mut().zip(probs).enumerate() {
                        let onehot = if k == *label { 1.0 } else { 0.0 };
                        *o += s * (p - onehot);
                    }
                }
            }
            Op::KlSoftmax {
                p_logits,
                q_logits,
                p,
                q,
            } => {
                let s = g.get(0, 0);
                let kl = node.value.get(0, 0);
                if let Some(ga) = slot(nodes, grads, *p_logits) {
                    let zp = nodes[p_logits.0].value.data();
                    let zq = nodes[q_logits.0].value.data();
                    let lp = log_sum_exp(zp);
                    let lq = log_sum_exp(zq);
                    for (k, o) in ga.data_mut().iter_mut().enumerate() {
                        let ratio = (zp[k] - lp) - (zq[k] - lq);
                        *o += s * p[k] * (ratio - kl);
                    }
                }
                if let Some(gb) = slot(nodes, grads, *q_logits) {
                    for (k, o) in gb.data_mut().iter_mut().enumerate() {
                        *o += s * (q[k] - p[k]);
                    }
                }
            }
            Op::BinaryCrossEntropy { logit, target } => {
                if let Some(gl) = slot(nodes, grads, *logit) {
                    let z = nodes[logit.0].value.get(0, 0);
                    gl.data_mut()[0] += g.get(0, 0) * (sigmoid(z) - target);
                }
            }
            Op::WeightedSum(terms) => {
                for &(v, w) in terms {
                    if let Some(gv) = slot(nodes, grads, v) {
                        gv.add_scaled(g, w);
                    }
                }
            }
        }
    }
}

fn slot<'a>(nodes: &[Node], grads: &'a mut [Option<Matrix>], v: Var) -> Option<&'a mut Matrix> {
    if !nodes[v.0].needs_grad {
        return None;
    }
    let (r, c) = nodes[v.0].value.shape();
    Some(grads[v.0].get_or_insert_with(|| Matrix::zeros(r, c)))
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_onehot() {
        let mut tape = Tape::new();
        let z = tape.leaf(m(&[&[0.3, -1.2, 2.0]]));
        let loss = tape.softmax_cross_entropy(z, 1).unwrap();
        let grads = tape.backward(loss).unwrap();
        let p = softmax(&[0.3, -1.2, 2.0]);
        let g = grads.wrt(z).unwrap();
        for k in 0..3 {
            let expected = p[k] - if k == 1 { 1.0 } else { 0.0 };
            assert!((g.get(0, k) - expected).abs() < 1e-15);
        }
        assert!((tape.scalar(loss) + p[1].ln()).abs() < 1e-12);
    }

    #[test]
    fn label_out_of_range_is_index_error() {
        let mut tape = Tape::new();
        let z = tape.leaf(Matrix::zeros(1, 25));
        assert!(matches!(
            tape.softmax_cross_entropy(z, 25),
            Err(NnError::Index { index: 25, len: 25 })
        ));
    }

    #[test]
    fn backward_visits_shared_subexpressions_once_each() {
        // f = sum((x*x) + (x*x)) with the product node reused: df/dx = 4x
        let mut tape = Tape::new();
        let x = tape.leaf(m(&[&[1.5, -2.0]]));
        let sq = tape.mul(x, x).unwrap();
        let twice = tape.add(sq, sq).unwrap();
        let s = tape.sum(twice);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[6.0, -8.0]);
    }

    #[test]
    fn inputs_receive_no_gradient() {
        let mut tape = Tape::new();
        let c = tape.input(m(&[&[2.0]]));
        let x = tape.leaf(m(&[&[3.0]]));
        let y = tape.mul(c, x).unwrap();
        let grads = tape.backward(y).unwrap();
        assert!(grads.wrt(c).is_none());
        assert_eq!(grads.wrt(x).unwrap().get(0, 0), 2.0);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Matrix::zeros(2, 2));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn bce_matches_log_form() {
        let mut tape = Tape::new();
        let z = tape.leaf(m(&[&[0.7]]));
        let loss = tape.binary_cross_entropy(z, 1.0).unwrap();
        let p = sigmoid(0.7);
        assert!((tape.scalar(loss) + p.ln()).abs() < 1e-15);
        let grads = tape.backward(loss).unwrap();
        assert!((grads.wrt(z).unwrap().get(0, 0) - (p - 1.0)).abs() < 1e-15);
        let far = tape.leaf(m(&[&[-800.0]]));
        let l2 = tape.binary_cross_entropy(far, 1.0).unwrap();
        assert!((tape.scalar(l2) - 800.0).abs() < 1e-9);
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(-1000.0), 0.0);
        assert_eq!(sigmoid(1000.0), 1.0);
        assert!((sigmoid(0.0) - 0.5).abs() < 1e-15);
    }
}
