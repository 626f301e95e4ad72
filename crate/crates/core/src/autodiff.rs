//! Reverse-mode differentiation over [`Matrix`] values.
//!
//! A [`Tape`] records every operation eagerly (the forward value is computed
//! on the spot) and [`Tape::backward`] walks the records in reverse to
//! accumulate gradients. Only the operations the reasoner, the denoiser and
//! the losses need are provided.

use crate::tensor::{dot, sigmoid, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How [`Tape::blend_rows`] mixes replay rows into the current rows.
#[derive(Clone, Copy, Debug)]
pub enum BlendWeight {
    /// `α·replay + (1-α)·current` with `α` read from a 1×1 node.
    Learned(Var),
    /// Same mixture with a constant `α`.
    Fixed(f64),
    /// `replay + current`.
    DirectSum,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Gather(Var, Vec<usize>),
    ScatterAdd(Var, Vec<usize>),
    RowScale(Var, Vec<f64>),
    ConcatCols(Var, Var),
    Blend {
        current: Var,
        replay: Matrix,
        rows: Vec<usize>,
        weight: BlendWeight,
    },
    LayerNorm {
        input: Var,
        inv_std: Vec<f64>,
    },
    GroupAttention {
        q: Var,
        k: Var,
        v: Var,
        group: usize,
        probs: Vec<f64>,
    },
    SoftmaxXent {
        logits: Var,
        labels: Vec<Vec<usize>>,
        probs: Matrix,
    },
    MseRows {
        input: Var,
        target: Matrix,
    },
}

struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros shaped like `like` when `v` did not
    /// influence the root.
    pub fn get_or_zeros(&self, v: Var, like: &Matrix) -> Matrix {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Matrix::zeros(like.rows(), like.cols()))
    }
}

const LN_EPS: f64 = 1e-5;

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

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.shape(), (1, 1));
        m[(0, 0)]
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::MatMul(a, b), ng)
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul_t(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::MatMulT(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Sub(a, b), ng)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Mul(a, b), ng)
    }

    /// Adds the 1×cols row `bias` to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!(self.shape(bias), (1, c), "bias shape mismatch");
        let mut value = self.value(a).clone();
        let b = self.value(bias).row(0).to_vec();
        for i in 0..r {
            for (x, y) in value.row_mut(i).iter_mut().zip(&b) {
                *x += y;
            }
        }
        let ng = self.ng(a) || self.ng(bias);
        self.push(value, Op::AddRow(a, bias), ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x * c);
        let ng = self.ng(a);
        self.push(value, Op::Scale(a, c), ng)
    }

    /// Multiplies `a` by the 1×1 node `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Var {
        assert_eq!(self.shape(s), (1, 1), "scale_by expects a scalar node");
        let c = self.scalar(s);
        let value = self.value(a).map(|x| x * c);
        let ng = self.ng(a) || self.ng(s);
        self.push(value, Op::ScaleBy(a, s), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        let ng = self.ng(a);
        self.push(value, Op::Tanh(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        let ng = self.ng(a);
        self.push(value, Op::Sigmoid(a), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0));
        let ng = self.ng(a);
        self.push(value, Op::Relu(a), ng)
    }

    pub fn gather_rows(&mut self, a: Var, idx: Vec<usize>) -> Var {
        let value = self.value(a).gather_rows(&idx);
        let ng = self.ng(a);
        self.push(value, Op::Gather(a, idx), ng)
    }

    /// `out[idx[i]] += a[i]` into a fresh `n_rows × cols` matrix.
    pub fn scatter_add_rows(&mut self, a: Var, idx: Vec<usize>, n_rows: usize) -> Var {
        let src = self.value(a);
        assert_eq!(src.rows(), idx.len(), "scatter index length mismatch");
        let mut value = Matrix::zeros(n_rows, src.cols());
        for (i, &dst) in idx.iter().enumerate() {
            for (x, y) in value.row_mut(dst).iter_mut().zip(src.row(i)) {
                *x += y;
            }
        }
        let ng = self.ng(a);
        self.push(value, Op::ScatterAdd(a, idx), ng)
    }

    /// Scales row `i` of `a` by the constant `coeffs[i]`.
    pub fn row_scale(&mut self, a: Var, coeffs: Vec<f64>) -> Var {
        let mut value = self.value(a).clone();
        assert_eq!(value.rows(), coeffs.len(), "row_scale length mismatch");
        for (i, &c) in coeffs.iter().enumerate() {
            for x in value.row_mut(i) {
                *x *= c;
            }
        }
        let ng = self.ng(a);
        self.push(value, Op::RowScale(a, coeffs), ng)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (ra, ca) = self.shape(a);
        let (rb, cb) = self.shape(b);
        assert_eq!(ra, rb, "concat row mismatch");
        let mut value = Matrix::zeros(ra, ca + cb);
        for i in 0..ra {
            value.row_mut(i)[..ca].copy_from_slice(self.value(a).row(i));
            value.row_mut(i)[ca..].copy_from_slice(self.value(b).row(i));
        }
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::ConcatCols(a, b), ng)
    }

    /// Replaces the listed rows of `current` with a mixture of the matching
    /// rows of `replay` (one replay row per listed row, in order). Rows not
    /// listed are copied unchanged. `rows` must be distinct.
    pub fn blend_rows(
        &mut self,
        current: Var,
        replay: Matrix,
        rows: Vec<usize>,
        weight: BlendWeight,
    ) -> Var {
        let cur = self.value(current);
        assert_eq!(replay.rows(), rows.len(), "one replay row per target row");
        assert_eq!(replay.cols(), cur.cols(), "replay width mismatch");
        let mut value = cur.clone();
        let alpha = match weight {
            BlendWeight::Learned(a) => Some(self.scalar(a)),
            BlendWeight::Fixed(a) => Some(a),
            BlendWeight::DirectSum => None,
        };
        for (k, &e) in rows.iter().enumerate() {
            let rep = replay.row(k);
            let out = value.row_mut(e);
            match alpha {
                Some(a) if a == 0.0 => {}
                Some(a) if a == 1.0 => out.copy_from_slice(rep),
                Some(a) => {
                    for (o, &r) in out.iter_mut().zip(rep) {
                        *o = a * r + (1.0 - a) * *o;
                    }
                }
                None => {
                    for (o, &r) in out.iter_mut().zip(rep) {
                        *o += r;
                    }
                }
            }
        }
        let ng = self.ng(current)
            || matches!(weight, BlendWeight::Learned(a) if self.ng(a));
        self.push(
            value,
            Op::Blend {
                current,
                replay,
                rows,
                weight,
            },
            ng,
        )
    }

    /// Row-wise normalization to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let (r, c) = x.shape();
        let mut value = Matrix::zeros(r, c);
        let mut inv_std = Vec::with_capacity(r);
        for i in 0..r {
            let row = x.row(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            for (o, v) in value.row_mut(i).iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
            inv_std.push(is);
        }
        let ng = self.ng(a);
        self.push(value, Op::LayerNorm { input: a, inv_std }, ng)
    }

    /// Scaled dot-product self-attention within consecutive blocks of
    /// `group` rows (one block per sequence).
    pub fn group_attention(&mut self, q: Var, k: Var, v: Var, group: usize) -> Var {
        let (qm, km, vm) = (self.value(q), self.value(k), self.value(v));
        let (r, c) = qm.shape();
        assert!(group > 0 && r % group == 0, "rows must be a multiple of group");
        assert_eq!(km.shape(), (r, c));
        assert_eq!(vm.rows(), r);
        let scale = 1.0 / (c as f64).sqrt();
        let mut probs = vec![0.0; r * group];
        let mut value = Matrix::zeros(r, vm.cols());
        for g in 0..r / group {
            let base = g * group;
            for i in 0..group {
                let p = &mut probs[(base + i) * group..(base + i + 1) * group];
                for (j, pj) in p.iter_mut().enumerate() {
                    *pj = dot(qm.row(base + i), km.row(base + j)) * scale;
                }
                crate::tensor::softmax_in_place(p);
                let out = value.row_mut(base + i);
                for (j, &pj) in p.iter().enumerate() {
                    for (o, &vv) in out.iter_mut().zip(vm.row(base + j)) {
                        *o += pj * vv;
                    }
                }
            }
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        self.push(
            value,
            Op::GroupAttention {
                q,
                k,
                v,
                group,
                probs,
            },
            ng,
        )
    }

    /// Mean over rows of `-Σ_{e ∈ labels[i]} log softmax(logits_i)_e`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: Vec<Vec<usize>>) -> Var {
        let lm = self.value(logits);
        let (r, c) = lm.shape();
        assert_eq!(labels.len(), r, "one label set per row");
        let mut probs = lm.clone();
        let mut total = 0.0;
        for (i, lab) in labels.iter().enumerate() {
            let lse = crate::tensor::log_sum_exp(lm.row(i));
            for &e in lab {
                assert!(e < c, "label out of range");
                total += lse - lm[(i, e)];
            }
            for p in probs.row_mut(i) {
                *p = (*p - lse).exp();
            }
        }
        let value = Matrix::scalar(if r == 0 { 0.0 } else { total / r as f64 });
        let ng = self.ng(logits);
        self.push(
            value,
            Op::SoftmaxXent {
                logits,
                labels,
                probs,
            },
            ng,
        )
    }

    /// Mean over rows of the squared L2 distance to `target`.
    pub fn mse_rows(&mut self, input: Var, target: Matrix) -> Var {
        let x = self.value(input);
        assert_eq!(x.shape(), target.shape(), "mse shape mismatch");
        let r = x.rows().max(1);
        let total: f64 = x
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        let value = Matrix::scalar(total / r as f64);
        let ng = self.ng(input);
        self.push(value, Op::MseRows { input, target }, ng)
    }

    /// Gradients of the 1×1 node `root` with respect to every node.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.shape(root), (1, 1), "backward root must be scalar");
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Matrix::scalar(1.0));
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn acc(&self, grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, g: &Matrix, grads: &mut [Option<Matrix>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.ng(*a) {
                    self.acc(grads, *a, g.matmul_t(self.value(*b)));
                }
                if self.ng(*b) {
                    self.acc(grads, *b, self.value(*a).t_matmul(g));
                }
            }
            Op::MatMulT(a, b) => {
                if self.ng(*a) {
                    self.acc(grads, *a, g.matmul(self.value(*b)));
                }
                if self.ng(*b) {
                    self.acc(grads, *b, g.t_matmul(self.value(*a)));
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    self.acc(grads, *a, g.zip_map(self.value(*b), |x, y| x * y));
                }
                if self.ng(*b) {
                    self.acc(grads, *b, g.zip_map(self.value(*a), |x, y| x * y));
                }
            }
            Op::AddRow(a, bias) => {
                self.acc(grads, *a, g.clone());
                if self.ng(*bias) {
                    let mut gb = Matrix::zeros(1, g.cols());
                    for i in 0..g.rows() {
                        for (x, y) in gb.row_mut(0).iter_mut().zip(g.row(i)) {
                            *x += y;
                        }
                    }
                    self.acc(grads, *bias, gb);
                }
            }
            Op::Scale(a, c) => self.acc(grads, *a, g.map(|x| x * c)),
            Op::ScaleBy(a, s) => {
                let c = self.scalar(*s);
                if self.ng(*a) {
                    self.acc(grads, *a, g.map(|x| x * c));
                }
                if self.ng(*s) {
                    let d = dot(g.data(), self.value(*a).data());
                    self.acc(grads, *s, Matrix::scalar(d));
                }
            }
            Op::Tanh(a) => {
                self.acc(grads, *a, g.zip_map(&node.value, |x, y| x * (1.0 - y * y)));
            }
            Op::Sigmoid(a) => {
                self.acc(grads, *a, g.zip_map(&node.value, |x, y| x * y * (1.0 - y)));
            }
            Op::Relu(a) => {
                let ga = g.zip_map(self.value(*a), |x, y| if y > 0.0 { x } else { 0.0 });
                self.acc(grads, *a, ga);
            }
            Op::Gather(a, idx) => {
                let (r, c) = self.shape(*a);
                let mut ga = Matrix::zeros(r, c);
                for (i, &src) in idx.iter().enumerate() {
                    for (x, y) in ga.row_mut(src).iter_mut().zip(g.row(i)) {
                        *x += y;
                    }
                }
                self.acc(grads, *a, ga);
            }
            Op::ScatterAdd(a, idx) => {
                self.acc(grads, *a, g.gather_rows(idx));
            }
            Op::RowScale(a, coeffs) => {
                let mut ga = g.clone();
                for (i, &c) in coeffs.iter().enumerate() {
                    for x in ga.row_mut(i) {
                        *x *= c;
                    }
                }
                self.acc(grads, *a, ga);
            }
            Op::ConcatCols(a, b) => {
                let ca = self.shape(*a).1;
                let (r, c) = g.shape();
                let mut ga = Matrix::zeros(r, ca);
                let mut gb = Matrix::zeros(r, c - ca);
                for i in 0..r {
                    ga.row_mut(i).copy_from_slice(&g.row(i)[..ca]);
                    gb.row_mut(i).copy_from_slice(&g.row(i)[ca..]);
                }
                self.acc(grads, *a, ga);
                self.acc(grads, *b, gb);
            }
            Op::Blend {
                current,
                replay,
                rows,
                weight,
            } => {
                let alpha = match weight {
                    BlendWeight::Learned(a) => Some(self.scalar(*a)),
                    BlendWeight::Fixed(a) => Some(*a),
                    BlendWeight::DirectSum => None,
                };
                if self.ng(*current) {
                    let mut gc = g.clone();
                    if let Some(a) = alpha {
                        for &e in rows {
                            for x in gc.row_mut(e) {
                                *x *= 1.0 - a;
                            }
                        }
                    }
                    self.acc(grads, *current, gc);
                }
                if let BlendWeight::Learned(av) = weight {
                    if self.ng(*av) {
                        let cur = self.value(*current);
                        let mut d = 0.0;
                        for (k, &e) in rows.iter().enumerate() {
                            for ((gg, r), c) in g.row(e).iter().zip(replay.row(k)).zip(cur.row(e)) {
                                d += gg * (r - c);
                            }
                        }
                        self.acc(grads, *av, Matrix::scalar(d));
                    }
                }
            }
            Op::LayerNorm { input, inv_std } => {
                let y = &node.value;
                let (r, c) = y.shape();
                let mut ga = Matrix::zeros(r, c);
                for i in 0..r {
                    let gy = g.row(i);
                    let yr = y.row(i);
                    let mean_g = gy.iter().sum::<f64>() / c as f64;
                    let mean_gy = dot(gy, yr) / c as f64;
                    for ((o, &gv), &yv) in ga.row_mut(i).iter_mut().zip(gy).zip(yr) {
                        *o = inv_std[i] * (gv - mean_g - yv * mean_gy);
                    }
                }
                self.acc(grads, *input, ga);
            }
            Op::GroupAttention {
                q,
                k,
                v,
                group,
                probs,
            } => {
                let (qm, km, vm) = (self.value(*q), self.value(*k), self.value(*v));
                let (r, c) = qm.shape();
                let scale = 1.0 / (c as f64).sqrt();
                let mut gq = Matrix::zeros(r, c);
                let mut gk = Matrix::zeros(r, c);
                let mut gv = Matrix::zeros(r, vm.cols());
                let group = *group;
                let mut dp = vec![0.0; group];
                for gi in 0..r / group {
                    let base = gi * group;
                    for i in 0..group {
                        let p = &probs[(base + i) * group..(base + i + 1) * group];
                        let go = g.row(base + i);
                        for j in 0..group {
                            dp[j] = dot(go, vm.row(base + j));
                            for (x, y) in gv.row_mut(base + j).iter_mut().zip(go) {
                                *x += p[j] * y;
                            }
                        }
                        let s: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
                        for j in 0..group {
                            let ds = p[j] * (dp[j] - s) * scale;
                            if ds == 0.0 {
                                continue;
                            }
                            for (x, y) in gq.row_mut(base + i).iter_mut().zip(km.row(base + j)) {
                                *x += ds * y;
                            }
                            for (x, y) in gk.row_mut(base + j).iter_mut().zip(qm.row(base + i)) {
                                *x += ds * y;
                            }
                        }
                    }
                }
                self.acc(grads, *q, gq);
                self.acc(grads, *k, gk);
                self.acc(grads, *v, gv);
            }
            Op::SoftmaxXent {
                logits,
                labels,
                probs,
            } => {
                let gs = g[(0, 0)];
                let r = probs.rows().max(1) as f64;
                let mut gl = probs.clone();
                for (i, lab) in labels.iter().enumerate() {
                    let n = lab.len() as f64;
                    for x in gl.row_mut(i) {
                        *x *= n;
                    }
                    for &e in lab {
                        gl[(i, e)] -= 1.0;
                    }
                }
                let f = gs / r;
                self.acc(grads, *logits, gl.map(|x| x * f));
            }
            Op::MseRows { input, target } => {
                let r = self.shape(*input).0.max(1) as f64;
                let f = 2.0 * g[(0, 0)] / r;
                let gi = self.value(*input).zip_map(target, |a, b| f * (a - b));
                self.acc(grads, *input, gi);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    /// Central finite differences of `f` around every entry of `x`.
    fn fd_grad(x: &Matrix, f: &dyn Fn(&Matrix) -> f64) -> Matrix {
        let h = 1e-5;
        let mut g = Matrix::zeros(x.rows(), x.cols());
        for i in 0..x.data().len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            g.data_mut()[i] = (f(&xp) - f(&xm)) / (2.0 * h);
        }
        g
    }

    fn check(x: Matrix, build: impl Fn(&mut Tape, Var) -> Var) {
        let f = |m: &Matrix| {
            let mut t = Tape::new();
            let v = t.param(m.clone());
            let out = build(&mut t, v);
            t.scalar(out)
        };
        let mut t = Tape::new();
        let v = t.param(x.clone());
        let out = build(&mut t, v);
        let g = t.backward(out).get_or_zeros(v, &x);
        let fd = fd_grad(&x, &f);
        let err = g.max_abs_diff(&fd);
        assert!(err < 1e-6, "gradient mismatch {err}\n{g:?}\n{fd:?}");
    }

    fn rand_m(r: usize, c: usize, seed: u64) -> Matrix {
        Matrix::gaussian(r, c, 1.0, &mut rng::stream(seed, &[]))
    }

    fn sum_sq(t: &mut Tape, v: Var) -> Var {
        let (r, c) = t.shape(v);
        t.mse_rows(v, Matrix::filled(r, c, 0.3))
    }

    #[test]
    fn matmul_and_bias() {
        let w = rand_m(3, 4, 1);
        let b = rand_m(1, 4, 2);
        check(rand_m(5, 3, 3), |t, x| {
            let wv = t.constant(w.clone());
            let bv = t.constant(b.clone());
            let y = t.matmul(x, wv);
            let y = t.add_row(y, bv);
            let y = t.tanh(y);
            sum_sq(t, y)
        });
        let a = rand_m(5, 3, 4);
        check(rand_m(4, 3, 5), |t, x| {
            let av = t.constant(a.clone());
            let y = t.matmul_t(av, x);
            let y = t.sigmoid(y);
            sum_sq(t, y)
        });
    }

    #[test]
    fn gather_scatter_rowscale() {
        check(rand_m(4, 3, 6), |t, x| {
            let g = t.gather_rows(x, vec![0, 2, 2, 3, 1]);
            let s = t.scatter_add_rows(g, vec![1, 1, 0, 4, 2], 6);
            let s = t.row_scale(s, vec![0.5, 1.0, 2.0, 0.0, -1.0, 3.0]);
            let r = t.relu(s);
            let c = t.concat_cols(r, s);
            sum_sq(t, c)
        });
    }

    #[test]
    fn layer_norm_and_attention() {
        check(rand_m(6, 4, 7), |t, x| {
            let n = t.layer_norm(x);
            let y = t.mul(n, x);
            sum_sq(t, y)
        });
        let k = rand_m(6, 4, 8);
        let v = rand_m(6, 4, 9);
        check(rand_m(6, 4, 10), |t, x| {
            let kv = t.constant(k.clone());
            let vv = t.constant(v.clone());
            let o = t.group_attention(x, kv, vv, 3);
            sum_sq(t, o)
        });
        check(rand_m(6, 4, 11), |t, x| {
            let o = t.group_attention(x, x, x, 3);
            sum_sq(t, o)
        });
    }

    #[test]
    fn cross_entropy_and_scale_by() {
        check(rand_m(3, 5, 12), |t, x| {
            t.softmax_cross_entropy(x, vec![vec![1], vec![0, 4], vec![2]])
        });
        let a = rand_m(3, 2, 13);
        check(rand_m(1, 1, 14), |t, s| {
            let av = t.constant(a.clone());
            let y = t.scale_by(av, s);
            let y = t.sub(y, av);
            sum_sq(t, y)
        });
    }

    #[test]
    fn blend_gradients() {
        let replay = rand_m(2, 3, 15);
        check(rand_m(4, 3, 16), |t, x| {
            let logit = t.constant(Matrix::scalar(0.3));
            let alpha = t.sigmoid(logit);
            let y = t.blend_rows(x, replay.clone(), vec![3, 1], BlendWeight::Learned(alpha));
            sum_sq(t, y)
        });
        let cur = rand_m(4, 3, 17);
        check(Matrix::scalar(-0.4), |t, logit| {
            let alpha = t.sigmoid(logit);
            let c = t.constant(cur.clone());
            let y = t.blend_rows(c, replay.clone(), vec![0, 2], BlendWeight::Learned(alpha));
            sum_sq(t, y)
        });
        check(rand_m(4, 3, 18), |t, x| {
            let y = t.blend_rows(x, replay.clone(), vec![2, 0], BlendWeight::DirectSum);
            sum_sq(t, y)
        });
    }

    #[test]
    fn fixed_blend_boundaries_are_exact() {
        let mut t = Tape::new();
        let cur = t.constant(rand_m(3, 2, 19));
        let rep = rand_m(1, 2, 20);
        let zero = t.blend_rows(cur, rep.clone(), vec![1], BlendWeight::Fixed(0.0));
        assert_eq!(t.value(zero), t.value(cur));
        let one = t.blend_rows(cur, rep.clone(), vec![1], BlendWeight::Fixed(1.0));
        assert_eq!(t.value(one).row(1), rep.row(0));
        assert_eq!(t.value(one).row(0), t.value(cur).row(0));
    }
}
