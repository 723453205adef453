//! Define-by-run tape for reverse-mode differentiation.
//!
//! Every forward pass builds a fresh [`Tape`]. Operations append nodes whose
//! operands always precede them, so walking the node list backwards is a
//! valid reverse topological order.

use std::ops::Range;

use crate::error::{Error, Result};
use crate::scalar::{ordered_sum, Scalar};

use super::tensor::{gemm, gemm_nt, gemm_tn, Tensor};

/// Rows whose Euclidean norm falls below this are rejected by `l2_normalize`.
pub const NORM_FLOOR: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Batch statistics for batch normalization.
#[derive(Clone, Copy, Debug)]
pub enum BnMode<'a> {
    /// Normalize each slice of the batch with its own mean and biased variance.
    /// The slices must partition `0..N`.
    Train(&'a [Range<usize>]),
    /// Use the running statistics only.
    Eval,
}

/// Running statistics and constants of one batch-norm layer.
///
/// The learnable scale (`gamma`) and shift (`beta`) are ordinary parameters
/// passed to [`Tape::batch_norm`] as variables.
#[derive(Clone, Debug, PartialEq)]
pub struct BnState<T> {
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub momentum: T,
    pub eps: T,
}

impl<T: Scalar> BnState<T> {
    pub const DEFAULT_EPS: f64 = 1e-5;
    pub const DEFAULT_MOMENTUM: f64 = 0.1;

    pub fn new(channels: usize) -> Self {
        Self {
            running_mean: Tensor::zeros(vec![channels]),
            running_var: Tensor::full(vec![channels], T::one()),
            momentum: T::lit(Self::DEFAULT_MOMENTUM),
            eps: T::lit(Self::DEFAULT_EPS),
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    pub fn check(&self) -> Result<()> {
        if let Some((c, v)) = self
            .running_var
            .data()
            .iter()
            .enumerate()
            .find(|(_, v)| !(**v >= T::zero()))
        {
            return Err(Error::Corruption(format!("running_var[{c}] = {v}")));
        }
        Ok(())
    }

    /// Fold the per-slice statistics of one train-mode pass into the running
    /// averages: slice means are averaged, slice variances get the unbiased
    /// correction before averaging.
    pub fn update_running(&mut self, stats: &ShardStats<T>) {
        let slices = stats.slices.len();
        let c = self.channels();
        let w = T::lit(1.0 / slices as f64);
        for ch in 0..c {
            let mut mean = T::zero();
            let mut var = T::zero();
            for (s, range) in stats.slices.iter().enumerate() {
                let m = (range.len() * stats.spatial) as f64;
                mean += stats.mean[s * c + ch];
                var += stats.var[s * c + ch] * T::lit(m / (m - 1.0));
            }
            let mom = self.momentum;
            let rm = &mut self.running_mean.data_mut()[ch];
            *rm = (T::one() - mom) * *rm + mom * mean * w;
            let rv = &mut self.running_var.data_mut()[ch];
            *rv = (T::one() - mom) * *rv + mom * var * w;
        }
    }
}

/// Per-slice statistics recorded by a train-mode batch-norm node.
#[derive(Clone, Debug)]
pub struct ShardStats<T> {
    pub slices: Vec<Range<usize>>,
    pub spatial: usize,
    /// `slices × channels`, row-major.
    pub mean: Vec<T>,
    /// Biased variance, `slices × channels`.
    pub var: Vec<T>,
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    BatchedDot(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Sum(Var),
    Reshape(Var),
    GatherRows(Var, Vec<usize>),
    ConcatCols(Vec<Var>),
    Conv2d {
        x: Var,
        w: Var,
        stride: usize,
        padding: usize,
    },
    GlobalAvgPool(Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        x_hat: Vec<T>,
        /// `slices × channels` for train mode, `channels` for eval mode.
        inv_std: Vec<T>,
        stats: Option<ShardStats<T>>,
        spatial: usize,
    },
    L2Normalize {
        x: Var,
        norms: Vec<T>,
    },
    SoftmaxXent {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    label: Option<String>,
}

/// Ordered record of one forward pass.
#[derive(Clone, Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    labels: Vec<Option<String>>,
    visit_order: Vec<usize>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Labeled leaves that received a gradient, with the gradient's L2 norm.
    pub fn recipients(&self) -> Vec<(&str, T)> {
        self.labels
            .iter()
            .zip(&self.grads)
            .filter_map(|(l, g)| Some((l.as_deref()?, g.as_ref()?.sq_norm().sqrt())))
            .collect()
    }

    /// Node indices in the order backward processed them.
    pub fn visit_order(&self) -> &[usize] {
        &self.visit_order
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn label(&self, v: Var) -> Option<&str> {
        self.nodes[v.0].label.as_deref()
    }

    /// Operand handles of a node (empty for leaves).
    pub fn operands(&self, v: Var) -> Vec<Var> {
        op_operands(&self.nodes[v.0].op)
    }

    /// Per-slice statistics recorded by a train-mode batch-norm node.
    pub fn bn_stats(&self, v: Var) -> Option<&ShardStats<T>> {
        match &self.nodes[v.0].op {
            Op::BatchNorm { stats, .. } => stats.as_ref(),
            _ => None,
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let requires_grad = op_operands(&op).iter().any(|o| self.nodes[o.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            label: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf. `label` names the recipient in gradient audits.
    pub fn param(&mut self, label: impl Into<String>, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
            label: Some(label.into()),
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
            label: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Labeled leaf that never receives a gradient (frozen parameters).
    pub fn frozen(&mut self, label: impl Into<String>, value: Tensor<T>) -> Var {
        let v = self.constant(value);
        self.nodes[v.0].label = Some(label.into());
        v
    }

    /// Copy of `v` cut off from the graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", sa, sb));
        }
        let (m, p, n) = (sa[0], sa[1], sb[1]);
        let out = gemm(self.value(a).data(), self.value(b).data(), m, p, n);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b)))
    }

    /// `a · bᵀ` for `a: M×P`, `b: N×P`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::dim("matmul_nt", sa, sb));
        }
        let (m, p, n) = (sa[0], sa[1], sb[0]);
        let out = gemm_nt(self.value(a).data(), self.value(b).data(), m, p, n);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMulNt(a, b)))
    }

    /// Row-wise dot product: `N×C, N×C → N×1`.
    pub fn batched_dot(&mut self, q: Var, k: Var) -> Result<Var> {
        let (sq, sk) = (self.value(q).shape(), self.value(k).shape());
        if sq.len() != 2 || sq != sk {
            return Err(Error::dim("batched_dot", sq, sk));
        }
        let (qv, kv) = (self.value(q), self.value(k));
        let out = (0..sq[0])
            .map(|i| ordered_sum(qv.row(i).iter().zip(kv.row(i)).map(|(&a, &b)| a * b)))
            .collect();
        let n = sq[0];
        Ok(self.push(Tensor::new(vec![n, 1], out)?, Op::BatchedDot(q, k)))
    }

    /// `x: N×Q` plus a bias row `b: Q` broadcast over rows.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (self.value(x).shape(), self.value(b).shape());
        if sx.len() != 2 || sb.len() != 1 || sx[1] != sb[0] {
            return Err(Error::dim("add_bias", sx, sb));
        }
        let bias = self.value(b).data().to_vec();
        let mut out = self.value(x).clone();
        for i in 0..sx[0] {
            for (o, &bv) in out.row_mut(i).iter_mut().zip(&bias) {
                *o += bv;
            }
        }
        Ok(self.push(out, Op::AddBias(x, b)))
    }

    /// `x·w + b` for `x: N×P`, `w: P×Q`, `b: Q`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let h = self.matmul(x, w)?;
        self.add_bias(h, b)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::dim("add", sa, sb));
        }
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        Ok(self.push(out, Op::Add(a, b)))
    }

    /// Elementwise product of equal shapes.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::dim("mul", sa, sb));
        }
        let bv = self.value(b).data();
        let mut out = self.value(a).clone();
        for (o, &v) in out.data_mut().iter_mut().zip(bv) {
            *o *= v;
        }
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let out = self.value(x).map(|v| v * s);
        self.push(out, Op::Scale(x, s))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(T::zero()));
        self.push(out, Op::Relu(x))
    }

    /// Sum of all elements as a one-element tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = ordered_sum(self.value(x).data().iter().copied());
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x)))
    }

    /// Flatten everything after the leading extent.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let shape = vec![t.rows(), t.row_len()];
        self.reshape(x, shape)
    }

    /// `out[i] = x[index[i]]` along the leading extent.
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let n = self.value(x).rows();
        if let Some(&bad) = index.iter().find(|&&i| i >= n) {
            return Err(Error::Index {
                target: bad,
                classes: n,
            });
        }
        let out = self.value(x).gather_rows(index);
        Ok(self.push(out, Op::GatherRows(x, index.to_vec())))
    }

    /// Concatenate matrices with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let n = self.value(parts[0]).rows();
        for &p in parts {
            let s = self.value(p).shape();
            if s.len() != 2 || s[0] != n {
                return Err(Error::dim("concat_cols", self.value(parts[0]).shape(), s));
            }
        }
        let width: usize = parts.iter().map(|&p| self.value(p).shape()[1]).sum();
        let mut out = Vec::with_capacity(n * width);
        for i in 0..n {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        Ok(self.push(Tensor::new(vec![n, width], out)?, Op::ConcatCols(parts.to_vec())))
    }

    /// Zero-padded cross-correlation, `x: N×Cin×H×W`, `w: Cout×Cin×kh×kw`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        let (sx, sw) = (self.value(x).shape().to_vec(), self.value(w).shape().to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] || stride == 0 {
            return Err(Error::dim("conv2d", &sx, &sw));
        }
        let g = ConvGeom::new(&sx, &sw, stride, padding)?;
        let (xv, wv) = (self.value(x).data(), self.value(w).data());
        let mut out = vec![T::zero(); g.n * g.cout * g.ho * g.wo];
        g.for_each_tap(|oi, xi, wi| out[oi] += xv[xi] * wv[wi]);
        let shape = vec![g.n, g.cout, g.ho, g.wo];
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Conv2d {
                x,
                w,
                stride,
                padding,
            },
        ))
    }

    /// `N×C×H×W → N×C` mean over spatial positions.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).shape().to_vec();
        if s.len() != 4 {
            return Err(Error::dim("global_avg_pool", &s, &[0, 0, 0, 0]));
        }
        let hw = s[2] * s[3];
        let inv = T::lit(1.0 / hw as f64);
        let xv = self.value(x).data();
        let out = xv.chunks(hw).map(|c| ordered_sum(c.iter().copied()) * inv).collect();
        Ok(self.push(Tensor::new(vec![s[0], s[1]], out)?, Op::GlobalAvgPool(x)))
    }

    /// Batch normalization over `N×C` or `N×C×H×W` activations.
    ///
    /// In train mode the per-slice statistics are recorded on the node; fold
    /// them into `state` with [`BnState::update_running`] (see [`Tape::bn_stats`]).
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        state: &BnState<T>,
        mode: BnMode<'_>,
    ) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        if shape.len() < 2 {
            return Err(Error::dim("batch_norm", &shape, &[0, state.channels()]));
        }
        let (n, c) = (shape[0], shape[1]);
        let spatial: usize = shape[2..].iter().product();
        if c != state.channels()
            || self.value(gamma).shape() != [c]
            || self.value(beta).shape() != [c]
            || state.running_var.shape() != [c]
        {
            return Err(Error::dim("batch_norm", &shape, self.value(gamma).shape()));
        }
        state.check()?;
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let eps = state.eps;
        let at = |i: usize, ch: usize| (i * c + ch) * spatial;

        let mut x_hat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        let (inv_std, stats) = match mode {
            BnMode::Train(slices) => {
                check_partition(slices, n)?;
                let mut means = vec![T::zero(); slices.len() * c];
                let mut vars = vec![T::zero(); slices.len() * c];
                let mut inv_std = vec![T::zero(); slices.len() * c];
                for (s, range) in slices.iter().enumerate() {
                    let m = T::lit((range.len() * spatial) as f64);
                    for ch in 0..c {
                        let mut sum = T::zero();
                        for i in range.clone() {
                            for &v in &xv[at(i, ch)..at(i, ch) + spatial] {
                                sum += v;
                            }
                        }
                        let mean = sum / m;
                        let mut sq = T::zero();
                        for i in range.clone() {
                            for &v in &xv[at(i, ch)..at(i, ch) + spatial] {
                                sq += (v - mean) * (v - mean);
                            }
                        }
                        let var = sq / m;
                        let istd = T::one() / (var + eps).sqrt();
                        for i in range.clone() {
                            for o in at(i, ch)..at(i, ch) + spatial {
                                x_hat[o] = (xv[o] - mean) * istd;
                                out[o] = gv[ch] * x_hat[o] + bv[ch];
                            }
                        }
                        means[s * c + ch] = mean;
                        vars[s * c + ch] = var;
                        inv_std[s * c + ch] = istd;
                    }
                }
                let stats = ShardStats {
                    slices: slices.to_vec(),
                    spatial,
                    mean: means,
                    var: vars,
                };
                (inv_std, Some(stats))
            }
            BnMode::Eval => {
                let rm = state.running_mean.data();
                let rv = state.running_var.data();
                let inv_std: Vec<T> = rv.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
                for i in 0..n {
                    for ch in 0..c {
                        for o in at(i, ch)..at(i, ch) + spatial {
                            x_hat[o] = (xv[o] - rm[ch]) * inv_std[ch];
                            out[o] = gv[ch] * x_hat[o] + bv[ch];
                        }
                    }
                }
                (inv_std, None)
            }
        };
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                x_hat,
                inv_std,
                stats,
                spatial,
            },
        ))
    }

    /// Divide every row by its Euclidean norm.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 2 {
            return Err(Error::dim("l2_normalize", xv.shape(), &[0, 0]));
        }
        let floor = T::lit(NORM_FLOOR);
        let mut norms = Vec::with_capacity(xv.rows());
        let mut out = xv.clone();
        for i in 0..xv.rows() {
            let norm = ordered_sum(xv.row(i).iter().map(|&v| v * v)).sqrt();
            if !norm.is_finite() {
                return Err(Error::Divergence(format!("l2_normalize input row {i} (norm {norm})")));
            }
            if norm < floor {
                return Err(Error::DegenerateFeature {
                    row: i,
                    norm: norm.as_f64(),
                    floor: NORM_FLOOR,
                });
            }
            for o in out.row_mut(i) {
                *o /= norm;
            }
            norms.push(norm);
        }
        Ok(self.push(out, Op::L2Normalize { x, norms }))
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        if lv.rank() != 2 || lv.rows() != targets.len() {
            return Err(Error::dim("softmax_cross_entropy", lv.shape(), &[targets.len()]));
        }
        let m = lv.shape()[1];
        if let Some(&t) = targets.iter().find(|&&t| t >= m) {
            return Err(Error::Index { target: t, classes: m });
        }
        let mut probs = Vec::with_capacity(lv.len());
        let mut total = T::zero();
        for (i, &t) in targets.iter().enumerate() {
            let row = lv.row(i);
            let arg = (0..row.len()).fold(0, |a, j| if row[j] > row[a] { j } else { a });
            let max = row[arg];
            let exps: Vec<T> = row.iter().map(|&v| (v - max).exp()).collect();
            let z = ordered_sum(exps.iter().copied());
            // ln z = ln(1 + rest); ln_1p keeps precision when the max dominates
            let rest = ordered_sum(exps.iter().enumerate().filter(|&(j, _)| j != arg).map(|(_, &e)| e));
            total += rest.ln_1p() - (row[t] - max);
            probs.extend(exps.iter().map(|&e| e / z));
        }
        let loss = total / T::lit(targets.len() as f64);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxXent {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        let mut visit_order = Vec::new();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape().to_vec(), T::one()));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            visit_order.push(i);
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let labels = self.nodes.iter().map(|n| n.label.clone()).collect();
        Ok(Gradients {
            grads,
            labels,
            visit_order,
        })
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        let acc = |v: Var, t: Tensor<T>, grads: &mut [Option<Tensor<T>>]| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(e) => e.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        let shaped = |v: Var, data: Vec<T>| {
            Tensor::new(self.value(v).shape().to_vec(), data).expect("gradient shape")
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.value(*a).shape(), self.value(*b).shape());
                let (m, p, n) = (sa[0], sa[1], sb[1]);
                if self.requires_grad(*a) {
                    let ga = gemm_nt(g.data(), self.value(*b).data(), m, n, p);
                    acc(*a, shaped(*a, ga), grads);
                }
                if self.requires_grad(*b) {
                    let gb = gemm_tn(self.value(*a).data(), g.data(), m, p, n);
                    acc(*b, shaped(*b, gb), grads);
                }
            }
            Op::MatMulNt(a, b) => {
                let (sa, sb) = (self.value(*a).shape(), self.value(*b).shape());
                let (m, p, n) = (sa[0], sa[1], sb[0]);
                if self.requires_grad(*a) {
                    let ga = gemm(g.data(), self.value(*b).data(), m, n, p);
                    acc(*a, shaped(*a, ga), grads);
                }
                if self.requires_grad(*b) {
                    let gb = gemm_tn(g.data(), self.value(*a).data(), m, n, p);
                    acc(*b, shaped(*b, gb), grads);
                }
            }
            Op::BatchedDot(q, k) => {
                let (qv, kv) = (self.value(*q), self.value(*k));
                let c = qv.shape()[1];
                let scale_rows = |src: &Tensor<T>| {
                    let mut out = src.clone();
                    for r in 0..src.rows() {
                        let gi = g.data()[r];
                        for v in &mut out.data_mut()[r * c..(r + 1) * c] {
                            *v *= gi;
                        }
                    }
                    out
                };
                if self.requires_grad(*q) {
                    acc(*q, scale_rows(kv), grads);
                }
                if self.requires_grad(*k) {
                    acc(*k, scale_rows(qv), grads);
                }
            }
            Op::AddBias(x, b) => {
                acc(*x, g.clone(), grads);
                if self.requires_grad(*b) {
                    let q = g.shape()[1];
                    let mut gb = vec![T::zero(); q];
                    for r in 0..g.rows() {
                        for (o, &v) in gb.iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    acc(*b, shaped(*b, gb), grads);
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone(), grads);
                acc(*b, g.clone(), grads);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.requires_grad(*a) {
                    let d = g.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
                    acc(*a, shaped(*a, d), grads);
                }
                if self.requires_grad(*b) {
                    let d = g.data().iter().zip(av.data()).map(|(&x, &y)| x * y).collect();
                    acc(*b, shaped(*b, d), grads);
                }
            }
            Op::Scale(x, s) => {
                let s = *s;
                acc(*x, g.map(|v| v * s), grads);
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                let d = g
                    .data()
                    .iter()
                    .zip(xv)
                    .map(|(&gv, &v)| if v > T::zero() { gv } else { T::zero() })
                    .collect();
                acc(*x, shaped(*x, d), grads);
            }
            Op::Sum(x) => {
                let g0 = g.data()[0];
                acc(*x, Tensor::full(self.value(*x).shape().to_vec(), g0), grads);
            }
            Op::Reshape(x) => {
                acc(*x, shaped(*x, g.data().to_vec()), grads);
            }
            Op::GatherRows(x, index) => {
                let src = self.value(*x);
                let mut d = Tensor::zeros(src.shape().to_vec());
                for (r, &i) in index.iter().enumerate() {
                    for (o, &v) in d.row_mut(i).iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                acc(*x, d, grads);
            }
            Op::ConcatCols(parts) => {
                let n = g.rows();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).shape()[1];
                    if self.requires_grad(p) {
                        let mut d = Vec::with_capacity(n * w);
                        for r in 0..n {
                            d.extend_from_slice(&g.row(r)[offset..offset + w]);
                        }
                        acc(p, shaped(p, d), grads);
                    }
                    offset += w;
                }
            }
            Op::Conv2d {
                x,
                w,
                stride,
                padding,
            } => {
                let (sx, sw) = (self.value(*x).shape(), self.value(*w).shape());
                let geom = ConvGeom::new(sx, sw, *stride, *padding).expect("validated in forward");
                let gv = g.data();
                if self.requires_grad(*x) {
                    let wv = self.value(*w).data();
                    let mut dx = vec![T::zero(); self.value(*x).len()];
                    geom.for_each_tap(|oi, xi, wi| dx[xi] += gv[oi] * wv[wi]);
                    acc(*x, shaped(*x, dx), grads);
                }
                if self.requires_grad(*w) {
                    let xv = self.value(*x).data();
                    let mut dw = vec![T::zero(); self.value(*w).len()];
                    geom.for_each_tap(|oi, xi, wi| dw[wi] += gv[oi] * xv[xi]);
                    acc(*w, shaped(*w, dw), grads);
                }
            }
            Op::GlobalAvgPool(x) => {
                let s = self.value(*x).shape();
                let hw = s[2] * s[3];
                let inv = T::lit(1.0 / hw as f64);
                let d = g
                    .data()
                    .iter()
                    .flat_map(|&v| std::iter::repeat(v * inv).take(hw))
                    .collect();
                acc(*x, shaped(*x, d), grads);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                x_hat,
                inv_std,
                stats,
                spatial,
            } => {
                let shape = self.value(*x).shape();
                let (n, c, sp) = (shape[0], shape[1], *spatial);
                let at = |i: usize, ch: usize| (i * c + ch) * sp;
                let gamma_v = self.value(*gamma).data();
                let gv = g.data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for i in 0..n {
                    for ch in 0..c {
                        for o in at(i, ch)..at(i, ch) + sp {
                            dgamma[ch] += gv[o] * x_hat[o];
                            dbeta[ch] += gv[o];
                        }
                    }
                }
                if self.requires_grad(*x) {
                    let mut dx = vec![T::zero(); gv.len()];
                    match stats {
                        Some(st) => {
                            for (s, range) in st.slices.iter().enumerate() {
                                let m = T::lit((range.len() * sp) as f64);
                                for ch in 0..c {
                                    let mut sum_dy = T::zero();
                                    let mut sum_dy_xh = T::zero();
                                    for i in range.clone() {
                                        for o in at(i, ch)..at(i, ch) + sp {
                                            sum_dy += gv[o];
                                            sum_dy_xh += gv[o] * x_hat[o];
                                        }
                                    }
                                    let k = gamma_v[ch] * inv_std[s * c + ch] / m;
                                    for i in range.clone() {
                                        for o in at(i, ch)..at(i, ch) + sp {
                                            dx[o] = k * (m * gv[o] - sum_dy - x_hat[o] * sum_dy_xh);
                                        }
                                    }
                                }
                            }
                        }
                        None => {
                            for i in 0..n {
                                for ch in 0..c {
                                    for o in at(i, ch)..at(i, ch) + sp {
                                        dx[o] = gv[o] * gamma_v[ch] * inv_std[ch];
                                    }
                                }
                            }
                        }
                    }
                    acc(*x, shaped(*x, dx), grads);
                }
                if self.requires_grad(*gamma) {
                    acc(*gamma, shaped(*gamma, dgamma), grads);
                }
                if self.requires_grad(*beta) {
                    acc(*beta, shaped(*beta, dbeta), grads);
                }
            }
            Op::L2Normalize { x, norms } => {
                let y = &node.value;
                let mut d = g.clone();
                for (r, &norm) in norms.iter().enumerate() {
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let dot = ordered_sum(yr.iter().zip(gr).map(|(&a, &b)| a * b));
                    for ((o, &yv), &gv) in d.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *o = (gv - yv * dot) / norm;
                    }
                }
                acc(*x, d, grads);
            }
            Op::SoftmaxXent {
                logits,
                targets,
                probs,
            } => {
                let m = self.value(*logits).shape()[1];
                let scale = g.data()[0] / T::lit(targets.len() as f64);
                let mut d = probs.clone();
                for (r, &t) in targets.iter().enumerate() {
                    d[r * m + t] -= T::one();
                }
                for v in &mut d {
                    *v *= scale;
                }
                acc(*logits, shaped(*logits, d), grads);
            }
        }
    }
}

fn op_operands<T>(op: &Op<T>) -> Vec<Var> {
    match op {
        Op::Leaf => vec![],
        Op::MatMul(a, b)
        | Op::MatMulNt(a, b)
        | Op::BatchedDot(a, b)
        | Op::AddBias(a, b)
        | Op::Add(a, b)
        | Op::Mul(a, b) => vec![*a, *b],
        Op::Scale(a, _)
        | Op::Relu(a)
        | Op::Sum(a)
        | Op::Reshape(a)
        | Op::GatherRows(a, _)
        | Op::GlobalAvgPool(a) => vec![*a],
        Op::ConcatCols(vs) => vs.clone(),
        Op::Conv2d { x, w, .. } => vec![*x, *w],
        Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
        Op::L2Normalize { x, .. } => vec![*x],
        Op::SoftmaxXent { logits, .. } => vec![*logits],
    }
}

fn check_partition(slices: &[Range<usize>], n: usize) -> Result<()> {
    let mut next = 0;
    for (s, r) in slices.iter().enumerate() {
        if r.start != next {
            return Err(Error::contract(format!(
                "shard slices must partition 0..{n}; slice {s} is {r:?}"
            )));
        }
        if r.len() < 2 {
            return Err(Error::DegenerateShard {
                shard: s,
                size: r.len(),
            });
        }
        next = r.end;
    }
    if next != n {
        return Err(Error::contract(format!("shard slices cover 0..{next}, batch has {n}")));
    }
    Ok(())
}

struct ConvGeom {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    padding: usize,
}

impl ConvGeom {
    fn new(sx: &[usize], sw: &[usize], stride: usize, padding: usize) -> Result<Self> {
        let (n, cin, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let (cout, kh, kw) = (sw[0], sw[2], sw[3]);
        if kh > h + 2 * padding || kw > w + 2 * padding {
            return Err(Error::dim("conv2d (kernel larger than padded input)", sx, sw));
        }
        Ok(Self {
            n,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            ho: (h + 2 * padding - kh) / stride + 1,
            wo: (w + 2 * padding - kw) / stride + 1,
            stride,
            padding,
        })
    }

    /// Calls `f(out_index, x_index, w_index)` for every in-bounds tap.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        for b in 0..self.n {
            for co in 0..self.cout {
                for oh in 0..self.ho {
                    for ow in 0..self.wo {
                        let oi = ((b * self.cout + co) * self.ho + oh) * self.wo + ow;
                        for ci in 0..self.cin {
                            for ki in 0..self.kh {
                                let ih = (oh * self.stride + ki) as isize - self.padding as isize;
                                if ih < 0 || ih >= self.h as isize {
                                    continue;
                                }
                                for kj in 0..self.kw {
                                    let iw = (ow * self.stride + kj) as isize - self.padding as isize;
                                    if iw < 0 || iw >= self.w as isize {
                                        continue;
                                    }
                                    let xi = ((b * self.cin + ci) * self.h + ih as usize) * self.w + iw as usize;
                                    let wi = ((co * self.cin + ci) * self.kh + ki) * self.kw + kj;
                                    f(oi, xi, wi);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}
