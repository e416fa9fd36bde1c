//! Tape-based reverse-mode differentiation over dense `f64` tensors.
//!
//! Operations are recorded in execution order, so every node's inputs
//! precede it and a single reverse sweep computes all gradients. Parameters
//! are borrowed from a [`ParamSet`] rather than copied onto the tape.

use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng as _;

use super::gemm::{gemm, Strided};
use super::params::{ParamGrads, ParamId, ParamSet};
use super::Tensor;
use crate::error::TensorError;
use crate::rng::Rng;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Running statistics of one batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BnState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BnState {
    pub fn new(features: usize) -> Self {
        BnState {
            running_mean: vec![0.0; features],
            running_var: vec![1.0; features],
        }
    }
}

/// Default batch-norm epsilon.
pub const BN_EPS: f64 = 1e-5;
/// Default weight of the current batch in the running averages.
pub const BN_MOMENTUM: f64 = 0.1;

/// Sparse set of `(target, source)` node pairs, each owning one weight
/// matrix in a pair bank.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairIndex {
    n: usize,
    pairs: Vec<(usize, usize)>,
    slot: Vec<Option<usize>>,
}

impl PairIndex {
    pub fn new(n: usize, pairs: Vec<(usize, usize)>) -> Self {
        let mut slot = vec![None; n * n];
        for (p, &(i, j)) in pairs.iter().enumerate() {
            assert!(i < n && j < n, "pair out of range");
            assert!(slot[i * n + j].is_none(), "duplicate pair");
            slot[i * n + j] = Some(p);
        }
        PairIndex { n, pairs, slot }
    }

    /// One pair `(i, i)` per node.
    pub fn diagonal(n: usize) -> Self {
        Self::new(n, (0..n).map(|i| (i, i)).collect())
    }

    pub fn num_nodes(&self) -> usize {
        self.n
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn slot(&self, i: usize, j: usize) -> Option<usize> {
        self.slot[i * self.n + j]
    }
}

#[derive(Clone, Copy, Debug)]
enum BinKind {
    Add,
    Sub,
    Mul,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Binary {
        kind: BinKind,
        a: Var,
        b: Var,
    },
    Scale(Var, f64),
    Tanh(Var),
    LeakyRelu(Var, f64),
    Abs(Var),
    Bmm {
        a: Var,
        b: Var,
        trans_b: bool,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Transpose(Var),
    Reshape(Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    SumAxis {
        x: Var,
        axis: usize,
        scale: f64,
    },
    SumAll(Var, f64),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        training: bool,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    Conv1d {
        x: Var,
        kernel: Var,
        stride: usize,
        dilation: usize,
    },
    PairAggregate {
        x: Var,
        graph: Option<Var>,
        bank: Var,
        index: Arc<PairIndex>,
    },
    SelectFrame {
        x: Var,
        frame: usize,
        frames: usize,
    },
}

#[derive(Debug)]
enum Value {
    Owned(Vec<f64>),
    Param(usize),
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Value,
    op: Op,
    requires_grad: bool,
}

/// Records operations for one forward pass and replays them backward.
pub struct Tape<'p> {
    params: Option<&'p ParamSet>,
    nodes: Vec<Node>,
    param_vars: HashMap<usize, Var>,
    leaf_grads: Vec<Option<Vec<f64>>>,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Tape {
            params: None,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            leaf_grads: Vec::new(),
        }
    }

    /// Tape that can read parameters from `params`.
    pub fn with_params(params: &'p ParamSet) -> Self {
        Tape {
            params: Some(params),
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), data.len());
        self.nodes.push(Node {
            shape,
            value: Value::Owned(data),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf holding `t`; gradients are collected when `requires_grad`.
    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    /// Leaf reading parameter `id`; repeated calls return the same node.
    /// Frozen parameters are recorded without gradient.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id.0) {
            return v;
        }
        let params = self.params.expect("tape has no parameter set");
        let p = params.get(id);
        self.nodes.push(Node {
            shape: p.value.shape().to_vec(),
            value: Value::Param(id.0),
            op: Op::Leaf,
            requires_grad: p.trainable,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id.0, v);
        v
    }

    pub fn value(&self, v: Var) -> &[f64] {
        match &self.nodes[v.0].value {
            Value::Owned(d) => d,
            Value::Param(ix) => self
                .params
                .expect("param node without parameter set")
                .get(ParamId(*ix))
                .value
                .data(),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.shape(v).to_vec(), self.value(v).to_vec()).expect("node shape")
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.leaf_grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Smallest `|x|` fed to a kinked op (LeakyReLU, abs) so far; infinite
    /// when there is none. Finite differences are only valid when this
    /// exceeds the step size.
    pub fn min_kink_distance(&self) -> f64 {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::LeakyRelu(x, _) | Op::Abs(x) => Some(x),
                _ => None,
            })
            .flat_map(|x| self.value(x).iter().map(|v| v.abs()))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.clear();
    }

    /// Gradients of every parameter leaf on this tape.
    pub fn param_grads(&self) -> ParamGrads {
        let n = self.params.map_or(0, ParamSet::len);
        let mut grads = vec![None; n];
        for (&pid, &v) in &self.param_vars {
            if let Some(g) = self.grad(v) {
                grads[pid] = Some(g.to_vec());
            }
        }
        ParamGrads { grads }
    }

    // ---------------------------------------------------------------------
    // elementwise

    fn binary(&mut self, kind: BinKind, a: Var, b: Var) -> Result<Var, TensorError> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let nb = numel(&sb);
        let ok = sa == sb || nb == 1 || (sb.len() < sa.len() && sa.ends_with(&sb));
        if !ok {
            let op = match kind {
                BinKind::Add => "add",
                BinKind::Sub => "sub",
                BinKind::Mul => "mul",
            };
            return Err(mismatch(op, &sa, &sb));
        }
        let (va, vb) = (self.value(a), self.value(b));
        let out: Vec<f64> = match kind {
            BinKind::Add => va.iter().enumerate().map(|(k, x)| x + vb[k % nb]).collect(),
            BinKind::Sub => va.iter().enumerate().map(|(k, x)| x - vb[k % nb]).collect(),
            BinKind::Mul => va.iter().enumerate().map(|(k, x)| x * vb[k % nb]).collect(),
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(sa, out, Op::Binary { kind, a, b }, rg))
    }

    /// `a + b`; `b` may be a scalar or broadcast over leading axes of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(BinKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(BinKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(BinKind::Mul, a, b)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).iter().map(|v| v * c).collect();
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), out, Op::Scale(x, c), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|v| v.tanh()).collect();
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), out, Op::Tanh(x), rg)
    }

    /// Leaky ReLU; the derivative at exactly zero is `alpha`.
    pub fn leaky_relu(&mut self, x: Var, alpha: f64) -> Var {
        let out = self
            .value(x)
            .iter()
            .map(|&v| if v > 0.0 { v } else { alpha * v })
            .collect();
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), out, Op::LeakyRelu(x, alpha), rg)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|v| v.abs()).collect();
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), out, Op::Abs(x), rg)
    }

    // ---------------------------------------------------------------------
    // linear algebra

    /// Batched product. `a` is `[m,k]` or `[B,m,k]`; `b` is `[k,n]` or
    /// `[B,k,n]` (`[n,k]` / `[B,n,k]` when `trans_b`). A rank-2 operand is
    /// shared across the batch.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var, TensorError> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let bad = || mismatch("matmul", &sa, &sb);
        if !(2..=3).contains(&sa.len()) || !(2..=3).contains(&sb.len()) {
            return Err(bad());
        }
        let ba = (sa.len() == 3).then(|| sa[0]);
        let bb = (sb.len() == 3).then(|| sb[0]);
        let batch = match (ba, bb) {
            (Some(x), Some(y)) if x != y => return Err(bad()),
            (Some(x), _) | (_, Some(x)) => Some(x),
            _ => None,
        };
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = if trans_b {
            (sb[sb.len() - 1], sb[sb.len() - 2])
        } else {
            (sb[sb.len() - 2], sb[sb.len() - 1])
        };
        if k != kb {
            return Err(bad());
        }
        let nb = batch.unwrap_or(1);
        let mut out = vec![0.0; nb * m * n];
        let (va, vb) = (self.value(a), self.value(b));
        for bi in 0..nb {
            let ao = if ba.is_some() { bi * m * k } else { 0 };
            let bo = if bb.is_some() { bi * k * n } else { 0 };
            let bv = if trans_b {
                Strided::transposed(bo, k)
            } else {
                Strided::row_major(bo, n)
            };
            gemm(
                m,
                k,
                n,
                1.0,
                va,
                Strided::row_major(ao, k),
                vb,
                bv,
                0.0,
                &mut out,
                Strided::row_major(bi * m * n, n),
            );
        }
        let shape = match batch {
            Some(bs) => vec![bs, m, n],
            None => vec![m, n],
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            shape,
            out,
            Op::Bmm {
                a,
                b,
                trans_b,
                batch: nb,
                m,
                k,
                n,
            },
            rg,
        ))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.bmm(a, b, false)
    }

    /// `a · bᵀ`, batched when either side has rank 3.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.bmm(a, b, true)
    }

    /// Swaps the last two axes of a rank-2 or rank-3 tensor.
    pub fn transpose(&mut self, x: Var) -> Result<Var, TensorError> {
        let s = self.shape(x).to_vec();
        if !(2..=3).contains(&s.len()) {
            return Err(TensorError::AxisOutOfRange { axis: 1, rank: s.len() });
        }
        let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
        let nb = numel(&s) / (r * c);
        let v = self.value(x);
        let mut out = vec![0.0; v.len()];
        for b in 0..nb {
            let o = b * r * c;
            for i in 0..r {
                for j in 0..c {
                    out[o + j * r + i] = v[o + i * c + j];
                }
            }
        }
        let mut shape = s.clone();
        let len = shape.len();
        shape.swap(len - 2, len - 1);
        let rg = self.rg(x);
        Ok(self.push(shape, out, Op::Transpose(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        if numel(shape) != numel(self.shape(x)) {
            return Err(mismatch("reshape", self.shape(x), shape));
        }
        let out = self.value(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(shape.to_vec(), out, Op::Reshape(x), rg))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var, TensorError> {
        let first = self.shape(*inputs.first().expect("concat of nothing")).to_vec();
        if axis >= first.len() {
            return Err(TensorError::AxisOutOfRange {
                axis,
                rank: first.len(),
            });
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let same_rest =
                s.len() == first.len() && s.iter().zip(&first).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !same_rest {
                return Err(mismatch("concat", &first, s));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let block = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.value(v)[o * block..(o + 1) * block]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(
            shape,
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    fn reduce_axis(&mut self, x: Var, axis: usize, mean: bool) -> Result<Var, TensorError> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(TensorError::AxisOutOfRange { axis, rank: s.len() });
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let d = s[axis];
        let scale = if mean { 1.0 / d as f64 } else { 1.0 };
        let v = self.value(x);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..d {
                let src = &v[(o * d + a) * inner..(o * d + a + 1) * inner];
                for (dst, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *dst += s;
                }
            }
        }
        if mean {
            out.iter_mut().for_each(|o| *o *= scale);
        }
        let mut shape: Vec<usize> = s
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != axis)
            .map(|(_, d)| *d)
            .collect();
        if shape.is_empty() {
            shape.push(1);
        }
        let rg = self.rg(x);
        Ok(self.push(shape, out, Op::SumAxis { x, axis, scale }, rg))
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        self.reduce_axis(x, axis, false)
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        self.reduce_axis(x, axis, true)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).iter().sum();
        let rg = self.rg(x);
        self.push(vec![1], vec![s], Op::SumAll(x, 1.0), rg)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s: f64 = self.value(x).iter().sum::<f64>() / n;
        let rg = self.rg(x);
        self.push(vec![1], vec![s], Op::SumAll(x, 1.0 / n), rg)
    }

    // ---------------------------------------------------------------------
    // layers

    /// Batch normalization over rows of `x` viewed as `[rows, F]`, where `F`
    /// is the length of `gamma`/`beta`. Training mode normalizes with the
    /// biased batch variance and folds the same statistics into the running
    /// averages, so a model evaluated on its own training batch reproduces
    /// the training-mode output once the averages settle.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        state: &mut BnState,
        training: bool,
        eps: f64,
        momentum: f64,
    ) -> Result<Var, TensorError> {
        let f = numel(self.shape(gamma));
        let total = numel(self.shape(x));
        if numel(self.shape(beta)) != f || f == 0 || !total.is_multiple_of(f) || state.running_mean.len() != f {
            return Err(mismatch("batch_norm", self.shape(x), self.shape(gamma)));
        }
        let rows = total / f;
        if training && rows < 2 {
            return Err(TensorError::BatchTooSmall(rows));
        }
        let v = self.value(x);
        let (mean, inv_std) = if training {
            let mut mean = vec![0.0; f];
            for r in 0..rows {
                for (m, x) in mean.iter_mut().zip(&v[r * f..(r + 1) * f]) {
                    *m += x;
                }
            }
            mean.iter_mut().for_each(|m| *m /= rows as f64);
            let mut var = vec![0.0; f];
            for r in 0..rows {
                for ((s, x), m) in var.iter_mut().zip(&v[r * f..(r + 1) * f]).zip(&mean) {
                    *s += (x - m) * (x - m);
                }
            }
            for c in 0..f {
                let biased = var[c] / rows as f64;
                state.running_mean[c] = (1.0 - momentum) * state.running_mean[c] + momentum * mean[c];
                state.running_var[c] = (1.0 - momentum) * state.running_var[c] + momentum * biased;
                var[c] = 1.0 / (biased + eps).sqrt();
            }
            (mean, var)
        } else {
            let inv = state.running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
            (state.running_mean.clone(), inv)
        };
        let (g, b) = (self.value(gamma), self.value(beta));
        let mut xhat = vec![0.0; total];
        let mut out = vec![0.0; total];
        for r in 0..rows {
            for c in 0..f {
                let ix = r * f + c;
                xhat[ix] = (v[ix] - mean[c]) * inv_std[c];
                out[ix] = g[c] * xhat[ix] + b[c];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            self.shape(x).to_vec(),
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                training,
            },
            rg,
        ))
    }

    /// Inverted dropout: survivors are scaled by `1/(1-p)`; identity when
    /// not training.
    pub fn dropout(&mut self, x: Var, p: f64, training: bool, rng: &mut Rng) -> Result<Var, TensorError> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::InvalidProbability(p));
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..numel(self.shape(x)))
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let out = self.value(x).iter().zip(&mask).map(|(v, m)| v * m).collect();
        let rg = self.rg(x);
        Ok(self.push(self.shape(x).to_vec(), out, Op::Dropout { x, mask }, rg))
    }

    /// Temporal convolution of `x: [B, T, N, C_in]` with
    /// `kernel: [C_out, C_in, F]`, independently per node. Zero padding keeps
    /// the window centred so the output has `ceil(T / stride)` frames.
    pub fn conv1d_temporal(&mut self, x: Var, kernel: Var, stride: usize, dilation: usize) -> Result<Var, TensorError> {
        let sx = self.shape(x).to_vec();
        let sk = self.shape(kernel).to_vec();
        if sx.len() != 4 || sk.len() != 3 || sk[1] != sx[3] || stride == 0 || dilation == 0 {
            return Err(mismatch("conv1d_temporal", &sx, &sk));
        }
        let (b, t, n, cin) = (sx[0], sx[1], sx[2], sx[3]);
        let (cout, f) = (sk[0], sk[2]);
        if f % 2 == 0 {
            return Err(TensorError::EvenKernel(f));
        }
        let span = dilation * (f - 1) + 1;
        if span > t {
            return Err(TensorError::KernelTooLarge { span, frames: t });
        }
        let t_out = t.div_ceil(stride);
        let mut out = vec![0.0; b * t_out * n * cout];
        let (vx, vk) = (self.value(x), self.value(kernel));
        for bi in 0..b {
            for to in 0..t_out {
                for (fi, ti) in conv_taps(to, stride, dilation, f, t) {
                    gemm(
                        n,
                        cin,
                        cout,
                        1.0,
                        vx,
                        Strided::row_major((bi * t + ti) * n * cin, cin),
                        vk,
                        Strided {
                            offset: fi,
                            row_stride: f,
                            col_stride: cin * f,
                        },
                        1.0,
                        &mut out,
                        Strided::row_major((bi * t_out + to) * n * cout, cout),
                    );
                }
            }
        }
        let rg = self.rg(x) || self.rg(kernel);
        Ok(self.push(
            vec![b, t_out, n, cout],
            out,
            Op::Conv1d {
                x,
                kernel,
                stride,
                dilation,
            },
            rg,
        ))
    }

    /// Locally connected aggregation: for every pair `(i, j)` in `index`,
    /// `out[b, i] += g[b?, i, j] * x[b, j] · W_p`, with `x: [B, N, C_in]`,
    /// `bank: [P, C_in, C_out]` and `graph` absent (coefficient 1), `[N, N]`
    /// or `[B, N, N]`. Graph entries outside `index` do not contribute.
    pub fn pair_aggregate(
        &mut self,
        x: Var,
        graph: Option<Var>,
        bank: Var,
        index: Arc<PairIndex>,
    ) -> Result<Var, TensorError> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(bank).to_vec();
        let n = index.num_nodes();
        if sx.len() != 3 || sx[1] != n || sw.len() != 3 || sw[0] != index.len() || sw[1] != sx[2] {
            return Err(mismatch("pair_aggregate", &sx, &sw));
        }
        let (b, cin, cout) = (sx[0], sx[2], sw[2]);
        if let Some(g) = graph {
            let sg = self.shape(g);
            if !(sg == [n, n] || sg == [b, n, n]) {
                return Err(mismatch("pair_aggregate graph", &sx, sg));
            }
        }
        let coef = GraphCoef::new(graph.map(|g| (self.value(g), self.shape(g).len() == 3)), n);
        let (vx, vw) = (self.value(x), self.value(bank));
        let mut out = vec![0.0; b * n * cout];
        let mut tmp = vec![0.0; b * cout];
        for (p, &(i, j)) in index.pairs().iter().enumerate() {
            gemm(
                b,
                cin,
                cout,
                1.0,
                vx,
                Strided {
                    offset: j * cin,
                    row_stride: n * cin,
                    col_stride: 1,
                },
                vw,
                Strided::row_major(p * cin * cout, cout),
                0.0,
                &mut tmp,
                Strided::row_major(0, cout),
            );
            for bi in 0..b {
                let c = coef.get(bi, i, j);
                if c == 0.0 {
                    continue;
                }
                let dst = &mut out[(bi * n + i) * cout..(bi * n + i + 1) * cout];
                for (d, s) in dst.iter_mut().zip(&tmp[bi * cout..(bi + 1) * cout]) {
                    *d += c * s;
                }
            }
        }
        let rg = self.rg(x) || self.rg(bank) || graph.is_some_and(|g| self.rg(g));
        Ok(self.push(vec![b, n, cout], out, Op::PairAggregate { x, graph, bank, index }, rg))
    }

    /// Frame `frame` of `x: [B, T, ...]`, giving `[B, ...]`.
    pub fn select_frame(&mut self, x: Var, frame: usize) -> Result<Var, TensorError> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 || frame >= s[1] {
            return Err(TensorError::AxisOutOfRange {
                axis: frame,
                rank: s.len(),
            });
        }
        let (b, t) = (s[0], s[1]);
        let inner: usize = s[2..].iter().product();
        let v = self.value(x);
        let mut out = Vec::with_capacity(b * inner);
        for bi in 0..b {
            let o = (bi * t + frame) * inner;
            out.extend_from_slice(&v[o..o + inner]);
        }
        let mut shape = vec![b];
        shape.extend_from_slice(&s[2..]);
        let rg = self.rg(x);
        Ok(self.push(shape, out, Op::SelectFrame { x, frame, frames: t }, rg))
    }

    // ---------------------------------------------------------------------
    // backward

    /// Reverse sweep from a scalar `loss`. Leaf gradients accumulate across
    /// calls until [`Tape::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if loss.0 >= self.nodes.len() {
            return Err(TensorError::DetachedFromTape(loss.0));
        }
        if numel(self.shape(loss)) != 1 {
            return Err(TensorError::NotScalar(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);
        if self.leaf_grads.len() < self.nodes.len() {
            self.leaf_grads.resize_with(self.nodes.len(), || None);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                match &mut self.leaf_grads[i] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
        }
        Ok(())
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.rg(v) {
            return None;
        }
        let len = numel(self.shape(v));
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Binary { kind, a, b } => {
                let (a, b) = (*a, *b);
                let nb = numel(self.shape(b));
                let (va, vb) = (self.value(a), self.value(b));
                if let Some(ga) = self.slot(grads, a) {
                    match kind {
                        BinKind::Add | BinKind::Sub => ga.iter_mut().zip(g).for_each(|(d, s)| *d += s),
                        BinKind::Mul => {
                            for (k, d) in ga.iter_mut().enumerate() {
                                *d += g[k] * vb[k % nb];
                            }
                        }
                    }
                }
                if let Some(gb) = self.slot(grads, b) {
                    for (k, gk) in g.iter().enumerate() {
                        gb[k % nb] += match kind {
                            BinKind::Add => *gk,
                            BinKind::Sub => -gk,
                            BinKind::Mul => gk * va[k],
                        };
                    }
                }
            }
            Op::Scale(x, c) => {
                if let Some(gx) = self.slot(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(d, s)| *d += c * s);
                }
            }
            Op::Tanh(x) => {
                let y = self.value(Var(i));
                if let Some(gx) = self.slot(grads, *x) {
                    for ((d, s), y) in gx.iter_mut().zip(g).zip(y) {
                        *d += s * (1.0 - y * y);
                    }
                }
            }
            Op::LeakyRelu(x, alpha) => {
                let vx = self.value(*x);
                if let Some(gx) = self.slot(grads, *x) {
                    for ((d, s), v) in gx.iter_mut().zip(g).zip(vx) {
                        *d += if *v > 0.0 { *s } else { alpha * s };
                    }
                }
            }
            Op::Abs(x) => {
                let vx = self.value(*x);
                if let Some(gx) = self.slot(grads, *x) {
                    for ((d, s), v) in gx.iter_mut().zip(g).zip(vx) {
                        let sign = if *v > 0.0 {
                            1.0
                        } else if *v < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        *d += s * sign;
                    }
                }
            }
            &Op::Bmm {
                a,
                b,
                trans_b,
                batch,
                m,
                k,
                n,
            } => {
                let a3 = self.shape(a).len() == 3;
                let b3 = self.shape(b).len() == 3;
                let (va, vb) = (self.value(a), self.value(b));
                if let Some(ga) = self.slot(grads, a) {
                    // dA = dC · Bᵀ  (or dC · B when B was used transposed)
                    for bi in 0..batch {
                        let bo = if b3 { bi * k * n } else { 0 };
                        let bv = if trans_b {
                            Strided::row_major(bo, k)
                        } else {
                            Strided::transposed(bo, n)
                        };
                        let ao = if a3 { bi * m * k } else { 0 };
                        gemm(
                            m,
                            n,
                            k,
                            1.0,
                            g,
                            Strided::row_major(bi * m * n, n),
                            vb,
                            bv,
                            1.0,
                            ga,
                            Strided::row_major(ao, k),
                        );
                    }
                }
                if let Some(gb) = self.slot(grads, b) {
                    for bi in 0..batch {
                        let ao = if a3 { bi * m * k } else { 0 };
                        let bo = if b3 { bi * k * n } else { 0 };
                        if trans_b {
                            // B is [n,k]: dB = dCᵀ · A
                            gemm(
                                n,
                                m,
                                k,
                                1.0,
                                g,
                                Strided::transposed(bi * m * n, n),
                                va,
                                Strided::row_major(ao, k),
                                1.0,
                                gb,
                                Strided::row_major(bo, k),
                            );
                        } else {
                            gemm(
                                k,
                                m,
                                n,
                                1.0,
                                va,
                                Strided::transposed(ao, k),
                                g,
                                Strided::row_major(bi * m * n, n),
                                1.0,
                                gb,
                                Strided::row_major(bo, n),
                            );
                        }
                    }
                }
            }
            Op::Transpose(x) => {
                let s = self.shape(*x);
                let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
                if let Some(gx) = self.slot(grads, *x) {
                    let nb = gx.len() / (r * c);
                    for b in 0..nb {
                        let o = b * r * c;
                        for i in 0..r {
                            for j in 0..c {
                                gx[o + i * c + j] += g[o + j * r + i];
                            }
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(d, s)| *d += s);
                }
            }
            Op::Concat { inputs, axis } => {
                let shape = &node.shape;
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for &v in inputs {
                    let block = self.shape(v)[*axis] * inner;
                    if let Some(gv) = self.slot(grads, v) {
                        for o in 0..outer {
                            let src = &g[o * total + offset..o * total + offset + block];
                            for (d, s) in gv[o * block..(o + 1) * block].iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                    offset += block;
                }
            }
            Op::SumAxis { x, axis, scale } => {
                let s = self.shape(*x).to_vec();
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                let d = s[*axis];
                if let Some(gx) = self.slot(grads, *x) {
                    for o in 0..outer {
                        for a in 0..d {
                            let dst = &mut gx[(o * d + a) * inner..(o * d + a + 1) * inner];
                            for (t, s) in dst.iter_mut().zip(&g[o * inner..(o + 1) * inner]) {
                                *t += scale * s;
                            }
                        }
                    }
                }
            }
            Op::SumAll(x, scale) => {
                if let Some(gx) = self.slot(grads, *x) {
                    let s = g[0] * scale;
                    gx.iter_mut().for_each(|d| *d += s);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                training,
            } => {
                let f = inv_std.len();
                let rows = g.len() / f;
                let vg = self.value(*gamma);
                let mut sum_g = vec![0.0; f];
                let mut sum_gx = vec![0.0; f];
                for r in 0..rows {
                    for c in 0..f {
                        sum_g[c] += g[r * f + c];
                        sum_gx[c] += g[r * f + c] * xhat[r * f + c];
                    }
                }
                if let Some(gb) = self.slot(grads, *beta) {
                    gb.iter_mut().zip(&sum_g).for_each(|(d, s)| *d += s);
                }
                if let Some(gg) = self.slot(grads, *gamma) {
                    gg.iter_mut().zip(&sum_gx).for_each(|(d, s)| *d += s);
                }
                if let Some(gx) = self.slot(grads, *x) {
                    let m = rows as f64;
                    for r in 0..rows {
                        for c in 0..f {
                            let ix = r * f + c;
                            gx[ix] += if *training {
                                vg[c] * inv_std[c] / m * (m * g[ix] - sum_g[c] - xhat[ix] * sum_gx[c])
                            } else {
                                vg[c] * inv_std[c] * g[ix]
                            };
                        }
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if let Some(gx) = self.slot(grads, *x) {
                    for ((d, s), m) in gx.iter_mut().zip(g).zip(mask) {
                        *d += s * m;
                    }
                }
            }
            &Op::Conv1d {
                x,
                kernel,
                stride,
                dilation,
            } => {
                let sx = self.shape(x).to_vec();
                let sk = self.shape(kernel).to_vec();
                let (b, t, n, cin) = (sx[0], sx[1], sx[2], sx[3]);
                let (cout, f) = (sk[0], sk[2]);
                let t_out = node.shape[1];
                let (vx, vk) = (self.value(x), self.value(kernel));
                let kview = |fi| Strided {
                    offset: fi,
                    row_stride: cin * f,
                    col_stride: f,
                };
                if let Some(gx) = self.slot(grads, x) {
                    for bi in 0..b {
                        for to in 0..t_out {
                            for (fi, ti) in conv_taps(to, stride, dilation, f, t) {
                                gemm(
                                    n,
                                    cout,
                                    cin,
                                    1.0,
                                    g,
                                    Strided::row_major((bi * t_out + to) * n * cout, cout),
                                    vk,
                                    kview(fi),
                                    1.0,
                                    gx,
                                    Strided::row_major((bi * t + ti) * n * cin, cin),
                                );
                            }
                        }
                    }
                }
                if let Some(gk) = self.slot(grads, kernel) {
                    for bi in 0..b {
                        for to in 0..t_out {
                            for (fi, ti) in conv_taps(to, stride, dilation, f, t) {
                                gemm(
                                    cout,
                                    n,
                                    cin,
                                    1.0,
                                    g,
                                    Strided::transposed((bi * t_out + to) * n * cout, cout),
                                    vx,
                                    Strided::row_major((bi * t + ti) * n * cin, cin),
                                    1.0,
                                    gk,
                                    kview(fi),
                                );
                            }
                        }
                    }
                }
            }
            Op::PairAggregate { x, graph, bank, index } => {
                self.backprop_pairs(*x, *graph, *bank, index, g, grads);
            }
            &Op::SelectFrame { x, frame, frames } => {
                if let Some(gx) = self.slot(grads, x) {
                    let b = node.shape[0];
                    let inner = g.len() / b;
                    for bi in 0..b {
                        let o = (bi * frames + frame) * inner;
                        for (d, s) in gx[o..o + inner].iter_mut().zip(&g[bi * inner..(bi + 1) * inner]) {
                            *d += s;
                        }
                    }
                }
            }
        }
    }

    fn backprop_pairs(
        &self,
        x: Var,
        graph: Option<Var>,
        bank: Var,
        index: &PairIndex,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let sx = self.shape(x);
        let (b, n, cin) = (sx[0], sx[1], sx[2]);
        let cout = self.shape(bank)[2];
        let (vx, vw) = (self.value(x), self.value(bank));
        let coef = GraphCoef::new(graph.map(|gv| (self.value(gv), self.shape(gv).len() == 3)), n);
        let need_x = self.rg(x);
        let need_graph = graph.is_some_and(|gv| self.rg(gv));
        let mut gx = need_x.then(|| grads[x.0].take().unwrap_or_else(|| vec![0.0; vx.len()]));
        let mut ggraph = match graph {
            Some(gv) if need_graph => Some(grads[gv.0].take().unwrap_or_else(|| vec![0.0; self.value(gv).len()])),
            _ => None,
        };
        let graph_batched = graph.is_some_and(|gv| self.shape(gv).len() == 3);
        let mut tmp = vec![0.0; b * cin];
        let mut scaled = vec![0.0; b * cout];
        let gw = self.slot(grads, bank);
        let mut gw = gw.map(std::mem::take);
        for (p, &(i, j)) in index.pairs().iter().enumerate() {
            let g_i = Strided {
                offset: i * cout,
                row_stride: n * cout,
                col_stride: 1,
            };
            if need_x || need_graph {
                // tmp = dOut[:, i, :] · W_pᵀ
                gemm(
                    b,
                    cout,
                    cin,
                    1.0,
                    g,
                    g_i,
                    vw,
                    Strided::transposed(p * cin * cout, cout),
                    0.0,
                    &mut tmp,
                    Strided::row_major(0, cin),
                );
                for bi in 0..b {
                    let t = &tmp[bi * cin..(bi + 1) * cin];
                    if let Some(gx) = gx.as_mut() {
                        let c = coef.get(bi, i, j);
                        if c != 0.0 {
                            let dst = &mut gx[(bi * n + j) * cin..(bi * n + j + 1) * cin];
                            dst.iter_mut().zip(t).for_each(|(d, s)| *d += c * s);
                        }
                    }
                    if let Some(gg) = ggraph.as_mut() {
                        let xs = &vx[(bi * n + j) * cin..(bi * n + j + 1) * cin];
                        let dot: f64 = xs.iter().zip(t).map(|(a, b)| a * b).sum();
                        let ix = if graph_batched {
                            bi * n * n + i * n + j
                        } else {
                            i * n + j
                        };
                        gg[ix] += dot;
                    }
                }
            }
            if let Some(gw) = gw.as_mut() {
                for bi in 0..b {
                    let c = coef.get(bi, i, j);
                    let src = &g[(bi * n + i) * cout..(bi * n + i + 1) * cout];
                    for (d, s) in scaled[bi * cout..(bi + 1) * cout].iter_mut().zip(src) {
                        *d = c * s;
                    }
                }
                // dW_p += X_jᵀ · (coef ⊙ dOut_i)
                gemm(
                    cin,
                    b,
                    cout,
                    1.0,
                    vx,
                    Strided {
                        offset: j * cin,
                        row_stride: 1,
                        col_stride: n * cin,
                    },
                    &scaled,
                    Strided::row_major(0, cout),
                    1.0,
                    gw,
                    Strided::row_major(p * cin * cout, cout),
                );
            }
        }
        if let Some(v) = gx {
            grads[x.0] = Some(v);
        }
        if let (Some(gv), Some(v)) = (graph, ggraph) {
            grads[gv.0] = Some(v);
        }
        if let Some(v) = gw {
            grads[bank.0] = Some(v);
        }
    }
}

/// Input frames feeding output frame `to`: `(kernel tap, input frame)`.
fn conv_taps(to: usize, stride: usize, dilation: usize, f: usize, t: usize) -> impl Iterator<Item = (usize, usize)> {
    let half = (f - 1) / 2;
    let centre = (to * stride) as isize;
    (0..f).filter_map(move |fi| {
        let ti = centre + (fi as isize - half as isize) * dilation as isize;
        (ti >= 0 && (ti as usize) < t).then_some((fi, ti as usize))
    })
}

struct GraphCoef<'a> {
    data: Option<&'a [f64]>,
    batched: bool,
    n: usize,
}

impl<'a> GraphCoef<'a> {
    fn new(graph: Option<(&'a [f64], bool)>, n: usize) -> Self {
        GraphCoef {
            data: graph.map(|g| g.0),
            batched: graph.is_some_and(|g| g.1),
            n,
        }
    }

    #[inline]
    fn get(&self, b: usize, i: usize, j: usize) -> f64 {
        match self.data {
            None => 1.0,
            Some(d) if self.batched => d[b * self.n * self.n + i * self.n + j],
            Some(d) => d[i * self.n + j],
        }
    }
}
