//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation in execution order, so the tape is
//! already topologically sorted; [`Graph::backward`] walks it in reverse and
//! accumulates gradients additively into each input. Values are immutable once
//! recorded. A graph belongs to one thread; independent graphs can run in
//! parallel.

mod backward;

use std::collections::HashMap;

pub use backward::Gradients;

use crate::error::{dim_err, Error, Result};
use crate::kernels::conv::{conv2d_forward, ConvGeom};
use crate::kernels::norm::{channel_stats, layer_stats, softmax_forward, NormStats};
use crate::kernels::upsample::upsample2x_forward;
use crate::kernels::{gemm, Layout};
use crate::labels::LabelMap;
use crate::tensor::{split_axis, Float, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Normalisation behaviour of batch norm.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const LN_EPS: f64 = 1e-6;

#[derive(Clone, Debug)]
pub(crate) enum Op<T> {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    MulConst(Var, T),
    /// Multiply by a one-element variable.
    Scale(Var, Var),
    AddBias {
        x: Var,
        b: Var,
        axis: usize,
    },
    Sum(Var),
    MatMul(Var, Var),
    Bmm {
        a: Var,
        b: Var,
        la: Layout,
        lb: Layout,
        m: usize,
        k: usize,
        n: usize,
    },
    Reshape(Var),
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Concat {
        xs: Vec<Var>,
        axis: usize,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Upsample2x(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    Relu {
        x: Var,
        mask: Vec<bool>,
    },
    Gelu(Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        stats: NormStats<T>,
        train: bool,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        axis: usize,
        stats: NormStats<T>,
    },
    Dice {
        p: Var,
        labels: LabelMap,
        weights: Vec<T>,
        terms: Vec<(T, T)>,
    },
    CrossEntropy {
        p: Var,
        labels: LabelMap,
    },
}

impl<T> Op<T> {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::MulConst(..) => "mul_const",
            Op::Scale(..) => "scale",
            Op::AddBias { .. } => "add_bias",
            Op::Sum(..) => "sum",
            Op::MatMul(..) => "matmul",
            Op::Bmm { .. } => "bmm",
            Op::Reshape(..) => "reshape",
            Op::Permute { .. } => "permute",
            Op::Narrow { .. } => "narrow",
            Op::Concat { .. } => "concat",
            Op::Conv2d { .. } => "conv2d",
            Op::Upsample2x(..) => "upsample2x",
            Op::Softmax { .. } => "softmax",
            Op::Relu { .. } => "relu",
            Op::Gelu(..) => "gelu",
            Op::BatchNorm { .. } => "batchnorm2d",
            Op::LayerNorm { .. } => "layernorm",
            Op::Dice { .. } => "dice_loss",
            Op::CrossEntropy { .. } => "ce_loss",
        }
    }
}

pub(crate) struct Node<T> {
    pub(crate) value: Tensor<T>,
    pub(crate) op: Op<T>,
    pub(crate) needs_grad: bool,
}

enum MaskTape {
    Off,
    Record(Vec<Vec<bool>>),
    Replay { masks: Vec<Vec<bool>>, next: usize },
}

/// Activation kind for [`Graph::activation`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Gelu,
}

pub struct Graph<T: Float> {
    nodes: Vec<Node<T>>,
    params: Vec<(String, Var)>,
    param_lookup: HashMap<String, Var>,
    mode: Mode,
    grad_enabled: bool,
    buffer_updates: Vec<(String, Tensor<T>)>,
    captures: Option<Vec<(String, Tensor<T>)>>,
    masks: MaskTape,
}

impl<T: Float> Default for Graph<T> {
    fn default() -> Self {
        Self::new(Mode::Train)
    }
}

impl<T: Float> Graph<T> {
    pub fn new(mode: Mode) -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
            param_lookup: HashMap::new(),
            mode,
            grad_enabled: true,
            buffer_updates: Vec::new(),
            captures: None,
            masks: MaskTape::Off,
        }
    }

    /// A graph that records values only; nothing is differentiable.
    pub fn inference(mode: Mode) -> Self {
        Self { grad_enabled: false, ..Self::new(mode) }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Bytes held by all recorded values; the tape keeps every intermediate
    /// alive, so this is the peak for a forward pass.
    pub fn live_bytes(&self) -> usize {
        self.nodes.iter().map(|n| n.value.numel()).sum::<usize>() * std::mem::size_of::<T>()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    /// Parameters registered through [`Graph::param`], in registration order.
    pub fn params(&self) -> &[(String, Var)] {
        &self.params
    }

    /// Batch-norm running-statistics updates produced by train-mode passes.
    pub fn take_buffer_updates(&mut self) -> Vec<(String, Tensor<T>)> {
        std::mem::take(&mut self.buffer_updates)
    }

    /// Enables recording of diagnostic tensors (attention queries and keys).
    pub fn enable_capture(&mut self) {
        self.captures = Some(Vec::new());
    }

    pub fn capturing(&self) -> bool {
        self.captures.is_some()
    }

    pub fn capture(&mut self, name: String, v: Var) {
        if let Some(c) = self.captures.as_mut() {
            c.push((name, self.nodes[v.0].value.clone()));
        }
    }

    pub fn take_captures(&mut self) -> Vec<(String, Tensor<T>)> {
        self.captures.take().unwrap_or_default()
    }

    /// Records the ReLU activation pattern of the coming forward pass.
    pub fn record_relu_masks(&mut self) {
        self.masks = MaskTape::Record(Vec::new());
    }

    pub fn take_relu_masks(&mut self) -> Vec<Vec<bool>> {
        match std::mem::replace(&mut self.masks, MaskTape::Off) {
            MaskTape::Record(m) => m,
            MaskTape::Replay { masks, .. } => masks,
            MaskTape::Off => Vec::new(),
        }
    }

    /// Forces every ReLU, in execution order, to reuse a recorded activation
    /// pattern. Finite-difference checks use this to evaluate the same linear
    /// piece of the function the analytic gradient describes.
    pub fn replay_relu_masks(&mut self, masks: Vec<Vec<bool>>) {
        self.masks = MaskTape::Replay { masks, next: 0 };
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn node(&self, v: Var) -> &Node<T> {
        &self.nodes[v.0]
    }

    // ----- leaves -----

    /// Non-differentiable input.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable input (gradient available after backward).
    pub fn variable(&mut self, t: Tensor<T>) -> Var {
        let needs_grad = self.grad_enabled;
        self.nodes.push(Node { value: t, op: Op::Leaf, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Named trainable parameter; registering the same name twice returns the
    /// same node.
    pub fn param(&mut self, name: &str, t: &Tensor<T>) -> Var {
        if let Some(&v) = self.param_lookup.get(name) {
            return v;
        }
        let v = self.variable(t.clone());
        self.params.push((name.to_string(), v));
        self.param_lookup.insert(name.to_string(), v);
        v
    }

    // ----- elementwise -----

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return dim_err(format!("{what}: shapes {:?} and {:?} differ", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p + q).collect();
        let t = Tensor::from_parts(x.shape().to_vec(), data);
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p * q).collect();
        let t = Tensor::from_parts(x.shape().to_vec(), data);
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    pub fn mul_const(&mut self, x: Var, c: T) -> Var {
        let t = self.value(x).map(|v| v * c);
        self.push(t, Op::MulConst(x, c), &[x])
    }

    /// `s * x` for a one-element `s`.
    pub fn scale(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return dim_err(format!("scale factor must have one element, got {:?}", self.shape(s)));
        }
        let c = self.value(s).data()[0];
        let t = self.value(x).map(|v| v * c);
        Ok(self.push(t, Op::Scale(x, s), &[x, s]))
    }

    /// Adds a vector broadcast along `axis`.
    pub fn add_bias(&mut self, x: Var, b: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || self.value(b).numel() != shape[axis] {
            return dim_err(format!(
                "bias of {} values does not match axis {axis} of {shape:?}",
                self.value(b).numel()
            ));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let bv = self.value(b).data().to_vec();
        let mut data = self.value(x).data().to_vec();
        for o in 0..outer {
            for (j, &bj) in bv.iter().enumerate().take(n) {
                data[(o * n + j) * inner..(o * n + j + 1) * inner].iter_mut().for_each(|v| *v += bj);
            }
        }
        Ok(self.push(Tensor::from_parts(shape, data), Op::AddBias { x, b, axis }, &[x, b]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = T::from_usize(self.value(x).numel()).unwrap();
        let s = self.sum(x);
        self.mul_const(s, T::one() / n)
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        match kind {
            Activation::Relu => self.relu(x),
            Activation::Gelu => self.gelu(x),
        }
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let numel = self.value(x).numel();
        let replayed = match &mut self.masks {
            MaskTape::Replay { masks, next } => {
                let m = masks.get(*next).filter(|m| m.len() == numel).cloned();
                *next += 1;
                m
            }
            _ => None,
        };
        let xv = &self.nodes[x.0].value;
        let mask: Vec<bool> = replayed.unwrap_or_else(|| xv.data().iter().map(|&v| v > T::zero()).collect());
        let data: Vec<T> = xv.data().iter().zip(&mask).map(|(&v, &on)| if on { v } else { T::zero() }).collect();
        let t = Tensor::from_parts(xv.shape().to_vec(), data);
        if let MaskTape::Record(rec) = &mut self.masks {
            rec.push(mask.clone());
        }
        self.push(t, Op::Relu { x, mask }, &[x])
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(gelu_value);
        self.push(t, Op::Gelu(x), &[x])
    }

    // ----- linear algebra -----

    /// `a [... x K] * b [K x P] -> [... x P]`; leading axes of `a` act as rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return dim_err(format!("matmul: cannot multiply {sa:?} by {sb:?}"));
        }
        let k = sb[0];
        let n = sb[1];
        let m = self.value(a).numel() / k;
        let mut out = vec![T::zero(); m * n];
        gemm(m, k, n, self.value(a).data(), Layout::N, self.value(b).data(), Layout::N, &mut out, false);
        let mut shape = sa;
        *shape.last_mut().unwrap() = n;
        Ok(self.push(Tensor::from_parts(shape, out), Op::MatMul(a, b), &[a, b]))
    }

    /// Batched product of 3-D operands; `Layout::T` reads an operand with its
    /// last two axes swapped.
    pub fn bmm(&mut self, a: Var, la: Layout, b: Var, lb: Layout) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return dim_err(format!("bmm: incompatible operands {sa:?} and {sb:?}"));
        }
        let (m, k) = if la == Layout::N { (sa[1], sa[2]) } else { (sa[2], sa[1]) };
        let (k2, n) = if lb == Layout::N { (sb[1], sb[2]) } else { (sb[2], sb[1]) };
        if k != k2 {
            return dim_err(format!("bmm: inner extents {k} and {k2} differ"));
        }
        let batch = sa[0];
        let mut out = vec![T::zero(); batch * m * n];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        for i in 0..batch {
            gemm(m, k, n, &ad[i * m * k..], la, &bd[i * k * n..], lb, &mut out[i * m * n..], false);
        }
        let t = Tensor::from_parts(vec![batch, m, n], out);
        Ok(self.push(t, Op::Bmm { a, b, la, lb, m, k, n }, &[a, b]))
    }

    // ----- shape -----

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshape(shape)?;
        Ok(self.push(t, Op::Reshape(x), &[x]))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true))
        {
            return dim_err(format!("invalid permutation {perm:?} for shape {shape:?}"));
        }
        let t = permute_tensor(self.value(x), perm);
        Ok(self.push(t, Op::Permute { x, perm: perm.to_vec() }, &[x]))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return dim_err(format!("narrow [{start}, {}) out of range on axis {axis} of {shape:?}", start + len));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            data.extend_from_slice(&src[(o * n + start) * inner..(o * n + start + len) * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        Ok(self.push(Tensor::from_parts(out_shape, data), Op::Narrow { x, axis, start }, &[x]))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*xs.first().ok_or_else(|| Error::Dimension("concat of nothing".into()))?).to_vec();
        if axis >= first.len() {
            return dim_err(format!("concat axis {axis} out of range for {first:?}"));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            if s.len() != first.len() || s.iter().zip(&first).enumerate().any(|(i, (a, b))| i != axis && a != b) {
                return dim_err(format!("concat: {s:?} incompatible with {first:?} on axis {axis}"));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let t = self.value(v);
                let n = t.shape()[axis];
                data.extend_from_slice(&t.data()[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        Ok(self.push(Tensor::from_parts(shape, data), Op::Concat { xs: xs.to_vec(), axis }, xs))
    }

    /// `B x N x C` tokens to a `B x C x h x w` map (`N = h * w`).
    pub fn tokens_to_map(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let [b, n, c] = *self.shape(x) else {
            return dim_err(format!("expected B x N x C tokens, got {:?}", self.shape(x)));
        };
        if n != h * w {
            return dim_err(format!("{n} tokens do not fill a {h}x{w} grid"));
        }
        let t = self.permute(x, &[0, 2, 1])?;
        self.reshape(t, &[b, c, h, w])
    }

    /// Token-to-map reshape onto a square grid; `N` must be a perfect square.
    pub fn tokens_to_square_map(&mut self, x: Var) -> Result<Var> {
        let Some(&n) = self.shape(x).get(1) else {
            return dim_err(format!("expected B x N x C tokens, got {:?}", self.shape(x)));
        };
        let side = square_side(n)?;
        self.tokens_to_map(x, side, side)
    }

    /// `B x C x H x W` map to `B x (H*W) x C` tokens.
    pub fn map_to_tokens(&mut self, x: Var) -> Result<Var> {
        let [b, c, h, w] = *self.shape(x) else {
            return dim_err(format!("expected B x C x H x W map, got {:?}", self.shape(x)));
        };
        let t = self.reshape(x, &[b, c, h * w])?;
        self.permute(t, &[0, 2, 1])
    }

    // ----- convolution and resampling -----

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize, groups: usize) -> Result<Var> {
        let geom = ConvGeom::new(self.shape(x), self.shape(w), stride, pad, groups)?;
        if let Some(b) = b {
            if self.value(b).numel() != geom.cout {
                return dim_err(format!("conv2d bias has {} values for {} channels", self.value(b).numel(), geom.cout));
            }
        }
        let out = conv2d_forward(&geom, self.value(x).data(), self.value(w).data(), b.map(|b| self.value(b).data()));
        let t = Tensor::from_parts(geom.out_shape().to_vec(), out);
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(t, Op::Conv2d { x, w, b, geom }, &inputs))
    }

    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let [b, c, h, w] = *self.shape(x) else {
            return dim_err(format!("upsample2x expects B x C x H x W, got {:?}", self.shape(x)));
        };
        let out = upsample2x_forward(self.value(x).data(), b * c, h, w);
        Ok(self.push(Tensor::from_parts(vec![b, c, 2 * h, 2 * w], out), Op::Upsample2x(x), &[x]))
    }

    // ----- normalisation -----

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return dim_err(format!("softmax axis {axis} out of range for {shape:?}"));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let y = softmax_forward(self.value(x).data(), outer, n, inner);
        Ok(self.push(Tensor::from_parts(shape, y), Op::Softmax { x, axis }, &[x]))
    }

    /// Normalises each position over `axis` with per-axis-entry affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, axis: usize, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || self.value(gamma).numel() != shape[axis] || self.value(beta).numel() != shape[axis] {
            return dim_err(format!("layer_norm parameters do not match axis {axis} of {shape:?}"));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let stats = layer_stats(self.value(x).data(), outer, n, inner, T::c(eps));
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let xd = self.value(x).data();
        let mut y = vec![T::zero(); xd.len()];
        for o in 0..outer {
            for j in 0..n {
                for i in 0..inner {
                    let gi = o * inner + i;
                    let idx = (o * n + j) * inner + i;
                    y[idx] = (xd[idx] - stats.mean[gi]) * stats.invstd[gi] * g[j] + bt[j];
                }
            }
        }
        let t = Tensor::from_parts(shape, y);
        Ok(self.push(t, Op::LayerNorm { x, gamma, beta, axis, stats }, &[x, gamma, beta]))
    }

    /// Batch norm over `B x C x H x W`. In train mode batch statistics are used
    /// and updated running statistics are queued under `prefix.running_mean`
    /// and `prefix.running_var`; in eval mode the given running statistics are
    /// used.
    pub fn batch_norm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &Tensor<T>,
        running_var: &Tensor<T>,
        prefix: &str,
    ) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let [b, c, h, w] = shape[..] else {
            return dim_err(format!("batch_norm2d expects B x C x H x W, got {shape:?}"));
        };
        for t in [self.value(gamma), self.value(beta), running_mean, running_var] {
            if t.numel() != c {
                return dim_err(format!("batch_norm2d parameter of {} values for {c} channels", t.numel()));
            }
        }
        let eps = T::c(BN_EPS);
        let train = self.mode == Mode::Train;
        let stats = if train {
            let s = channel_stats(self.value(x).data(), b, c, h * w, eps);
            let m = T::c(BN_MOMENTUM);
            let cnt = s.count as f64;
            let unbias = T::c(if cnt > 1.0 { cnt / (cnt - 1.0) } else { 1.0 });
            let new_mean = Tensor::from_fn(&[c], |j| (T::one() - m) * running_mean.data()[j] + m * s.mean[j]);
            let new_var = Tensor::from_fn(&[c], |j| (T::one() - m) * running_var.data()[j] + m * s.var[j] * unbias);
            self.buffer_updates.push((format!("{prefix}.running_mean"), new_mean));
            self.buffer_updates.push((format!("{prefix}.running_var"), new_var));
            s
        } else {
            let var = running_var.data().to_vec();
            NormStats {
                mean: running_mean.data().to_vec(),
                invstd: var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect(),
                var,
                count: b * h * w,
            }
        };
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let xd = self.value(x).data();
        let hw = h * w;
        let mut y = vec![T::zero(); xd.len()];
        for bi in 0..b {
            for j in 0..c {
                let scale = stats.invstd[j] * g[j];
                let shift = bt[j] - stats.mean[j] * scale;
                let base = (bi * c + j) * hw;
                for p in base..base + hw {
                    y[p] = xd[p] * scale + shift;
                }
            }
        }
        let t = Tensor::from_parts(shape, y);
        Ok(self.push(t, Op::BatchNorm { x, gamma, beta, stats, train }, &[x, gamma, beta]))
    }

    // ----- segmentation losses -----

    fn check_probs(&self, p: Var, labels: &LabelMap) -> Result<(usize, usize, usize)> {
        let [b, k, h, w] = *self.shape(p) else {
            return dim_err(format!("loss expects B x K x H x W probabilities, got {:?}", self.shape(p)));
        };
        if (labels.batch(), labels.height(), labels.width()) != (b, h, w) {
            return dim_err(format!(
                "labels {}x{}x{} do not match probabilities {:?}",
                labels.batch(),
                labels.height(),
                labels.width(),
                self.shape(p)
            ));
        }
        labels.check_classes(k.max(2))?;
        Ok((b, k, h * w))
    }

    /// `1 - sum_k 2 w_k sum(p g) / (sum(p^2) + sum(g^2) + eps)` over all pixels
    /// of the batch, with `g` the one-hot expansion of `labels` (the binary
    /// foreground mask when `p` has one channel).
    pub fn dice_loss(&mut self, p: Var, labels: &LabelMap, weights: &[f64], eps: f64) -> Result<Var> {
        let (b, k, hw) = self.check_probs(p, labels)?;
        if weights.len() != k {
            return Err(Error::Contract(format!("{} class weights for {k} classes", weights.len())));
        }
        let wsum: f64 = weights.iter().sum();
        if (wsum - 1.0).abs() > 1e-9 {
            return Err(Error::Contract(format!("dice class weights sum to {wsum}, expected 1")));
        }
        let pd = self.value(p).data();
        let ld = labels.data();
        let mut terms = Vec::with_capacity(k);
        let mut loss = T::one();
        for (c, &wc) in weights.iter().enumerate() {
            let (mut inter, mut psq, mut gsq) = (T::zero(), T::zero(), T::zero());
            for bi in 0..b {
                let plane = &pd[(bi * k + c) * hw..(bi * k + c + 1) * hw];
                let lab = &ld[bi * hw..(bi + 1) * hw];
                for (&pv, &l) in plane.iter().zip(lab) {
                    psq += pv * pv;
                    if is_target(k, l, c) {
                        inter += pv;
                        gsq += T::one();
                    }
                }
            }
            let denom = psq + gsq + T::c(eps);
            loss -= T::c(2.0 * wc) * inter / denom;
            terms.push((inter, denom));
        }
        let op = Op::Dice { p, labels: labels.clone(), weights: weights.iter().map(|&w| T::c(w)).collect(), terms };
        Ok(self.push(Tensor::scalar(loss), op, &[p]))
    }

    /// Binary cross-entropy of every class channel against its one-hot target,
    /// averaged over pixels and classes; `p` is clamped to `[1e-7, 1 - 1e-7]`.
    pub fn ce_loss(&mut self, p: Var, labels: &LabelMap) -> Result<Var> {
        let (b, k, hw) = self.check_probs(p, labels)?;
        let (lo, hi) = (T::c(CE_CLAMP), T::one() - T::c(CE_CLAMP));
        let pd = self.value(p).data();
        let ld = labels.data();
        let mut acc = T::zero();
        for bi in 0..b {
            for c in 0..k {
                let plane = &pd[(bi * k + c) * hw..(bi * k + c + 1) * hw];
                let lab = &ld[bi * hw..(bi + 1) * hw];
                for (&pv, &l) in plane.iter().zip(lab) {
                    let pc = pv.max(lo).min(hi);
                    acc += if is_target(k, l, c) { pc.ln() } else { (T::one() - pc).ln() };
                }
            }
        }
        let loss = -acc / T::from_usize(b * k * hw).unwrap();
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy { p, labels: labels.clone() }, &[p]))
    }
}

pub(crate) const CE_CLAMP: f64 = 1e-7;

const GELU_K: f64 = 0.7978845608028654; // sqrt(2 / pi)
const GELU_C: f64 = 0.044715;

/// Whether pixel label `l` is a positive for channel `c` of a `k`-channel
/// probability map. A single channel (`k = 1`) is the foreground probability
/// of a binary problem with labels in `{0, 1}`.
pub(crate) fn is_target(k: usize, l: u32, c: usize) -> bool {
    if k == 1 {
        l == 1
    } else {
        l as usize == c
    }
}

pub(crate) fn gelu_value<T: Float>(x: T) -> T {
    let inner = T::c(GELU_K) * (x + T::c(GELU_C) * x * x * x);
    T::c(0.5) * x * (T::one() + inner.tanh())
}

pub(crate) fn gelu_grad<T: Float>(x: T) -> T {
    let inner = T::c(GELU_K) * (x + T::c(GELU_C) * x * x * x);
    let t = inner.tanh();
    let dinner = T::c(GELU_K) * (T::one() + T::c(3.0 * GELU_C) * x * x);
    T::c(0.5) * (T::one() + t) + T::c(0.5) * x * (T::one() - t * t) * dinner
}

pub(crate) fn permute_tensor<T: Float>(t: &Tensor<T>, perm: &[usize]) -> Tensor<T> {
    let shape = t.shape();
    let rank = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut in_strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    // Stride in the source for each output axis.
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let src = t.data();
    let mut out = Vec::with_capacity(src.len());
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..src.len() {
        out.push(src[off]);
        // odometer increment over the output index
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= src_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    Tensor::from_parts(out_shape, out)
}

pub(crate) fn square_side(n: usize) -> Result<usize> {
    let side = (n as f64).sqrt().round() as usize;
    if side * side != n {
        return dim_err(format!("token count {n} is not a perfect square"));
    }
    Ok(side)
}
