use std::collections::HashMap;

use super::{gelu_grad, is_target, permute_tensor, Graph, Op, Var, CE_CLAMP};
use crate::error::{Error, Result};
use crate::kernels::conv::conv2d_backward;
use crate::kernels::norm::{softmax_backward, NormStats};
use crate::kernels::upsample::upsample2x_backward;
use crate::kernels::{gemm, Layout};
use crate::tensor::{split_axis, Float, Tensor};

/// Gradients of the differentiable leaves reached from a backward root.
#[derive(Debug)]
pub struct Gradients<T> {
    leaves: HashMap<Var, Tensor<T>>,
}

impl<T: Float> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaves.get(&v)
    }

    /// Gradient of a leaf, zero-filled when the root does not depend on it.
    pub fn get_or_zeros(&self, g: &Graph<T>, v: Var) -> Tensor<T> {
        self.leaves.get(&v).cloned().unwrap_or_else(|| Tensor::zeros(g.shape(v)))
    }

    /// `(name, gradient)` for every registered parameter, in registration order.
    pub fn named(&self, g: &Graph<T>) -> Vec<(String, Tensor<T>)> {
        g.params().iter().map(|(name, v)| (name.clone(), self.get_or_zeros(g, *v))).collect()
    }
}

fn add_into<T: Float>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(acc) => acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, &b)| *a += b),
        None => *slot = Some(g),
    }
}

fn like<T: Float>(shape: &[usize], data: Vec<T>) -> Tensor<T> {
    Tensor::from_parts(shape.to_vec(), data)
}

impl<T: Float> Graph<T> {
    /// Reverse sweep from a one-element root. Gradients accumulate additively
    /// across fan-out; the root's own gradient is 1.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        if self.value(root).numel() != 1 {
            return Err(Error::Contract(format!("backward root must be scalar, got shape {:?}", self.shape(root))));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::ones(self.shape(root)));
        let mut leaves = HashMap::new();

        for i in (0..=root.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            let node = self.node(Var(i));
            if !node.needs_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                leaves.insert(Var(i), gy);
                continue;
            }
            for (v, g) in self.local_grads(Var(i), &gy) {
                if self.node(v).needs_grad {
                    add_into(&mut grads[v.0], g);
                }
            }
        }
        Ok(Gradients { leaves })
    }

    fn wants(&self, v: Var) -> bool {
        self.node(v).needs_grad
    }

    /// Vector-Jacobian products of one node with respect to its inputs.
    fn local_grads(&self, out: Var, gy: &Tensor<T>) -> Vec<(Var, Tensor<T>)> {
        let node = self.node(out);
        let y = &node.value;
        let g = gy.data();
        match &node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(*a, gy.clone()), (*b, gy.clone())],
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let ga = g.iter().zip(bv.data()).map(|(&g, &b)| g * b).collect();
                let gb = g.iter().zip(av.data()).map(|(&g, &a)| g * a).collect();
                vec![(*a, like(av.shape(), ga)), (*b, like(bv.shape(), gb))]
            }
            Op::MulConst(x, c) => vec![(*x, gy.map(|v| v * *c))],
            Op::Scale(x, s) => {
                let sv = self.value(*s).data()[0];
                let xv = self.value(*x);
                let gs: T = g.iter().zip(xv.data()).map(|(&g, &x)| g * x).sum();
                vec![(*x, gy.map(|v| v * sv)), (*s, like(self.shape(*s), vec![gs]))]
            }
            Op::AddBias { x, b, axis } => {
                let (outer, n, inner) = split_axis(y.shape(), *axis);
                let mut gb = vec![T::zero(); n];
                for o in 0..outer {
                    for (j, acc) in gb.iter_mut().enumerate() {
                        *acc += g[(o * n + j) * inner..(o * n + j + 1) * inner].iter().copied().sum();
                    }
                }
                vec![(*x, gy.clone()), (*b, like(self.shape(*b), gb))]
            }
            Op::Sum(x) => {
                let s = g[0];
                vec![(*x, Tensor::full(self.shape(*x), s))]
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (k, n) = (bv.shape()[0], bv.shape()[1]);
                let m = av.numel() / k;
                let mut out = vec![];
                if self.wants(*a) {
                    let mut ga = vec![T::zero(); m * k];
                    gemm(m, n, k, g, Layout::N, bv.data(), Layout::T, &mut ga, false);
                    out.push((*a, like(av.shape(), ga)));
                }
                if self.wants(*b) {
                    let mut gb = vec![T::zero(); k * n];
                    gemm(k, m, n, av.data(), Layout::T, g, Layout::N, &mut gb, false);
                    out.push((*b, like(bv.shape(), gb)));
                }
                out
            }
            Op::Bmm { a, b, la, lb, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let (av, bv) = (self.value(*a), self.value(*b));
                let batch = av.shape()[0];
                let mut out = vec![];
                if self.wants(*a) {
                    // d op(a) = gy * op(b)^T; stored layout decides the target orientation.
                    let mut ga = vec![T::zero(); batch * m * k];
                    for i in 0..batch {
                        let gyi = &g[i * m * n..];
                        let bi = &bv.data()[i * k * n..];
                        let dst = &mut ga[i * m * k..];
                        match la {
                            Layout::N => gemm(m, n, k, gyi, Layout::N, bi, flip(*lb), dst, false),
                            // stored k x m: ga_stored = op(b) * gy^T
                            Layout::T => gemm(k, n, m, bi, *lb, gyi, Layout::T, dst, false),
                        }
                    }
                    out.push((*a, like(av.shape(), ga)));
                }
                if self.wants(*b) {
                    let mut gb = vec![T::zero(); batch * k * n];
                    for i in 0..batch {
                        let gyi = &g[i * m * n..];
                        let ai = &av.data()[i * m * k..];
                        let dst = &mut gb[i * k * n..];
                        match lb {
                            Layout::N => gemm(k, m, n, ai, flip(*la), gyi, Layout::N, dst, false),
                            // stored n x k: gb_stored = gy^T * op(a)
                            Layout::T => gemm(n, m, k, gyi, Layout::T, ai, *la, dst, false),
                        }
                    }
                    out.push((*b, like(bv.shape(), gb)));
                }
                out
            }
            Op::Reshape(x) => vec![(*x, like(self.shape(*x), g.to_vec()))],
            Op::Permute { x, perm } => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                vec![(*x, permute_tensor(gy, &inv))]
            }
            Op::Narrow { x, axis, start } => {
                let xs = self.shape(*x);
                let (outer, n, inner) = split_axis(xs, *axis);
                let len = y.shape()[*axis];
                let mut gx = vec![T::zero(); self.value(*x).numel()];
                for o in 0..outer {
                    gx[(o * n + start) * inner..(o * n + start + len) * inner]
                        .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                vec![(*x, like(xs, gx))]
            }
            Op::Concat { xs, axis } => {
                let (outer, total, inner) = split_axis(y.shape(), *axis);
                let mut offset = 0;
                let mut out = vec![];
                for &v in xs {
                    let n = self.shape(v)[*axis];
                    if self.wants(v) {
                        let mut gx = Vec::with_capacity(outer * n * inner);
                        for o in 0..outer {
                            gx.extend_from_slice(&g[(o * total + offset) * inner..(o * total + offset + n) * inner]);
                        }
                        out.push((v, like(self.shape(v), gx)));
                    }
                    offset += n;
                }
                out
            }
            Op::Conv2d { x, w, b, geom } => {
                let grads = conv2d_backward(
                    geom,
                    self.value(*x).data(),
                    self.value(*w).data(),
                    g,
                    self.wants(*x),
                    self.wants(*w),
                    b.is_some_and(|b| self.wants(b)),
                );
                let mut out = vec![];
                if let Some(gx) = grads.x {
                    out.push((*x, like(self.shape(*x), gx)));
                }
                if let Some(gw) = grads.w {
                    out.push((*w, like(self.shape(*w), gw)));
                }
                if let (Some(b), Some(gb)) = (b, grads.bias) {
                    out.push((*b, like(self.shape(*b), gb)));
                }
                out
            }
            Op::Upsample2x(x) => {
                let s = self.shape(*x);
                let gx = upsample2x_backward(g, s[0] * s[1], s[2], s[3]);
                vec![(*x, like(s, gx))]
            }
            Op::Softmax { x, axis } => {
                let (outer, n, inner) = split_axis(y.shape(), *axis);
                vec![(*x, like(y.shape(), softmax_backward(y.data(), g, outer, n, inner)))]
            }
            Op::Relu { x, mask } => {
                let gx = g.iter().zip(mask).map(|(&g, &on)| if on { g } else { T::zero() }).collect();
                vec![(*x, like(y.shape(), gx))]
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                let gx = g.iter().zip(xv.data()).map(|(&g, &x)| g * gelu_grad(x)).collect();
                vec![(*x, like(y.shape(), gx))]
            }
            Op::LayerNorm { x, gamma, beta, axis, stats } => {
                let (outer, n, inner) = split_axis(y.shape(), *axis);
                // group = (outer, inner) position, members run along the axis
                let idx = move |grp: usize, j: usize| {
                    let (o, i) = (grp / inner, grp % inner);
                    (o * n + j) * inner + i
                };
                let norm = NormView { outer: outer * inner, members: n, idx: &idx, channel_of: &|_, j| j };
                self.norm_backward(*x, *gamma, *beta, stats, true, &norm, g)
            }
            Op::BatchNorm { x, gamma, beta, stats, train } => {
                let s = y.shape();
                let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
                let idx = move |grp: usize, j: usize| {
                    let (bi, p) = (j / hw, j % hw);
                    (bi * c + grp) * hw + p
                };
                let norm = NormView { outer: c, members: b * hw, idx: &idx, channel_of: &|grp, _| grp };
                self.norm_backward(*x, *gamma, *beta, stats, *train, &norm, g)
            }
            Op::Dice { p, labels, weights, terms, .. } => {
                let s = self.shape(*p);
                let (b, k, hw) = (s[0], s[1], s[2] * s[3]);
                let pd = self.value(*p).data();
                let ld = labels.data();
                let mut gp = vec![T::zero(); pd.len()];
                let two = T::c(2.0);
                for c in 0..k {
                    let (inter, denom) = terms[c];
                    let coef = -two * weights[c] * g[0] / (denom * denom);
                    for bi in 0..b {
                        let base = (bi * k + c) * hw;
                        for q in 0..hw {
                            let gv = if is_target(k, ld[bi * hw + q], c) { T::one() } else { T::zero() };
                            gp[base + q] = coef * (gv * denom - inter * two * pd[base + q]);
                        }
                    }
                }
                vec![(*p, like(s, gp))]
            }
            Op::CrossEntropy { p, labels } => {
                let s = self.shape(*p);
                let (b, k, hw) = (s[0], s[1], s[2] * s[3]);
                let pd = self.value(*p).data();
                let ld = labels.data();
                let (lo, hi) = (T::c(CE_CLAMP), T::one() - T::c(CE_CLAMP));
                let scale = -g[0] / T::from_usize(b * k * hw).unwrap();
                let mut gp = vec![T::zero(); pd.len()];
                for bi in 0..b {
                    for c in 0..k {
                        let base = (bi * k + c) * hw;
                        for q in 0..hw {
                            let pv = pd[base + q];
                            if pv < lo || pv > hi {
                                continue;
                            }
                            let d = if is_target(k, ld[bi * hw + q], c) {
                                T::one() / pv
                            } else {
                                -T::one() / (T::one() - pv)
                            };
                            gp[base + q] = scale * d;
                        }
                    }
                }
                vec![(*p, like(s, gp))]
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn norm_backward(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &NormStats<T>,
        through_stats: bool,
        view: &NormView<'_>,
        g: &[T],
    ) -> Vec<(Var, Tensor<T>)> {
        let xd = self.value(x).data();
        let gam = self.value(gamma).data();
        let mut gx = vec![T::zero(); xd.len()];
        let mut gg = vec![T::zero(); gam.len()];
        let mut gb = vec![T::zero(); gam.len()];
        let nt = T::from_usize(view.members).unwrap();
        for grp in 0..view.outer {
            let (m, inv) = (stats.mean[grp], stats.invstd[grp]);
            let mut sum_gxh = T::zero();
            let mut sum_gxh_xh = T::zero();
            for j in 0..view.members {
                let i = (view.idx)(grp, j);
                let ch = (view.channel_of)(grp, j);
                let xh = (xd[i] - m) * inv;
                gg[ch] += g[i] * xh;
                gb[ch] += g[i];
                let gxh = g[i] * gam[ch];
                sum_gxh += gxh;
                sum_gxh_xh += gxh * xh;
            }
            let (mean_gxh, mean_gxh_xh) = (sum_gxh / nt, sum_gxh_xh / nt);
            for j in 0..view.members {
                let i = (view.idx)(grp, j);
                let ch = (view.channel_of)(grp, j);
                let gxh = g[i] * gam[ch];
                gx[i] = if through_stats {
                    let xh = (xd[i] - m) * inv;
                    inv * (gxh - mean_gxh - xh * mean_gxh_xh)
                } else {
                    gxh * inv
                };
            }
        }
        vec![(x, like(self.shape(x), gx)), (gamma, like(self.shape(gamma), gg)), (beta, like(self.shape(beta), gb))]
    }
}

/// Index mapping for a normalisation: `outer` groups of `members` elements,
/// `channel_of` selects the affine parameter.
struct NormView<'a> {
    outer: usize,
    members: usize,
    idx: &'a dyn Fn(usize, usize) -> usize,
    channel_of: &'a dyn Fn(usize, usize) -> usize,
}

fn flip(l: Layout) -> Layout {
    match l {
        Layout::N => Layout::T,
        Layout::T => Layout::N,
    }
}
