//! Efficient (linear) attention and the multi-scale linear attention operator.
//!
//! Efficient attention normalises queries with a softmax over each row and keys
//! with a softmax over each column (the token axis), which makes the implicit
//! attention matrix `phi_q(Q) phi_k(K)^T` row-stochastic. Because no nonlinearity
//! sits between the two factors, the product can be evaluated as
//! `phi_q(Q) (phi_k(K)^T V)`, costing `O(N d^2)` instead of `O(N^2 d)`.

use crate::autodiff::{square_side, Graph, Var};
use crate::error::{dim_err, Error, Result};
use crate::kernels::norm::softmax_forward;
use crate::kernels::{gemm, Layout};
use crate::layers::Conv2d;
use crate::params::{Init, Kind, ParamStore};
use crate::tensor::{Float, Tensor};

/// Efficient attention on `B x N x d` queries, keys and values, evaluated in
/// the linear order.
pub fn efficient_attention<T: Float>(g: &mut Graph<T>, q: Var, k: Var, v: Var) -> Result<Var> {
    check_qkv(g.shape(q), g.shape(k), g.shape(v))?;
    let qs = g.softmax(q, 2)?;
    let ks = g.softmax(k, 1)?;
    let context = g.bmm(ks, Layout::T, v, Layout::N)?; // B x d x d
    g.bmm(qs, Layout::N, context, Layout::N)
}

/// Scaled dot-product softmax attention on `B x N x d`; materialises the
/// `N x N` score matrix.
pub fn softmax_attention<T: Float>(g: &mut Graph<T>, q: Var, k: Var, v: Var) -> Result<Var> {
    check_qkv(g.shape(q), g.shape(k), g.shape(v))?;
    let d = g.shape(q)[2];
    let scores = g.bmm(q, Layout::N, k, Layout::T)?;
    let scaled = g.mul_const(scores, T::one() / T::c(d as f64).sqrt());
    let weights = g.softmax(scaled, 2)?;
    g.bmm(weights, Layout::N, v, Layout::N)
}

fn check_qkv(q: &[usize], k: &[usize], v: &[usize]) -> Result<()> {
    if q.len() != 3 || q != k || q != v {
        return dim_err(format!("attention expects matching B x N x d inputs, got {q:?}, {k:?}, {v:?}"));
    }
    Ok(())
}

fn check_2d(q: &Tensor<impl Float>, k: &Tensor<impl Float>, v: &Tensor<impl Float>) -> Result<(usize, usize)> {
    let (qs, ks, vs) = (q.shape(), k.shape(), v.shape());
    if qs.len() != 2 || qs != ks || qs != vs {
        return dim_err(format!("attention expects matching N x d inputs, got {qs:?}, {ks:?}, {vs:?}"));
    }
    Ok((qs[0], qs[1]))
}

/// `(phi_q(Q), phi_k(K))` for `N x d` inputs.
pub fn feature_maps<T: Float>(q: &Tensor<T>, k: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
    let (n, d) = (q.shape()[0], q.shape()[1]);
    let fq = softmax_forward(q.data(), n, d, 1);
    let fk = softmax_forward(k.data(), 1, n, d);
    (Tensor::from_parts(vec![n, d], fq), Tensor::from_parts(vec![n, d], fk))
}

/// Linear-order efficient attention on plain `N x d` tensors.
pub fn efficient_attention_linear<T: Float>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, d) = check_2d(q, k, v)?;
    let (fq, fk) = feature_maps(q, k);
    let mut context = vec![T::zero(); d * d];
    gemm(d, n, d, fk.data(), Layout::T, v.data(), Layout::N, &mut context, false);
    let mut out = vec![T::zero(); n * d];
    gemm(n, d, d, fq.data(), Layout::N, &context, Layout::N, &mut out, false);
    Ok(Tensor::from_parts(vec![n, d], out))
}

/// Quadratic-order evaluation `(phi_q(Q) phi_k(K)^T) V`; diagnostics only.
pub fn efficient_attention_quadratic<T: Float>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, d) = check_2d(q, k, v)?;
    let (fq, fk) = feature_maps(q, k);
    let mut sim = vec![T::zero(); n * n];
    gemm(n, d, n, fq.data(), Layout::N, fk.data(), Layout::T, &mut sim, false);
    let mut out = vec![T::zero(); n * d];
    gemm(n, n, d, &sim, Layout::N, v.data(), Layout::N, &mut out, false);
    Ok(Tensor::from_parts(vec![n, d], out))
}

/// One row of the implicit attention matrix.
#[derive(Clone, Debug)]
pub struct AttentionMap<T> {
    pub query: usize,
    /// Length-`N` row of `phi_q(Q) phi_k(K)^T`.
    pub scores: Tensor<T>,
}

impl<T: Float> AttentionMap<T> {
    /// The scores laid out on the `sqrt(N) x sqrt(N)` token grid.
    pub fn spatial(&self) -> Result<Tensor<T>> {
        let side = square_side(self.scores.numel())?;
        self.scores.reshape(&[side, side])
    }
}

/// Materialises row `query` of `phi_q(Q) phi_k(K)^T` for `N x d` inputs.
pub fn attention_map<T: Float>(q: &Tensor<T>, k: &Tensor<T>, query: usize) -> Result<AttentionMap<T>> {
    if q.rank() != 2 || q.shape() != k.shape() {
        return dim_err(format!("attention_map expects matching N x d, got {:?} and {:?}", q.shape(), k.shape()));
    }
    let (n, d) = (q.shape()[0], q.shape()[1]);
    if query >= n {
        return Err(Error::Bounds(format!("query index {query} with {n} tokens")));
    }
    let row = Tensor::from_parts(vec![1, d], q.data()[query * d..(query + 1) * d].to_vec());
    let fq = softmax_forward(row.data(), 1, d, 1);
    let fk = softmax_forward(k.data(), 1, n, d);
    let mut scores = vec![T::zero(); n];
    gemm(1, d, n, &fq, Layout::N, &fk, Layout::T, &mut scores, false);
    Ok(AttentionMap { query, scores: Tensor::from_parts(vec![n], scores) })
}

/// Branch layout and head width of a multi-scale linear attention module.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MslaConfig {
    pub channels: usize,
    pub head_width: usize,
    /// One odd depth-wise kernel size per branch.
    pub kernels: Vec<usize>,
}

/// Kernel sizes `2i + 1` for branches `i = 1..=4`.
pub const DEFAULT_KERNELS: [usize; 4] = [3, 5, 7, 9];

impl MslaConfig {
    pub fn new(channels: usize, head_width: usize, kernels: Vec<usize>) -> Result<Self> {
        let cfg = Self { channels, head_width, kernels };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_default_kernels(channels: usize, head_width: usize) -> Result<Self> {
        Self::new(channels, head_width, DEFAULT_KERNELS.to_vec())
    }

    pub fn validate(&self) -> Result<()> {
        let b = self.kernels.len();
        if b != 2 && b != 4 {
            return Err(Error::Config(format!("MSLA supports 2 or 4 branches, got {b}")));
        }
        if let Some(k) = self.kernels.iter().find(|&&k| k % 2 == 0) {
            return Err(Error::Config(format!("MSLA kernel size {k} must be odd")));
        }
        if self.head_width == 0 || !self.channels.is_multiple_of(b) {
            return Err(Error::Config(format!("channels {} not divisible by branch count {b}", self.channels)));
        }
        if !self.branch_channels().is_multiple_of(self.head_width) {
            return Err(Error::Config(format!(
                "branch width {} not divisible by head width {}",
                self.branch_channels(),
                self.head_width
            )));
        }
        Ok(())
    }

    pub fn branches(&self) -> usize {
        self.kernels.len()
    }

    pub fn branch_channels(&self) -> usize {
        self.channels / self.branches()
    }

    pub fn heads(&self) -> usize {
        self.branch_channels() / self.head_width
    }
}

/// Multi-scale linear attention: channel split, per-branch depth-wise
/// convolution with residual and ReLU, per-head efficient attention, head
/// merge, scalar-weighted branch fusion by a 1x1 convolution.
#[derive(Clone, Debug)]
pub struct Msla {
    pub prefix: String,
    pub cfg: MslaConfig,
    branch_convs: Vec<Conv2d>,
    fusion: Conv2d,
}

impl Msla {
    pub fn new(prefix: String, cfg: MslaConfig) -> Result<Self> {
        cfg.validate()?;
        let cb = cfg.branch_channels();
        let branch_convs = cfg
            .kernels
            .iter()
            .enumerate()
            .map(|(i, &k)| Conv2d::depthwise(format!("{prefix}.dwconv.{i}"), cb, k))
            .collect();
        let fusion = Conv2d::pointwise(format!("{prefix}.fuse"), cfg.channels, cfg.channels);
        Ok(Self { prefix, cfg, branch_convs, fusion })
    }

    fn proj_name(&self, which: &str, branch: usize, head: usize) -> String {
        format!("{}.{which}.{branch}.{head}", self.prefix)
    }

    fn out_name(&self, branch: usize) -> String {
        format!("{}.wo.{branch}", self.prefix)
    }

    pub fn scale_name(&self, branch: usize) -> String {
        format!("{}.fuse_scale.{branch}", self.prefix)
    }

    pub fn fusion(&self) -> &Conv2d {
        &self.fusion
    }

    pub fn init<T: Float>(&self, store: &mut ParamStore<T>, init: &mut Init) {
        let (cb, d) = (self.cfg.branch_channels(), self.cfg.head_width);
        for (i, conv) in self.branch_convs.iter().enumerate() {
            conv.init(store, init);
            for h in 0..self.cfg.heads() {
                for which in ["wq", "wk", "wv"] {
                    store.insert(self.proj_name(which, i, h), init.weight(&[cb, d]), Kind::Param);
                }
            }
            store.insert(self.out_name(i), init.weight(&[cb, cb]), Kind::Param);
            store.insert(self.scale_name(i), Tensor::ones(&[1]), Kind::Param);
        }
        self.fusion.init(store, init);
    }

    /// Splits a `B x C x s x s` map into branches and applies
    /// `ReLU(dwconv_k(X_i) + X_i)` to each.
    pub fn multi_scale_extract<T: Float>(&self, g: &mut Graph<T>, store: &ParamStore<T>, map: Var) -> Result<Vec<Var>> {
        let shape = g.shape(map).to_vec();
        if shape.len() != 4 || shape[1] != self.cfg.channels {
            return Err(Error::Config(format!("MSLA over {} channels got map of shape {shape:?}", self.cfg.channels)));
        }
        let cb = self.cfg.branch_channels();
        let mut out = Vec::with_capacity(self.cfg.branches());
        for (i, conv) in self.branch_convs.iter().enumerate() {
            let xi = g.narrow(map, 1, i * cb, cb)?;
            let local = conv.forward(g, store, xi)?;
            let sum = g.add(local, xi)?;
            out.push(g.relu(sum));
        }
        Ok(out)
    }

    /// `B x N x C` tokens in, `B x N x C` tokens out; `N` must be a perfect square.
    pub fn forward<T: Float>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let n = g.shape(x).get(1).copied().unwrap_or(0);
        let side = square_side(n)?;
        self.forward_grid(g, store, x, side, side)
    }

    /// As [`Msla::forward`] for tokens laid out on an `h x w` grid.
    pub fn forward_grid<T: Float>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        h: usize,
        w: usize,
    ) -> Result<Var> {
        let map = g.tokens_to_map(x, h, w)?;
        let branches = self.multi_scale_extract(g, store, map)?;
        let mut fused_inputs = Vec::with_capacity(branches.len());
        for (i, &branch) in branches.iter().enumerate() {
            let tokens = g.map_to_tokens(branch)?;
            let mut heads = Vec::with_capacity(self.cfg.heads());
            for h in 0..self.cfg.heads() {
                let mut proj = |which: &str| -> Result<Var> {
                    let name = self.proj_name(which, i, h);
                    let w = g.param(&name, store.get(&name)?);
                    g.matmul(tokens, w)
                };
                let (q, k, v) = (proj("wq")?, proj("wk")?, proj("wv")?);
                if g.capturing() {
                    g.capture(self.proj_name("q", i, h), q);
                    g.capture(self.proj_name("k", i, h), k);
                }
                heads.push(efficient_attention(g, q, k, v)?);
            }
            let merged = if heads.len() == 1 { heads[0] } else { g.concat(&heads, 2)? };
            let wo = g.param(&self.out_name(i), store.get(&self.out_name(i))?);
            let o = g.matmul(merged, wo)?;
            let om = g.tokens_to_map(o, h, w)?;
            let s = g.param(&self.scale_name(i), store.get(&self.scale_name(i))?);
            fused_inputs.push(g.scale(om, s)?);
        }
        let cat = g.concat(&fused_inputs, 1)?;
        let fused = self.fusion.forward(g, store, cat)?;
        g.map_to_tokens(fused)
    }

    /// Multiply-accumulates for one image on an `h x w` token grid.
    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let n = h * w;
        let cb = self.cfg.branch_channels();
        let d = self.cfg.head_width;
        let per_branch: u64 = self
            .branch_convs
            .iter()
            .map(|c| c.macs(h, w) + (3 * n * cb * cb + 2 * n * d * cb + n * cb * cb) as u64)
            .sum();
        per_branch + self.fusion.macs(h, w)
    }
}

/// Multiply-accumulates of single-head efficient attention on `N x d`.
pub fn efficient_attention_macs(n: usize, d: usize) -> u64 {
    2 * (n * d * d) as u64
}

/// Multiply-accumulates of single-head softmax attention on `N x d`.
pub fn softmax_attention_macs(n: usize, d: usize) -> u64 {
    2 * (n * n * d) as u64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Mode;

    fn pseudo(shape: &[usize], seed: f64) -> Tensor<f64> {
        Tensor::from_fn(shape, |i| ((i as f64 + 1.0) * seed).sin() * 2.0)
    }

    #[test]
    fn single_token_returns_values() {
        let q = pseudo(&[1, 4], 0.3);
        let k = pseudo(&[1, 4], 0.7);
        let v = pseudo(&[1, 4], 1.1);
        let out = efficient_attention_linear(&q, &k, &v).unwrap();
        assert!(out.max_abs_diff(&v) < 1e-15);
    }

    #[test]
    fn constant_values_pass_through() {
        let q = pseudo(&[6, 3], 0.3);
        let k = pseudo(&[6, 3], 0.7);
        let v = Tensor::full(&[6, 3], 2.5);
        let out = efficient_attention_linear(&q, &k, &v).unwrap();
        assert!(out.max_abs_diff(&v) < 1e-12);
    }

    #[test]
    fn map_row_is_stochastic_and_bounds_checked() {
        let q = pseudo(&[9, 4], 0.9);
        let k = pseudo(&[9, 4], 0.4);
        let m = attention_map(&q, &k, 5).unwrap();
        assert!((m.scores.sum() - 1.0).abs() < 1e-12);
        assert!(m.scores.data().iter().all(|&s| s >= 0.0));
        assert_eq!(m.spatial().unwrap().shape(), &[3, 3]);
        assert!(matches!(attention_map(&q, &k, 9), Err(Error::Bounds(_))));
        let one = attention_map(&pseudo(&[1, 4], 0.2), &pseudo(&[1, 4], 0.6), 0).unwrap();
        assert_eq!(one.scores.data(), &[1.0]);
    }

    #[test]
    fn config_validation() {
        assert!(MslaConfig::new(16, 4, vec![3, 5, 7, 9]).is_ok());
        assert!(MslaConfig::new(16, 4, vec![5, 7]).is_ok());
        assert!(MslaConfig::new(18, 4, vec![3, 5, 7, 9]).is_err());
        assert!(MslaConfig::new(16, 3, vec![3, 5, 7, 9]).is_err());
        assert!(MslaConfig::new(16, 4, vec![3, 5, 7]).is_err());
        assert!(MslaConfig::new(16, 4, vec![2, 4]).is_err());
    }

    #[test]
    fn zero_kernel_branch_is_relu_of_input() {
        let cfg = MslaConfig::with_default_kernels(16, 4).unwrap();
        let m = Msla::new("m".into(), cfg).unwrap();
        let mut store = ParamStore::<f64>::new();
        m.init(&mut store, &mut Init::new(1));
        for i in 0..4 {
            let name = format!("m.dwconv.{i}.weight");
            let shape = store.get(&name).unwrap().shape().to_vec();
            store.set(&name, Tensor::zeros(&shape)).unwrap();
        }
        let x = pseudo(&[1, 16, 4, 4], 0.77);
        let mut g = Graph::new(Mode::Eval);
        let xv = g.constant(x.clone());
        let parts = m.multi_scale_extract(&mut g, &store, xv).unwrap();
        assert_eq!(parts.len(), 4);
        for (i, p) in parts.iter().enumerate() {
            let got = g.value(*p);
            assert_eq!(got.shape(), &[1, 4, 4, 4]);
            for c in 0..4 {
                for s in 0..16 {
                    let want = x.data()[(i * 4 + c) * 16 + s].max(0.0);
                    assert_eq!(got.data()[c * 16 + s], want);
                }
            }
        }
    }
}
