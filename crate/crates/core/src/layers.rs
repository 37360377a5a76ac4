//! Thin parameterised wrappers over graph ops: each layer knows its parameter
//! names, how to initialise them and how many multiply-accumulates it costs.

use crate::autodiff::{Graph, Var, LN_EPS};
use crate::error::Result;
use crate::params::{add_ones, add_weight, add_zeros, Init, Kind, ParamStore};
use crate::tensor::{Float, Tensor};

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
    pub bias: bool,
}

impl Conv2d {
    /// Spatial-preserving convolution (`pad = (k - 1) / 2`, stride 1).
    pub fn same(name: String, cin: usize, cout: usize, k: usize, groups: usize) -> Self {
        Self { name, cin, cout, k, stride: 1, pad: (k - 1) / 2, groups, bias: true }
    }

    pub fn pointwise(name: String, cin: usize, cout: usize) -> Self {
        Self::same(name, cin, cout, 1, 1)
    }

    pub fn depthwise(name: String, c: usize, k: usize) -> Self {
        Self::same(name, c, c, k, c)
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn init<T: Float>(&self, store: &mut ParamStore<T>, init: &mut Init) {
        add_weight(store, init, &self.weight_name(), &[self.cout, self.cin / self.groups, self.k, self.k]);
        if self.bias {
            add_zeros(store, &self.bias_name(), &[self.cout]);
        }
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(&self.weight_name(), store.get(&self.weight_name())?);
        let b = if self.bias { Some(g.param(&self.bias_name(), store.get(&self.bias_name())?)) } else { None };
        g.conv2d(x, w, b, self.stride, self.pad, self.groups)
    }

    pub fn out_extent(&self, n: usize) -> usize {
        (n + 2 * self.pad - self.k) / self.stride + 1
    }

    /// Multiply-accumulates for one `h x w` input image.
    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let (ho, wo) = (self.out_extent(h), self.out_extent(w));
        (self.cout * (self.cin / self.groups) * self.k * self.k * ho * wo) as u64
    }
}

/// Token-wise affine map on the last axis; weight stored `cin x cout`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub bias: bool,
}

impl Linear {
    pub fn new(name: String, cin: usize, cout: usize, bias: bool) -> Self {
        Self { name, cin, cout, bias }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn init<T: Float>(&self, store: &mut ParamStore<T>, init: &mut Init) {
        add_weight(store, init, &self.weight_name(), &[self.cin, self.cout]);
        if self.bias {
            add_zeros(store, &self.bias_name(), &[self.cout]);
        }
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(&self.weight_name(), store.get(&self.weight_name())?);
        let y = g.matmul(x, w)?;
        if self.bias {
            let b = g.param(&self.bias_name(), store.get(&self.bias_name())?);
            let axis = g.shape(y).len() - 1;
            g.add_bias(y, b, axis)
        } else {
            Ok(y)
        }
    }

    pub fn macs(&self, tokens: usize) -> u64 {
        (tokens * self.cin * self.cout) as u64
    }
}

/// Layer normalisation over one axis (`eps = 1e-6`).
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub name: String,
    pub c: usize,
}

impl LayerNorm {
    pub fn new(name: String, c: usize) -> Self {
        Self { name, c }
    }

    pub fn init<T: Float>(&self, store: &mut ParamStore<T>) {
        add_ones(store, &format!("{}.weight", self.name), &[self.c]);
        add_zeros(store, &format!("{}.bias", self.name), &[self.c]);
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, axis: usize) -> Result<Var> {
        let (wn, bn) = (format!("{}.weight", self.name), format!("{}.bias", self.name));
        let gamma = g.param(&wn, store.get(&wn)?);
        let beta = g.param(&bn, store.get(&bn)?);
        g.layer_norm(x, axis, gamma, beta, LN_EPS)
    }
}

/// Batch normalisation with running statistics kept as buffers.
#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub name: String,
    pub c: usize,
}

impl BatchNorm2d {
    pub fn new(name: String, c: usize) -> Self {
        Self { name, c }
    }

    pub fn init<T: Float>(&self, store: &mut ParamStore<T>) {
        add_ones(store, &format!("{}.weight", self.name), &[self.c]);
        add_zeros(store, &format!("{}.bias", self.name), &[self.c]);
        store.insert(format!("{}.running_mean", self.name), Tensor::zeros(&[self.c]), Kind::Buffer);
        store.insert(format!("{}.running_var", self.name), Tensor::ones(&[self.c]), Kind::Buffer);
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let (wn, bn) = (format!("{}.weight", self.name), format!("{}.bias", self.name));
        let gamma = g.param(&wn, store.get(&wn)?);
        let beta = g.param(&bn, store.get(&bn)?);
        let rm = store.get(&format!("{}.running_mean", self.name))?;
        let rv = store.get(&format!("{}.running_var", self.name))?;
        g.batch_norm2d(x, gamma, beta, rm, rv, &self.name)
    }
}
