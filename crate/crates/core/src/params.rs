//! Named parameter and buffer storage plus the initialisers used by every
//! layer.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    /// Trainable.
    Param,
    /// Running statistics; saved in checkpoints, never optimised.
    Buffer,
}

#[derive(Clone, Debug)]
pub struct Entry<T> {
    pub tensor: Tensor<T>,
    pub kind: Kind,
}

/// Parameters keyed by hierarchical name (`enc.stage3.block2.msla.wq.1.0`).
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: BTreeMap<String, Entry<T>>,
}

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>, kind: Kind) {
        let name = name.into();
        assert!(!self.entries.contains_key(&name), "duplicate parameter name {name}");
        self.entries.insert(name, Entry { tensor, kind });
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.entries.get(name).map(|e| &e.tensor).ok_or_else(|| Error::Contract(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.entries
            .get_mut(name)
            .map(|e| &mut e.tensor)
            .ok_or_else(|| Error::Contract(format!("missing parameter {name}")))
    }

    pub fn kind(&self, name: &str) -> Option<Kind> {
        self.entries.get(name).map(|e| e.kind)
    }

    /// Replaces a value, keeping its shape.
    pub fn set(&mut self, name: &str, tensor: Tensor<T>) -> Result<()> {
        let slot = self.get_mut(name)?;
        if slot.shape() != tensor.shape() {
            return Err(Error::Contract(format!(
                "parameter {name} has shape {:?}, replacement has {:?}",
                slot.shape(),
                tensor.shape()
            )));
        }
        *slot = tensor;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Entry<T>)> {
        self.entries.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn trainable(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.entries.iter().filter(|(_, e)| e.kind == Kind::Param).map(|(n, e)| (n, &e.tensor))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of trainable scalars.
    pub fn count_params(&self) -> usize {
        self.trainable().map(|(_, t)| t.numel()).sum()
    }

    pub fn cast<U: Float>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(n, e)| (n.clone(), Entry { tensor: e.tensor.cast(), kind: e.kind }))
                .collect(),
        }
    }
}

/// Deterministic initialiser drawing from one seeded stream in call order.
pub struct Init {
    rng: ChaCha8Rng,
}

pub const INIT_STD: f64 = 0.02;

impl Init {
    pub fn new(seed: u64) -> Self {
        use rand::SeedableRng;
        Self { rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// Normal(0, std) truncated to two standard deviations.
    pub fn trunc_normal<T: Float>(&mut self, shape: &[usize], std: f64) -> Tensor<T> {
        Tensor::from_fn(shape, |_| loop {
            let z: f64 = StandardNormal.sample(&mut self.rng);
            if z.abs() <= 2.0 {
                break T::c(z * std);
            }
        })
    }

    pub fn uniform<T: Float>(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor<T> {
        Tensor::from_fn(shape, |_| T::c(self.rng.gen_range(lo..hi)))
    }

    pub fn weight<T: Float>(&mut self, shape: &[usize]) -> Tensor<T> {
        self.trunc_normal(shape, INIT_STD)
    }
}

/// Registers a weight and an optional zero bias.
pub fn add_weight<T: Float>(store: &mut ParamStore<T>, init: &mut Init, name: &str, shape: &[usize]) {
    store.insert(name, init.weight(shape), Kind::Param);
}

pub fn add_zeros<T: Float>(store: &mut ParamStore<T>, name: &str, shape: &[usize]) {
    store.insert(name, Tensor::zeros(shape), Kind::Param);
}

pub fn add_ones<T: Float>(store: &mut ParamStore<T>, name: &str, shape: &[usize]) {
    store.insert(name, Tensor::ones(shape), Kind::Param);
}
