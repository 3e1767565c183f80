//! Differentiable layers: convolution, rectangular max-pooling, linear,
//! batch normalization, BiLSTM and the affine spatial-transformer sampler.
//!
//! Learned tensors live in a named [`Params`] table. A forward pass binds the
//! tensors it touches into a [`Graph`] through a [`Binder`], so the same
//! parameter table can drive any number of independent graphs.

mod conv;
mod lstm;
mod norm;
mod sampler;

use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Real, Tensor, Var};

pub use conv::{conv2d, conv_out_len, maxpool2d, Conv2d};
pub use lstm::BiLstm;
pub use norm::{batchnorm2d_eval, batchnorm2d_train, BatchNorm2d, BN_EPS, BN_MOMENTUM};
pub use sampler::{affine_grid_sample, resize_bilinear, sample_affine, AffineParams, SampleMode};

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry<T> {
    pub name: String,
    pub value: Tensor<T>,
    /// `false` for buffers such as batch-norm running statistics.
    pub trainable: bool,
}

/// Ordered table of named tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Params<T> {
    entries: Vec<ParamEntry<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> Params<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new(), index: HashMap::new() }
    }

    /// Registers a tensor. Names are unique; re-registering panics since it
    /// means two layers were given the same prefix.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>, trainable: bool) {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(ParamEntry { name, value, trainable });
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.entries[i].value)
    }

    pub fn entry(&self, name: &str) -> Option<&ParamEntry<T>> {
        self.index.get(name).map(|&i| &self.entries[i])
    }

    /// Replaces a tensor's value; the shape must not change.
    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let i = *self.index.get(name).ok_or_else(|| Error::ArchMismatch(format!("no parameter named {name}")))?;
        let slot = &mut self.entries[i].value;
        if slot.shape() != value.shape() {
            return Err(Error::ShapeMismatch(format!("{name}: {:?} vs {:?}", slot.shape(), value.shape())));
        }
        *slot = value;
        Ok(())
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index.get(name).map(|&i| &mut self.entries[i].value)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamEntry<T>> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.name.clone()).collect()
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.name.clone()).collect()
    }

    /// Number of trainable scalars.
    pub fn count(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.value.numel()).sum()
    }
}

/// Kaiming-uniform tensor for a ReLU layer with the given fan-in.
pub fn kaiming_uniform<T: Real>(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    uniform(shape, bound, rng)
}

pub fn uniform<T: Real>(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::lit(rng.random_range(-bound..=bound))).collect();
    Tensor::new(shape, data).expect("init shape")
}

/// Binds parameter tensors into one graph, lazily and at most once each.
pub struct Binder<'p, T: Real> {
    params: &'p Params<T>,
    vars: HashMap<String, Var>,
    train: bool,
    updates: Vec<(String, Tensor<T>)>,
}

impl<'p, T: Real> Binder<'p, T> {
    /// `train` controls both gradient tracking and batch-norm mode.
    pub fn new(params: &'p Params<T>, train: bool) -> Self {
        Self { params, vars: HashMap::new(), train, updates: Vec::new() }
    }

    /// Uses caller-provided graph variables instead of fresh leaves for the
    /// named parameters (gradient checks perturb parameters this way).
    pub fn with_overrides(mut self, names: &[String], vars: &[Var]) -> Self {
        for (n, &v) in names.iter().zip(vars) {
            self.vars.insert(n.clone(), v);
        }
        self
    }

    pub fn training(&self) -> bool {
        self.train
    }

    pub fn params(&self) -> &Params<T> {
        self.params
    }

    pub fn var(&mut self, g: &mut Graph<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.vars.get(name) {
            return Ok(v);
        }
        let entry = self.params.entry(name).ok_or_else(|| Error::ArchMismatch(format!("missing parameter {name}")))?;
        let v = g.leaf(entry.value.clone(), self.train && entry.trainable);
        self.vars.insert(name.to_string(), v);
        Ok(v)
    }

    /// Bound leaf for `name`, if the forward pass used it.
    pub fn bound(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    pub(crate) fn push_update(&mut self, name: String, value: Tensor<T>) {
        self.updates.push((name, value));
    }

    /// Buffer updates (running statistics) produced by the forward pass.
    pub fn take_updates(&mut self) -> Vec<(String, Tensor<T>)> {
        std::mem::take(&mut self.updates)
    }
}

/// Fully connected layer `y = x·W + b` with `W: [in × out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub name: String,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new<T: Real>(params: &mut Params<T>, name: &str, in_features: usize, out_features: usize, rng: &mut impl Rng) -> Self {
        params.insert(format!("{name}.weight"), kaiming_uniform(&[in_features, out_features], in_features, rng), true);
        params.insert(format!("{name}.bias"), Tensor::zeros(&[out_features]), true);
        Self { name: name.to_string(), in_features, out_features }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn param_count(&self) -> usize {
        self.in_features * self.out_features + self.out_features
    }

    /// Applies to the last axis of a tensor of any rank ≥ 2.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, b: &mut Binder<'_, T>, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        if shape.last() != Some(&self.in_features) {
            return Err(Error::ShapeMismatch(format!("{}: input {:?}, expected last dim {}", self.name, shape, self.in_features)));
        }
        let rows = shape[..shape.len() - 1].iter().product();
        let w = b.var(g, &self.weight_name())?;
        let bias = b.var(g, &self.bias_name())?;
        let flat = g.reshape(x, &[rows, self.in_features])?;
        let y = g.matmul(flat, w)?;
        let y = g.add_row_bias(y, bias)?;
        let mut out_shape = shape;
        *out_shape.last_mut().expect("rank >= 1") = self.out_features;
        g.reshape(y, &out_shape)
    }
}
