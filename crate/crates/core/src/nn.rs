//! Named parameter storage with the layer helpers and Adam optimizer built on it.

use std::collections::{BTreeMap, HashMap};

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};

/// Ordered collection of named parameter matrices.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Array2<f64>>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array2<f64>) {
        let name = name.into();
        if let Some(&i) = self.index.get(&name) {
            self.values[i] = value;
            return;
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.values.push(value);
    }

    pub fn get(&self, name: &str) -> Option<&Array2<f64>> {
        self.index.get(name).map(|&i| &self.values[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array2<f64>> {
        self.index.get(name).map(|&i| &mut self.values[i])
    }

    pub fn require(&self, name: &str) -> Result<&Array2<f64>> {
        self.get(name)
            .ok_or_else(|| Error::NotFound(format!("parameter `{name}`")))
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<f64>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn value_at(&self, idx: usize) -> &Array2<f64> {
        &self.values[idx]
    }

    pub fn value_at_mut(&mut self, idx: usize) -> &mut Array2<f64> {
        &mut self.values[idx]
    }

    /// Copies every parameter of `other` whose name starts with `prefix`.
    pub fn absorb_prefixed(&mut self, other: &ParamStore, prefix: &str) {
        for (name, value) in other.iter() {
            if name.starts_with(prefix) {
                self.insert(name, value.clone());
            }
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.iter().all(|x| x.is_finite()))
    }

    /// Checks that `name` exists with the given dimensions.
    pub fn expect_dim(&self, name: &str, dim: (usize, usize)) -> Result<()> {
        let v = self.require(name)?;
        if v.dim() != dim {
            return Err(Error::Shape(format!(
                "parameter `{name}` is {:?}, expected {:?}",
                v.dim(),
                dim
            )));
        }
        Ok(())
    }
}

/// Binds parameters from a [`ParamStore`] onto a tape on first use.
pub struct Graph<'a> {
    pub tape: Tape,
    params: &'a ParamStore,
    bound: HashMap<usize, Var>,
    frozen: Vec<String>,
}

impl<'a> Graph<'a> {
    pub fn new(params: &'a ParamStore) -> Self {
        Self {
            tape: Tape::new(),
            params,
            bound: HashMap::new(),
            frozen: Vec::new(),
        }
    }

    /// Parameters under any of these prefixes enter the tape as constants.
    pub fn with_frozen(mut self, prefixes: &[&str]) -> Self {
        self.frozen = prefixes.iter().map(|p| p.to_string()).collect();
        self
    }

    pub fn params(&self) -> &'a ParamStore {
        self.params
    }

    pub fn p(&mut self, name: &str) -> Result<Var> {
        let idx = self
            .params
            .index_of(name)
            .ok_or_else(|| Error::NotFound(format!("parameter `{name}`")))?;
        if let Some(&v) = self.bound.get(&idx) {
            return Ok(v);
        }
        let value = self.params.value_at(idx).clone();
        let v = if self.frozen.iter().any(|f| name.starts_with(f.as_str())) {
            self.tape.constant(value)
        } else {
            self.tape.param(value)
        };
        self.bound.insert(idx, v);
        Ok(v)
    }

    /// `x · W + b` using `{prefix}.weight` and `{prefix}.bias`.
    pub fn linear(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let w = self.p(&format!("{prefix}.weight"))?;
        let b = self.p(&format!("{prefix}.bias"))?;
        let xin = self.tape.value(x).ncols();
        let win = self.tape.value(w).nrows();
        if xin != win {
            return Err(Error::Shape(format!(
                "`{prefix}` expects {win} input features, got {xin}"
            )));
        }
        let y = self.tape.matmul(x, w);
        Ok(self.tape.add_row(y, b))
    }

    /// Stack of linear layers `{prefix}.{i}` with ReLU after every layer,
    /// except the last one when `final_activation` is false.
    pub fn mlp(
        &mut self,
        prefix: &str,
        layers: usize,
        x: Var,
        final_activation: bool,
    ) -> Result<Var> {
        let mut h = x;
        for i in 0..layers {
            h = self.linear(&format!("{prefix}.{i}"), h)?;
            if i + 1 < layers || final_activation {
                h = self.tape.relu(h);
            }
        }
        Ok(h)
    }

    /// Gradients for every parameter bound as trainable, keyed by store index.
    pub fn collect(&self, grads: &mut Gradients) -> GradBuffer {
        let mut buf = GradBuffer::zeros_like(self.params);
        for (&idx, &var) in &self.bound {
            if let Some(g) = grads.take(var) {
                buf.grads[idx] = Some(g);
            }
        }
        buf
    }
}

/// Gradients aligned with the parameters of one [`ParamStore`].
#[derive(Debug, Clone)]
pub struct GradBuffer {
    pub grads: Vec<Option<Array2<f64>>>,
}

impl GradBuffer {
    pub fn zeros_like(params: &ParamStore) -> Self {
        Self {
            grads: vec![None; params.len()],
        }
    }

    pub fn accumulate(&mut self, other: GradBuffer) {
        for (dst, src) in self.grads.iter_mut().zip(other.grads) {
            match (dst.as_mut(), src) {
                (Some(d), Some(s)) => *d += &s,
                (None, Some(s)) => *dst = Some(s),
                _ => {}
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.grads.iter_mut().flatten() {
            *g *= factor;
        }
    }

    pub fn by_name<'a>(&'a self, params: &'a ParamStore, name: &str) -> Option<&'a Array2<f64>> {
        params.index_of(name).and_then(|i| self.grads[i].as_ref())
    }

    pub fn all_finite(&self) -> bool {
        self.grads
            .iter()
            .flatten()
            .all(|g| g.iter().all(|x| x.is_finite()))
    }
}

/// Adds `{prefix}.weight` (in×out, scaled uniform) and a zero `{prefix}.bias`.
pub fn init_linear(
    store: &mut ParamStore,
    prefix: &str,
    inputs: usize,
    outputs: usize,
    rng: &mut impl Rng,
) {
    let bound = (6.0 / (inputs + outputs) as f64).sqrt();
    let w = Array2::from_shape_fn((inputs, outputs), |_| rng.random_range(-bound..bound));
    store.insert(format!("{prefix}.weight"), w);
    store.insert(format!("{prefix}.bias"), Array2::zeros((1, outputs)));
}

pub fn init_zero_linear(store: &mut ParamStore, prefix: &str, inputs: usize, outputs: usize) {
    store.insert(format!("{prefix}.weight"), Array2::zeros((inputs, outputs)));
    store.insert(format!("{prefix}.bias"), Array2::zeros((1, outputs)));
}

/// Linear layers `{prefix}.0 .. {prefix}.{n-1}` mapping `input` through `widths`.
pub fn init_mlp(
    store: &mut ParamStore,
    prefix: &str,
    input: usize,
    widths: &[usize],
    rng: &mut impl Rng,
) {
    let mut fan_in = input;
    for (i, &w) in widths.iter().enumerate() {
        init_linear(store, &format!("{prefix}.{i}"), fan_in, w, rng);
        fan_in = w;
    }
}

pub fn init_layer_norm(store: &mut ParamStore, prefix: &str, width: usize) {
    store.insert(format!("{prefix}.gamma"), Array2::ones((1, width)));
    store.insert(format!("{prefix}.beta"), Array2::zeros((1, width)));
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moment estimates, one pair per parameter.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    moments: BTreeMap<usize, (Array2<f64>, Array2<f64>)>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update to every parameter that has a gradient.
    pub fn update(&mut self, params: &mut ParamStore, grads: &GradBuffer) {
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bias1 = 1.0 - c.beta1.powi(t);
        let bias2 = 1.0 - c.beta2.powi(t);
        for (idx, g) in grads.grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let value = params.value_at_mut(idx);
            let (m, v) = self
                .moments
                .entry(idx)
                .or_insert_with(|| (Array2::zeros(g.dim()), Array2::zeros(g.dim())));
            ndarray::Zip::from(value)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                    *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                    let mhat = *m / bias1;
                    let vhat = *v / bias2;
                    *p -= c.learning_rate * mhat / (vhat.sqrt() + c.eps);
                });
        }
    }
}
