//! Named parameter storage and the layer helpers built on top of it.
//!
//! Parameters live in a [`ParamStore`] keyed by dotted hierarchical names
//! (`enc_img.l1.b0.attn.qkv.weight`). Iteration order is the sorted name
//! order, which keeps checkpoints and optimizer updates deterministic.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Gradients, Graph, Var};
use crate::error::{ensure, Error, Result};
use crate::tensor::Tensor;

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    /// Number of named tensors.
    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Every parameter as a trainable leaf of `graph`.
    pub fn bind<'g>(&self, graph: &'g Graph) -> Params<'g> {
        self.bind_with(graph, true)
    }

    /// Every parameter as a constant of `graph`, for inference.
    pub fn bind_frozen<'g>(&self, graph: &'g Graph) -> Params<'g> {
        self.bind_with(graph, false)
    }

    fn bind_with<'g>(&self, graph: &'g Graph, trainable: bool) -> Params<'g> {
        let vars = self
            .tensors
            .iter()
            .map(|(k, t)| {
                let v = if trainable {
                    graph.variable(t.clone())
                } else {
                    graph.constant(t.clone())
                };
                (k.clone(), v)
            })
            .collect();
        Params { graph, vars }
    }

    /// Checks that `other` has exactly the same names and shapes.
    pub fn check_compatible(&self, other: &ParamStore) -> Result<()> {
        ensure!(
            self.len() == other.len(),
            Error::Config(format!(
                "parameter count mismatch: {} vs {}",
                self.len(),
                other.len()
            ))
        );
        for ((ka, ta), (kb, tb)) in self.iter().zip(other.iter()) {
            ensure!(
                ka == kb && ta.shape() == tb.shape(),
                Error::Config(format!(
                    "parameter mismatch: {ka}{:?} vs {kb}{:?}",
                    ta.shape(),
                    tb.shape()
                ))
            );
        }
        Ok(())
    }
}

/// A [`ParamStore`] bound to one graph.
pub struct Params<'g> {
    graph: &'g Graph,
    vars: BTreeMap<String, Var<'g>>,
}

impl<'g> Params<'g> {
    /// Wraps existing vars, e.g. leaves created by a gradient checker.
    pub fn from_vars(graph: &'g Graph, vars: impl IntoIterator<Item = (String, Var<'g>)>) -> Self {
        Self {
            graph,
            vars: vars.into_iter().collect(),
        }
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn get(&self, name: &str) -> Var<'g> {
        match self.vars.get(name) {
            Some(v) => *v,
            None => panic!("unknown parameter {name:?}"),
        }
    }

    pub fn try_get(&self, name: &str) -> Option<Var<'g>> {
        self.vars.get(name).copied()
    }

    /// Gradient of every parameter, zeros for those the loss does not reach.
    pub fn grads(&self, grads: &Gradients) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .map(|(k, v)| (k.clone(), grads.get_or_zeros(*v)))
            .collect()
    }

    /// `name.weight` `[Co, Ci]` with an optional `name.bias`.
    pub fn conv1x1(&self, x: Var<'g>, name: &str) -> Var<'g> {
        x.conv1x1(
            self.get(&format!("{name}.weight")),
            self.try_get(&format!("{name}.bias")),
        )
    }

    pub fn dwconv3x3(&self, x: Var<'g>, name: &str) -> Var<'g> {
        x.dwconv3x3(
            self.get(&format!("{name}.weight")),
            self.get(&format!("{name}.bias")),
        )
    }

    pub fn conv3x3(&self, x: Var<'g>, name: &str) -> Var<'g> {
        x.conv3x3(
            self.get(&format!("{name}.weight")),
            self.get(&format!("{name}.bias")),
        )
    }

    pub fn layer_norm(&self, x: Var<'g>, name: &str) -> Var<'g> {
        x.layer_norm_channels(
            self.get(&format!("{name}.gamma")),
            self.get(&format!("{name}.beta")),
            LN_EPS,
        )
    }
}

/// Seeded parameter initialiser that fills a [`ParamStore`].
pub struct Init {
    rng: ChaCha8Rng,
    store: ParamStore,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            store: ParamStore::new(),
        }
    }

    pub fn finish(self) -> ParamStore {
        self.store
    }

    fn uniform(&mut self, shape: Vec<usize>, bound: f64) -> Tensor {
        let rng = &mut self.rng;
        Tensor::from_fn(shape, |_| rng.random_range(-bound..=bound))
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) {
        self.store.insert(name, Tensor::zeros(shape.to_vec()));
    }

    pub fn full(&mut self, name: &str, shape: &[usize], value: f64) {
        self.store.insert(name, Tensor::full(shape.to_vec(), value));
    }

    /// Pointwise convolution with the usual `1 / sqrt(fan_in)` uniform init.
    pub fn conv1x1(&mut self, name: &str, co: usize, ci: usize, bias: bool) {
        let w = self.uniform(vec![co, ci], 1.0 / (ci as f64).sqrt());
        self.store.insert(format!("{name}.weight"), w);
        if bias {
            self.zeros(&format!("{name}.bias"), &[co]);
        }
    }

    /// Pointwise convolution whose weight and bias start at zero.
    pub fn conv1x1_zero(&mut self, name: &str, co: usize, ci: usize) {
        self.zeros(&format!("{name}.weight"), &[co, ci]);
        self.zeros(&format!("{name}.bias"), &[co]);
    }

    pub fn dwconv3x3(&mut self, name: &str, c: usize) {
        let w = self.uniform(vec![c, 3, 3], 1.0 / 3.0);
        self.store.insert(format!("{name}.weight"), w);
        self.zeros(&format!("{name}.bias"), &[c]);
    }

    pub fn conv3x3(&mut self, name: &str, co: usize, ci: usize) {
        let w = self.uniform(vec![co, ci, 3, 3], 1.0 / ((9 * ci) as f64).sqrt());
        self.store.insert(format!("{name}.weight"), w);
        self.zeros(&format!("{name}.bias"), &[co]);
    }

    pub fn layer_norm(&mut self, name: &str, c: usize) {
        self.full(&format!("{name}.gamma"), &[c], 1.0);
        self.zeros(&format!("{name}.beta"), &[c]);
    }
}
