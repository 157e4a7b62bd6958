//! Named parameter tensors and their binding into a differentiation graph.

use indexmap::IndexMap;
use ndarray::{Array1, Array4, ArrayD};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::nn::graph::{Graph, NodeId};

/// Ordered map of parameter name to tensor. Iteration order is insertion
/// order, which keeps optimizer updates and checkpoints deterministic.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: IndexMap<String, ArrayD<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: ArrayD<f64>) {
        let name = name.into();
        debug_assert!(
            !self.tensors.contains_key(&name),
            "duplicate parameter {name}"
        );
        self.tensors.insert(name, value);
    }

    pub fn get(&self, name: &str) -> Result<&ArrayD<f64>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::config(format!("unknown parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut ArrayD<f64>> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::config(format!("unknown parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ArrayD<f64>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut ArrayD<f64>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    /// Zeroes every tensor whose name starts with `prefix`.
    pub fn zero_prefix(&mut self, prefix: &str) {
        for (name, tensor) in self.tensors.iter_mut() {
            if name.starts_with(prefix) {
                tensor.fill(0.0);
            }
        }
    }
}

/// Per-graph cache of parameter leaves, so each parameter appears exactly
/// once in a tape no matter how many layers use it.
pub struct GraphParams<'s> {
    store: &'s ParamStore,
    bound: IndexMap<String, NodeId>,
}

impl<'s> GraphParams<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        GraphParams {
            store,
            bound: IndexMap::new(),
        }
    }

    pub fn node(&mut self, g: &mut Graph, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.bound.get(name) {
            return Ok(id);
        }
        let id = g.leaf(self.store.get(name)?.clone());
        self.bound.insert(name.to_string(), id);
        Ok(id)
    }

    /// All parameters bound into the graph so far, in first-use order.
    pub fn bound(&self) -> impl Iterator<Item = (&String, NodeId)> {
        self.bound.iter().map(|(n, &id)| (n, id))
    }
}

/// Kaiming fan-in initialization for a `(out, in, k, k)` convolution kernel.
pub fn kaiming_conv(rng: &mut ChaCha8Rng, out_c: usize, in_c: usize, k: usize) -> ArrayD<f64> {
    let std = (2.0 / (in_c * k * k) as f64).sqrt();
    Array4::from_shape_fn((out_c, in_c, k, k), |_| {
        let z: f64 = StandardNormal.sample(rng);
        z * std
    })
    .into_dyn()
}

/// Small-magnitude initialization used for the final excitation layer so the
/// initial gates sit near sigmoid(0) = 0.5.
pub fn near_zero_conv(rng: &mut ChaCha8Rng, out_c: usize, in_c: usize, k: usize) -> ArrayD<f64> {
    Array4::from_shape_fn((out_c, in_c, k, k), |_| {
        let z: f64 = StandardNormal.sample(rng);
        z * 1e-3
    })
    .into_dyn()
}

pub fn zero_bias(out_c: usize) -> ArrayD<f64> {
    Array1::<f64>::zeros(out_c).into_dyn()
}

/// Registers a conv layer (`<prefix>.w`, `<prefix>.b`) with Kaiming weights.
pub fn register_conv(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    out_c: usize,
    in_c: usize,
    k: usize,
) {
    store.insert(format!("{prefix}.w"), kaiming_conv(rng, out_c, in_c, k));
    store.insert(format!("{prefix}.b"), zero_bias(out_c));
}

/// Draws a uniform value; tiny convenience wrapper so callers keep a single
/// rng type.
pub fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    rng.gen_range(lo..hi)
}
