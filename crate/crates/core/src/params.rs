//! Named parameter storage and per-forward-pass binding into a [`Graph`].

use alloc::string::String;
use alloc::vec::Vec;
use core::ops::{Deref, DerefMut};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Gradients, Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Every learnable tensor of a model, in creation order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    /// Zero-filled buffers matching every parameter, for gradient accumulation.
    pub fn zero_grads(&self) -> Vec<Vec<f64>> {
        self.tensors.iter().map(|t| alloc::vec![0.0; t.len()]).collect()
    }

    /// Replaces all values from `other`, which must have the same names and shapes.
    pub fn assign_from(&mut self, other: &ParamStore) -> Result<()> {
        if self.names != other.names {
            return Err(Error::config("parameter names differ"));
        }
        for (a, b) in self.tensors.iter().zip(&other.tensors) {
            if a.shape() != b.shape() {
                return Err(Error::shape("assign_from", a.shape(), b.shape()));
            }
        }
        self.tensors.clone_from(&other.tensors);
        Ok(())
    }
}

/// Parameter initialisation helper threading a seeded RNG into a store.
pub struct Init<'a> {
    pub store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
}

impl<'a> Init<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng) -> Self {
        Self { store, rng }
    }

    /// Uniform in ±sqrt(6 / (fan_in + fan_out)).
    pub fn glorot(&mut self, name: String, d_in: usize, d_out: usize) -> ParamId {
        let bound = libm::sqrt(6.0 / (d_in + d_out) as f64);
        let rng = &mut *self.rng;
        let t = Tensor::from_fn(&[d_in, d_out], |_| rng.random_range(-bound..bound));
        self.store.add(name, t)
    }

    pub fn constant(&mut self, name: String, shape: &[usize], value: f64) -> ParamId {
        self.store.add(name, Tensor::full(shape, value))
    }
}

/// Dropout state carried by a training-mode [`Session`].
#[derive(Debug)]
struct Dropout {
    rate: f64,
    rng: ChaCha8Rng,
}

/// A graph plus lazily bound parameters for one forward/backward pass.
///
/// Parameters are copied into the graph as gradient-requiring leaves the
/// first time they are used, so untouched parameters cost nothing.
pub struct Session<'p> {
    pub graph: Graph,
    params: &'p ParamStore,
    bound: Vec<Option<Var>>,
    dropout: Option<Dropout>,
}

impl<'p> Session<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            graph: Graph::new(),
            params,
            bound: alloc::vec![None; params.len()],
            dropout: None,
        }
    }

    /// Enables dropout with the given rate, seeded per pass.
    pub fn with_dropout(mut self, rate: f64, seed: u64) -> Self {
        if rate > 0.0 {
            self.dropout = Some(Dropout {
                rate,
                rng: ChaCha8Rng::seed_from_u64(seed),
            });
        }
        self
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.graph.leaf(self.params.get(id).clone(), true);
        self.bound[id.0] = Some(v);
        v
    }

    /// Bound leaf of `id`, if this pass used it.
    pub fn bound(&self, id: ParamId) -> Option<Var> {
        self.bound[id.0]
    }

    /// Inverted dropout; identity when dropout is off.
    pub fn dropout(&mut self, x: Var) -> Result<Var> {
        let Some(d) = self.dropout.as_mut() else {
            return Ok(x);
        };
        let keep = 1.0 - d.rate;
        let shape = self.graph.shape(x).to_vec();
        let rng = &mut d.rng;
        let mask = Tensor::from_fn(&shape, |_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 });
        let m = self.graph.constant(mask);
        self.graph.mul(x, m)
    }

    /// Adds `weight · ∂loss/∂p` into `into[p]` for every bound parameter.
    pub fn accumulate_grads(&self, grads: &Gradients, into: &mut [Vec<f64>], weight: f64) {
        for (i, b) in self.bound.iter().enumerate() {
            let Some(v) = b else { continue };
            if let Some(g) = grads.slice(*v) {
                for (o, &x) in into[i].iter_mut().zip(g) {
                    *o += weight * x;
                }
            }
        }
    }

    /// Gradient of each parameter (zeros for parameters the pass never touched).
    pub fn param_grads(&self, grads: &Gradients) -> Vec<Vec<f64>> {
        let mut out = self.params.zero_grads();
        self.accumulate_grads(grads, &mut out, 1.0);
        out
    }
}

impl Deref for Session<'_> {
    type Target = Graph;

    fn deref(&self) -> &Graph {
        &self.graph
    }
}

impl DerefMut for Session<'_> {
    fn deref_mut(&mut self) -> &mut Graph {
        &mut self.graph
    }
}
