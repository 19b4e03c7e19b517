//! Named parameter storage and per-pass binding onto a tape.
//!
//! Model structs hold [`ParamId`]s; the tensors themselves live in one
//! [`ParamStore`] so the optimizer, checkpointing and gradient checks can walk
//! every parameter uniformly.

use std::cell::RefCell;

use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::TensorError;
use crate::tensor::{numel, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers `tensor` under a unique dotted `name`.
    ///
    /// # Panics
    /// If `name` is already registered; parameter names are built from the
    /// schema and config, so a clash is a construction bug.
    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.tensors.push(tensor.with_grad());
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.tensors.iter_mut()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Adds gradients collected from a backward sweep into the grad buffers.
    pub fn accumulate(&mut self, grads: Vec<(ParamId, Vec<f64>)>) -> Result<(), TensorError> {
        for (id, g) in grads {
            self.tensors[id.0].accumulate_grad(&g)?;
        }
        Ok(())
    }

    /// Group label for a parameter: its name without the final component,
    /// e.g. `moe.expert0.fc1` for `moe.expert0.fc1.weight`.
    pub fn group_of(name: &str) -> &str {
        name.rsplit_once('.').map_or(name, |(g, _)| g)
    }
}

/// A [`ParamStore`] bound to one tape. Parameters are recorded as leaves on
/// first use, so each parameter appears on the tape at most once.
pub struct Bound<'t, 's> {
    tape: &'t Tape,
    store: &'s ParamStore,
    vars: RefCell<Vec<Option<Var<'t>>>>,
}

impl<'t, 's> Bound<'t, 's> {
    pub fn new(tape: &'t Tape, store: &'s ParamStore) -> Self {
        Self {
            tape,
            store,
            vars: RefCell::new(vec![None; store.len()]),
        }
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn p(&self, id: ParamId) -> Var<'t> {
        let mut vars = self.vars.borrow_mut();
        *vars[id.0].get_or_insert_with(|| self.tape.leaf(self.store.get(id)))
    }

    /// Records a data tensor (no gradient).
    pub fn input(&self, tensor: &Tensor) -> Var<'t> {
        self.tape.constant(tensor)
    }

    /// Moves every parameter gradient out of `grads`, indexed by
    /// [`ParamId::index`]; unused parameters get `None`.
    pub fn into_param_grads(&self, mut grads: Gradients) -> Vec<Option<Vec<f64>>> {
        self.vars
            .borrow()
            .iter()
            .map(|v| v.and_then(|v| grads.take(v)))
            .collect()
    }

    /// Extracts gradients for every parameter that was used in the pass.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<(ParamId, Vec<f64>)> {
        self.vars
            .borrow()
            .iter()
            .enumerate()
            .filter_map(|(i, v)| {
                let g = grads.get((*v)?)?;
                Some((ParamId(i), g.to_vec()))
            })
            .collect()
    }
}

/// Deterministic initializer. Every tensor draws from its own stream keyed by
/// `(seed, name)`, so a parameter's initial value does not depend on what
/// else the model contains or on construction order.
#[derive(Clone, Copy, Debug)]
pub struct Init {
    seed: u64,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    fn rng(&self, name: &str) -> ChaCha8Rng {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(name.as_bytes());
        let digest = h.finalize();
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest);
        ChaCha8Rng::from_seed(seed)
    }

    /// Scaled-uniform draw in `±sqrt(6 / (fan_in + fan_out))` for a
    /// `[fan_out, fan_in]` matrix.
    pub fn xavier(&self, name: &str, fan_out: usize, fan_in: usize) -> Tensor {
        let bound = xavier_bound(fan_in, fan_out);
        self.uniform(name, &[fan_out, fan_in], bound)
    }

    pub fn uniform(&self, name: &str, shape: &[usize], bound: f64) -> Tensor {
        let mut rng = self.rng(name);
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        let data = (0..numel(shape)).map(|_| dist.sample(&mut rng)).collect();
        Tensor::new(shape, data).expect("shape matches generated data")
    }
}

pub fn xavier_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}
