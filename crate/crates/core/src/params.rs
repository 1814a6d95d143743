//! Named parameter registry shared by every layer of the model.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{GtiError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    /// Frozen parameters never receive gradients or optimizer updates.
    pub frozen: bool,
    /// Inactive parameters are registered but not wired into the forward pass
    /// of the configured variant.
    pub active: bool,
}

impl Param {
    pub fn trainable(&self) -> bool {
        !self.frozen && self.active
    }
}

#[derive(Clone, Debug)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, usize>,
    seed: u64,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        ParamStore {
            params: Vec::new(),
            index: HashMap::new(),
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn register(&mut self, name: &str, value: Tensor) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(GtiError::arg(format!("duplicate parameter name `{name}`")));
        }
        let id = self.params.len();
        self.params.push(Param {
            name: name.to_string(),
            value,
            frozen: false,
            active: true,
        });
        self.index.insert(name.to_string(), id);
        Ok(ParamId(id))
    }

    /// Registers a tensor with entries drawn from `U[-bound, bound]`.
    pub fn register_uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<ParamId> {
        let mut t = Tensor::zeros(shape);
        for x in t.data_mut() {
            *x = self.rng.gen_range(-bound..=bound);
        }
        self.register(name, t)
    }

    /// Glorot-uniform init for a `[fan_out, fan_in]` matrix.
    pub fn register_glorot(&mut self, name: &str, fan_out: usize, fan_in: usize) -> Result<ParamId> {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        self.register_uniform(name, &[fan_out, fan_in], bound)
    }

    pub fn init_rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        self.params[id.0].frozen = frozen;
    }

    pub fn set_active(&mut self, id: ParamId, active: bool) {
        self.params[id.0].active = active;
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn by_name(&self, name: &str) -> Option<&Param> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Total scalar count over parameters that take part in the computation.
    pub fn active_count(&self) -> usize {
        self.params.iter().filter(|p| p.active).map(|p| p.value.numel()).sum()
    }

    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable())
            .map(|p| p.value.numel())
            .sum()
    }
}

/// Gradients produced by one backward pass, indexed by parameter.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn new(n_params: usize) -> Self {
        Gradients {
            grads: vec![None; n_params],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn accumulate(&mut self, id: ParamId, g: &Tensor) {
        if self.grads.len() <= id.0 {
            self.grads.resize(id.0 + 1, None);
        }
        match &mut self.grads[id.0] {
            Some(acc) => acc.add_assign(g),
            slot @ None => *slot = Some(g.clone()),
        }
    }

    /// Adds `scale * other` into `self`.
    pub fn merge_scaled(&mut self, other: &Gradients, scale: f64) {
        for (i, g) in other.grads.iter().enumerate() {
            if let Some(g) = g {
                self.accumulate(ParamId(i), &g.map(|x| x * scale));
            }
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }

    /// Name → gradient map; parameters that received no gradient are absent.
    pub fn named(&self, store: &ParamStore) -> HashMap<String, Tensor> {
        self.iter()
            .map(|(id, g)| (store.get(id).name.clone(), g.clone()))
            .collect()
    }

    pub fn global_norm(&self) -> f64 {
        self.iter()
            .flat_map(|(_, g)| g.data().iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.grads.iter_mut().flatten() {
            for x in g.data_mut() {
                *x *= factor;
            }
        }
    }
}
