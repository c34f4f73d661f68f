//! Named parameter storage with gradient accumulators.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{NumericsError, Tensor};

/// Handle to a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How a freshly registered parameter is filled.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Uniform(f64),
    /// Normal with standard deviation `1/sqrt(fan_in)`, `fan_in` = rows.
    ScaledNormal,
}

#[derive(Debug, Clone, PartialEq)]
struct Param {
    name: String,
    value: Tensor,
    grad: Tensor,
}

/// Owns every learnable tensor of one model.
///
/// Parameters are registered once, in a fixed order; the registration order
/// is the iteration order of the optimizer and of checkpoints.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, rows: usize, cols: usize, init: Init, rng: &mut ChaCha8Rng) -> ParamId {
        let mut value = Tensor::zeros(rows, cols);
        match init {
            Init::Zeros => {}
            Init::Ones => value.data_mut().iter_mut().for_each(|v| *v = 1.0),
            Init::Uniform(a) => value.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-a..a)),
            Init::ScaledNormal => {
                let std = 1.0 / (rows.max(1) as f64).sqrt();
                value.data_mut().iter_mut().for_each(|v| *v = std * standard_normal(rng));
            }
        }
        self.insert(name.into(), value)
    }

    pub fn insert(&mut self, name: String, value: Tensor) -> ParamId {
        assert!(!self.by_name.contains_key(&name), "parameter `{name}` registered twice");
        let id = ParamId(self.params.len());
        let [r, c] = value.shape();
        self.params.push(Param {
            name: name.clone(),
            value,
            grad: Tensor::zeros(r, c),
        });
        self.by_name.insert(name, id);
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].grad
    }

    pub fn value_and_grad_mut(&mut self, id: ParamId) -> (&mut Tensor, &Tensor) {
        let p = &mut self.params[id.0];
        (&mut p.value, &p.grad)
    }

    pub fn accumulate(&mut self, grads: &Gradients) {
        for (idx, g) in grads.slots.iter().enumerate() {
            if let Some(g) = g {
                self.params[idx].grad.add_assign(g);
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn scale_grads(&mut self, s: f64) {
        for p in &mut self.params {
            p.grad.scale_in_place(s);
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.params.iter().map(|p| p.grad.squared_norm()).sum::<f64>().sqrt()
    }

    /// Rescales gradients so their global L2 norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if norm > max_norm && norm > 0.0 {
            self.scale_grads(max_norm / norm);
        }
        norm
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Snapshot of all values keyed by name.
    pub fn named_values(&self) -> BTreeMap<String, Tensor> {
        self.params.iter().map(|p| (p.name.clone(), p.value.clone())).collect()
    }

    /// Overwrites values from a name-keyed map. Every registered parameter
    /// must be present with a matching shape.
    pub fn load_values(&mut self, values: &BTreeMap<String, Tensor>) -> Result<(), NumericsError> {
        if values.len() != self.params.len() {
            return Err(NumericsError::Checkpoint(format!(
                "expected {} parameters, found {}",
                self.params.len(),
                values.len()
            )));
        }
        for p in &mut self.params {
            let v = values
                .get(&p.name)
                .ok_or_else(|| NumericsError::Checkpoint(format!("missing parameter `{}`", p.name)))?;
            if v.shape() != p.value.shape() {
                return Err(NumericsError::Checkpoint(format!(
                    "parameter `{}` has shape {:?}, expected {:?}",
                    p.name,
                    v.shape(),
                    p.value.shape()
                )));
            }
            p.value = v.clone();
        }
        Ok(())
    }
}

/// Per-parameter gradients produced by one backward pass.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    slots: Vec<Option<Tensor>>,
}

impl Gradients {
    pub(crate) fn with_capacity(n: usize) -> Self {
        Self { slots: vec![None; n] }
    }

    pub(crate) fn add(&mut self, id: ParamId, g: &Tensor) {
        match &mut self.slots[id.0] {
            Some(acc) => acc.add_assign(g),
            slot @ None => *slot = Some(g.clone()),
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.slots.get(id.0).and_then(Option::as_ref)
    }
}

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn uniform_init_is_bounded_and_seeded() {
        let mut a = ParamStore::new();
        let mut b = ParamStore::new();
        let ia = a.register("w", 4, 5, Init::Uniform(0.08), &mut ChaCha8Rng::seed_from_u64(3));
        b.register("w", 4, 5, Init::Uniform(0.08), &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(a, b);
        assert!(a.value(ia).data().iter().all(|v| v.abs() < 0.08));
    }

    #[test]
    fn clipping_bounds_global_norm() {
        let mut s = ParamStore::new();
        let id = s.insert("w".into(), Tensor::zeros(1, 2));
        let mut g = Gradients::with_capacity(1);
        g.add(id, &Tensor::row(vec![3.0, 4.0]));
        s.accumulate(&g);
        assert_eq!(s.clip_grad_norm(1.0), 5.0);
        assert!((s.grad_norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    #[should_panic]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new();
        s.insert("w".into(), Tensor::zeros(1, 1));
        s.insert("w".into(), Tensor::zeros(1, 1));
    }
}
