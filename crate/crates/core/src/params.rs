//! Named parameter storage and its binding onto a tape.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::tape::{BnState, Tape, Var};
use crate::tensor::{invalid, Result, Tensor};

/// Learnable tensors keyed by dotted names (`backbone.s1.w`, ...).
#[derive(Debug, Clone, Default, PartialEq)]
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

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Registers every parameter as a gradient-carrying leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|(k, v)| (k.clone(), tape.param(v.clone())))
            .collect();
        Bound { vars }
    }

    /// He-uniform initialization: `U(−√(6/fan_in), √(6/fan_in))`.
    pub fn init_he<R: Rng>(&mut self, name: &str, shape: &[usize], fan_in: usize, rng: &mut R) {
        let bound = (6.0 / fan_in as f64).sqrt();
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
        self.insert(name, Tensor::from_parts(shape.to_vec(), data));
    }

    /// `U(−bound, bound)`.
    pub fn init_uniform<R: Rng>(&mut self, name: &str, shape: &[usize], bound: f64, rng: &mut R) {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
        self.insert(name, Tensor::from_parts(shape.to_vec(), data));
    }

    pub fn init_const(&mut self, name: &str, shape: &[usize], value: f64) {
        self.insert(name, Tensor::full(shape, value));
    }
}

/// Tape handles of a bound [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl FromIterator<(String, Var)> for Bound {
    fn from_iter<I: IntoIterator<Item = (String, Var)>>(iter: I) -> Self {
        Self {
            vars: iter.into_iter().collect(),
        }
    }
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| invalid("bind", format!("missing parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    /// Gradients of every bound parameter after a backward sweep.
    pub fn grads(&self, tape: &Tape) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .map(|(k, &v)| {
                let g = tape
                    .grad(v)
                    .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape()));
                (k.clone(), g)
            })
            .collect()
    }
}

/// Running statistics of every batch-norm layer, keyed like parameters.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BnStates {
    states: BTreeMap<String, BnState>,
}

impl BnStates {
    pub fn insert(&mut self, name: impl Into<String>, state: BnState) {
        self.states.insert(name.into(), state);
    }

    pub fn get(&self, name: &str) -> Result<&BnState> {
        self.states
            .get(name)
            .ok_or_else(|| invalid("batch_norm", format!("missing state {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut BnState> {
        self.states
            .get_mut(name)
            .ok_or_else(|| invalid("batch_norm", format!("missing state {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &BnState)> {
        self.states.iter()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn he_init_is_seeded_and_bounded() {
        let mut a = ParamStore::new();
        let mut b = ParamStore::new();
        a.init_he("w", &[4, 3, 3, 3], 27, &mut ChaCha8Rng::seed_from_u64(5));
        b.init_he("w", &[4, 3, 3, 3], 27, &mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(a, b);
        let bound = (6.0f64 / 27.0).sqrt();
        assert!(a.get("w").unwrap().data().iter().all(|v| v.abs() < bound));
    }

    #[test]
    fn bind_and_collect_grads() {
        let mut store = ParamStore::new();
        store.init_const("a", &[2], 3.0);
        store.init_const("b", &[1], 1.0);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let a = bound.get("a").unwrap();
        let loss = tape.sum(a).unwrap();
        tape.backward(loss).unwrap();
        let grads = bound.grads(&tape);
        assert_eq!(grads["a"].data(), &[1.0, 1.0]);
        assert_eq!(grads["b"].data(), &[0.0]);
        assert!(bound.get("c").is_err());
    }
}
