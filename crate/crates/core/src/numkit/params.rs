use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use super::{Gradients, Tensor};
use crate::{Error, Result};

/// Index of a tensor inside a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameters with gradient accumulators and adaptive-moment state.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    lookup: BTreeMap<String, usize>,
    values: Vec<Tensor>,
    grads: Vec<Tensor>,
    pub(super) first_moment: Vec<Vec<f64>>,
    pub(super) second_moment: Vec<Vec<f64>>,
    pub(super) step: u64,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> Result<ParamId> {
        if self.lookup.contains_key(name) {
            return Err(Error::DuplicateParam(name.to_string()));
        }
        let id = self.values.len();
        self.lookup.insert(name.to_string(), id);
        self.names.push(name.to_string());
        self.grads.push(Tensor::zeros(value.shape()));
        self.first_moment.push(vec![0.0; value.len()]);
        self.second_moment.push(vec![0.0; value.len()]);
        self.values.push(value);
        Ok(ParamId(id))
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.lookup
            .get(name)
            .map(|&i| ParamId(i))
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Replaces a value with a tensor of identical shape.
    pub fn set_value(&mut self, name: &str, value: Tensor) -> Result<()> {
        let id = self.id(name)?;
        let current = &self.values[id.0];
        if current.shape() != value.shape() {
            return Err(Error::ShapeMismatch {
                op: "set_value",
                lhs: current.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        self.values[id.0] = value;
        Ok(())
    }

    pub fn accumulate(&mut self, grads: &Gradients) {
        for (id, g) in grads.iter() {
            for (acc, x) in self.grads[id.0].data_mut().iter_mut().zip(g) {
                *acc += x;
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            g.data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
    }

    /// Clears moment estimates and the step counter.
    pub fn reset_optimizer(&mut self) {
        for m in self.first_moment.iter_mut().chain(self.second_moment.iter_mut()) {
            m.iter_mut().for_each(|x| *x = 0.0);
        }
        self.step = 0;
    }

    pub fn optimizer_steps(&self) -> u64 {
        self.step
    }

    pub(super) fn grads_mut(&mut self) -> &mut [Tensor] {
        &mut self.grads
    }

    pub(super) fn split_for_update(&mut self) -> (&mut [Tensor], &[Tensor], &mut [Vec<f64>], &mut [Vec<f64>]) {
        (
            &mut self.values,
            &self.grads,
            &mut self.first_moment,
            &mut self.second_moment,
        )
    }

    /// Named entries in insertion order.
    pub fn entries(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(self.values.iter())
    }

    /// Copies every parameter whose name starts with `prefix` into a new set.
    pub fn subset(&self, prefix: &str) -> ParamSet {
        let mut out = ParamSet::new();
        for (name, value) in self.entries() {
            if name.starts_with(prefix) {
                out.add(name, value.clone()).expect("names are unique");
            }
        }
        out
    }

    /// Overwrites values from `other` for every name present in both sets.
    /// Shapes must agree; names missing from `self` are an error.
    pub fn load_from(&mut self, other: &ParamSet) -> Result<()> {
        for (name, value) in other.entries() {
            self.set_value(name, value.clone())?;
        }
        Ok(())
    }
}
