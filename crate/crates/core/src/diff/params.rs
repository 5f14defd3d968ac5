use std::collections::HashMap;

use rand::Rng;

use crate::error::{MinoError, Result};
use crate::scalar::Scalar;

/// Handle to a registered parameter slice.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSlot {
    pub name: String,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl ParamSlot {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform in `[-bound, bound]`.
    Uniform(f64),
}

/// Flat parameter vector with a matching gradient buffer and named slices.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    values: Vec<T>,
    grads: Vec<T>,
    slots: Vec<ParamSlot>,
    by_name: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            values: Vec::new(),
            grads: Vec::new(),
            slots: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn register<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        init: Init,
        rng: &mut R,
    ) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "parameter {name} registered twice");
        let offset = self.values.len();
        for _ in 0..rows * cols {
            let v = match init {
                Init::Zeros => T::zero(),
                Init::Ones => T::one(),
                Init::Uniform(bound) => T::from_f64_lossy(rng.random_range(-bound..=bound)),
            };
            self.values.push(v);
        }
        self.grads.resize(self.values.len(), T::zero());
        let id = self.slots.len();
        self.by_name.insert(name.clone(), id);
        self.slots.push(ParamSlot {
            name,
            offset,
            rows,
            cols,
        });
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn slots(&self) -> &[ParamSlot] {
        &self.slots
    }

    pub fn slot(&self, id: ParamId) -> &ParamSlot {
        &self.slots[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn grads(&self) -> &[T] {
        &self.grads
    }

    pub fn grads_mut(&mut self) -> &mut [T] {
        &mut self.grads
    }

    pub fn value(&self, id: ParamId) -> &[T] {
        &self.values[self.slots[id.0].range()]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut [T] {
        let r = self.slots[id.0].range();
        &mut self.values[r]
    }

    pub fn grad(&self, id: ParamId) -> &[T] {
        &self.grads[self.slots[id.0].range()]
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, g: &[T]) {
        let r = self.slots[id.0].range();
        for (acc, &x) in self.grads[r].iter_mut().zip(g) {
            *acc += x;
        }
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = T::zero());
    }

    /// Replace all values, keeping the layout.
    pub fn load_values(&mut self, values: &[T]) -> Result<()> {
        if values.len() != self.values.len() {
            return Err(MinoError::shape("ParamStore::load_values", self.values.len(), values.len()));
        }
        self.values.copy_from_slice(values);
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn grad_norm(&self) -> T {
        self.grads.iter().map(|&g| g * g).sum::<T>().sqrt()
    }
}
