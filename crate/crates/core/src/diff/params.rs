use std::collections::HashMap;

use super::tape::{Grads, Tape, Var};
use super::tensor::{Mat, Scalar};
use crate::error::{Error, Result};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct ParamId(pub usize);

/// Named parameter arrays with one gradient slot each.
#[derive(Debug, Clone)]
pub struct ParamStore<T: Scalar> {
    names: Vec<String>,
    values: Vec<Mat<T>>,
    grads: Vec<Option<Mat<T>>>,
    index: HashMap<String, usize>,
    step: u64,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        ParamStore { names: Vec::new(), values: Vec::new(), grads: Vec::new(), index: HashMap::new(), step: 0 }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a new parameter. Panics on a duplicate name: parameter
    /// layouts are fixed by model construction code, so a clash is a bug.
    pub fn register(&mut self, name: impl Into<String>, value: Mat<T>) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter `{name}`");
        let id = self.values.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        self.grads.push(None);
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Mat<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat<T> {
        &mut self.values[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Mat<T>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn grad(&self, id: ParamId) -> Option<&Mat<T>> {
        self.grads[id.0].as_ref()
    }

    pub fn set_grad(&mut self, id: ParamId, g: Mat<T>) {
        assert_eq!(g.shape(), self.values[id.0].shape(), "gradient shape for `{}`", self.names[id.0]);
        self.grads[id.0] = Some(g);
    }

    pub fn clear_grads(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Mat::len).sum()
    }

    /// Puts every parameter on `tape` as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape<T>) -> Bound {
        Bound { vars: self.values.iter().map(|v| tape.param(v.clone())).collect() }
    }

    /// Puts every parameter on `tape` as a constant (frozen forward pass).
    pub fn bind_frozen(&self, tape: &mut Tape<T>) -> Bound {
        Bound { vars: self.values.iter().map(|v| tape.constant(v.clone())).collect() }
    }

    /// Binds parameters whose name passes `trainable` as leaves and the rest
    /// as constants.
    pub fn bind_where(&self, tape: &mut Tape<T>, trainable: impl Fn(&str) -> bool) -> Bound {
        Bound {
            vars: self
                .values
                .iter()
                .zip(&self.names)
                .map(|(v, n)| if trainable(n) { tape.param(v.clone()) } else { tape.constant(v.clone()) })
                .collect(),
        }
    }

    /// Adds the gradients of the bound leaves into the store's slots.
    /// Parameters that did not influence the loss get an explicit zero.
    pub fn accumulate(&mut self, bound: &Bound, grads: &mut Grads<T>) {
        for (i, &v) in bound.vars.iter().enumerate() {
            let g = grads.take(v).unwrap_or_else(|| {
                let (r, c) = self.values[i].shape();
                Mat::zeros(r, c)
            });
            match &mut self.grads[i] {
                Some(slot) => slot.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }
    }

    /// Global L2 norm of the current gradients.
    pub fn grad_norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .flat_map(|g| g.data().iter())
            .map(|&x| x.as_f64() * x.as_f64())
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales gradients so their global norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if norm > max_norm && norm.is_finite() {
            let s = T::of(max_norm / norm);
            for g in self.grads.iter_mut().flatten() {
                g.scale_assign(s);
            }
        }
        norm
    }

    /// Same names and shapes, values converted to another precision.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(Mat::cast).collect(),
            grads: self.grads.iter().map(|_| None).collect(),
            index: self.index.clone(),
            step: self.step,
        }
    }

    /// Copies values for every name present in both stores, checking shapes.
    pub fn load_from<U: Scalar>(&mut self, other: &ParamStore<U>) -> Result<usize> {
        let mut copied = 0;
        for (i, name) in self.names.iter().enumerate() {
            if let Some(src) = other.by_name(name) {
                if src.shape() != self.values[i].shape() {
                    return Err(Error::CheckpointMismatch(format!(
                        "`{name}` has shape {:?}, expected {:?}",
                        src.shape(),
                        self.values[i].shape()
                    )));
                }
                self.values[i] = src.cast();
                copied += 1;
            }
        }
        Ok(copied)
    }
}

/// Tape handles for the parameters of a store, valid for one tape.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    #[inline]
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}
