//! Named trainable parameters, shared between the model, the optimizer, and
//! the checkpoint format.
//!
//! A [`ParamStore`] owns the long-lived weight values. Each training step
//! leases every parameter onto a fresh tape as a differentiable leaf (see
//! [`TapeParams`]), runs forward/backward, and copies the accumulated
//! gradients back out for the optimizer.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor};

/// Stable handle into a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// One named weight tensor.
#[derive(Debug, Clone)]
pub struct Param<S> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<S>,
}

impl<S> Param<S> {
    /// True for vectors (biases, norm gains); weight decay skips these.
    pub fn is_one_dimensional(&self) -> bool {
        self.shape.len() == 1
    }
}

/// Ordered collection of named parameters. Registration order is the
/// canonical order used by the optimizer, gradient clipping, and the
/// checkpoint blob, so it must be deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<S> {
    entries: Vec<Param<S>>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
        }
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        data: Vec<S>,
    ) -> Result<ParamId> {
        let name = name.into();
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "param_store.add",
                format!(
                    "parameter '{name}' shape {shape:?} implies {numel} values, got {}",
                    data.len()
                ),
            ));
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::shape(
                "param_store.add",
                format!("parameter '{name}' has a zero extent in shape {shape:?}"),
            ));
        }
        if self.entries.iter().any(|p| p.name == name) {
            return Err(Error::InvalidArgument(format!(
                "duplicate parameter name '{name}'"
            )));
        }
        let id = ParamId(self.entries.len());
        self.entries.push(Param { name, shape, data });
        Ok(id)
    }

    pub fn get(&self, id: ParamId) -> &Param<S> {
        &self.entries[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<S> {
        &mut self.entries[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<S>)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, p)| (ParamId(i), p))
    }

    pub fn total_elements(&self) -> usize {
        self.entries.iter().map(|p| p.data.len()).sum()
    }

    /// Convert every value, e.g. f32 checkpoints to an f64 store for
    /// gradient checks.
    pub fn map_scalar<T: Scalar>(&self) -> ParamStore<T> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    data: p.data.iter().map(|&v| T::from_f64(v.to_f64())).collect(),
                })
                .collect(),
        }
    }
}

/// Parameters leased onto one tape, indexed by [`ParamId`].
pub struct TapeParams {
    tensors: Vec<Tensor>,
}

impl TapeParams {
    /// Lease every parameter as a differentiable leaf (training).
    pub fn lease<S: Scalar>(tape: &mut Tape<S>, store: &ParamStore<S>) -> Result<Self> {
        Self::lease_inner(tape, store, true)
    }

    /// Lease every parameter as a constant leaf (inference); backward is
    /// never called and the tape skips gradient bookkeeping.
    pub fn lease_frozen<S: Scalar>(tape: &mut Tape<S>, store: &ParamStore<S>) -> Result<Self> {
        Self::lease_inner(tape, store, false)
    }

    fn lease_inner<S: Scalar>(
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        trainable: bool,
    ) -> Result<Self> {
        let mut tensors = Vec::with_capacity(store.len());
        for (_, p) in store.iter() {
            let t = if trainable {
                tape.var(&p.shape, p.data.clone())?
            } else {
                tape.constant(&p.shape, p.data.clone())?
            };
            tensors.push(t);
        }
        Ok(Self { tensors })
    }

    /// Wrap tensors already on a tape, in store order. Used by gradient
    /// checks that own leaf creation.
    pub fn from_tensors(tensors: Vec<Tensor>) -> Self {
        Self { tensors }
    }

    pub fn get(&self, id: ParamId) -> Tensor {
        self.tensors[id.0]
    }

    /// Copy accumulated gradients back out in store order. Parameters the
    /// loss never touched get zero gradients.
    pub fn collect_grads<S: Scalar>(
        &self,
        tape: &Tape<S>,
        store: &ParamStore<S>,
    ) -> Vec<Vec<S>> {
        self.tensors
            .iter()
            .enumerate()
            .map(|(i, &t)| match tape.grad(t) {
                Some(g) => g.to_vec(),
                None => vec![S::zero(); store.get(ParamId(i)).data.len()],
            })
            .collect()
    }
}
