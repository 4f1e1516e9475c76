//! Reverse-mode differentiation over the small operation set the model
//! needs. A `Graph` records one forward pass; `backward` walks the tape in
//! reverse and accumulates gradients into trainable parameters. 64-bit mode
//! is used for verification, 32-bit for training.

mod check;
mod graph;

pub use check::{
    finite_diff_param, gradcheck_params, gradcheck_subset, max_rel_error, GradCheckReport,
};
pub use graph::{Gradients, Graph, Var};

use ndarray::{Array2, ScalarOperand};
use num_traits::Float;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DiffError {
    #[error("backward requires a scalar loss, got shape {0}x{1}")]
    NonScalarLoss(usize, usize),
    #[error("backward already ran on this tape")]
    TapeConsumed,
}

/// Element type of the engine: `f64` for verification, `f32` for training.
pub trait Scalar:
    Float
    + ndarray::LinalgScalar
    + ScalarOperand
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// Learning-rate group of a parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamGroup {
    /// Transformer-side trainables: LoRA factors, projectors, head.
    Backbone,
    /// Graph-side trainables: GNN weights and the edge scorer.
    Graph,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
pub struct ParamEntry<T: Scalar> {
    pub name: String,
    pub value: Array2<T>,
    pub grad: Array2<T>,
    pub trainable: bool,
    pub group: ParamGroup,
}

/// Flat registry of model tensors. Frozen tensors live here too so the
/// checkpoint and the frozen-base contract can address them by name.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T: Scalar> {
    entries: Vec<ParamEntry<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new() }
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        value: Array2<T>,
        trainable: bool,
        group: ParamGroup,
    ) -> ParamId {
        let grad = Array2::zeros(value.raw_dim());
        self.entries.push(ParamEntry {
            name: name.into(),
            value,
            grad,
            trainable,
            group,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Array2<T> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Array2<T> {
        &mut self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Array2<T> {
        &self.entries[id.0].grad
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.ids().filter(|&id| self.entries[id.0].trainable).collect()
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry<T>] {
        &mut self.entries
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.fill(T::zero());
        }
    }

    pub fn accumulate_grad(&mut self, id: ParamId, delta: &Array2<T>) {
        let e = &mut self.entries[id.0];
        if e.trainable {
            e.grad += delta;
        }
    }

    /// Global L2 norm over all trainable gradients.
    pub fn grad_norm(&self) -> f64 {
        let mut sq = 0.0;
        for e in &self.entries {
            if e.trainable {
                for &v in e.grad.iter() {
                    let v = v.to_f64();
                    sq += v * v;
                }
            }
        }
        sq.sqrt()
    }

    pub fn scale_grads(&mut self, factor: T) {
        for e in &mut self.entries {
            if e.trainable {
                e.grad.mapv_inplace(|g| g * factor);
            }
        }
    }
}
