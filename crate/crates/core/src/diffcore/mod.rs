//! Minimal reverse-mode differentiation over dense `f64` tensors.
//!
//! A [`Graph`] records each primitive as it is evaluated; [`Graph::backward`]
//! walks the record once in reverse. The primitive set is exactly what the
//! model needs: matmul, elementwise add/mul, GELU, ReLU, exp, softmax, layer
//! normalization, embedding lookup, concatenation, reductions, cross-entropy,
//! the KL divergence to a standard normal, and the reparameterized sample.
//!
//! ```
//! use servib::diffcore::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let p = g.leaf(Tensor::vector(vec![3.0, 4.0]));
//! let sq = g.mul(p, p).unwrap();
//! let s = g.sum(sq).unwrap();
//! let loss = g.scale(s, 0.5).unwrap();
//! let grads = g.backward(loss).unwrap();
//! assert_eq!(grads.wrt(p).unwrap(), &[3.0, 4.0]);
//! ```

mod graph;
pub mod gradcheck;
mod tensor;

use std::collections::BTreeMap;

pub use graph::{Gradients, Graph, Trainable, Var};
pub use tensor::Tensor;

pub(crate) use graph::{gelu, softmax_in_place};
#[cfg(test)]
pub(crate) use graph::log_sum_exp;
pub(crate) use tensor::matmul_acc;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DiffError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("non-finite value produced by `{op}`")]
    NonFinite { op: &'static str },
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("target {target} out of range for {classes} classes")]
    TargetOutOfRange { target: usize, classes: usize },
    #[error("sigma must be strictly positive, found {0}")]
    NonPositiveSigma(f64),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
}

/// Gradients keyed by parameter name.
pub type Grads = BTreeMap<String, Tensor>;

/// Named model parameters, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.params.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar values across all parameters.
    pub fn numel(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Copies every parameter whose name starts with `prefix`.
    pub fn subset(&self, prefix: &str) -> ParamStore {
        ParamStore {
            params: self
                .params
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }
}

/// Builds the computation with `build`, then differentiates the resulting
/// scalar. Only parameters selected by `trainable` appear in the gradients.
pub fn forward_backward<F>(store: &ParamStore, trainable: Trainable<'_>, build: F) -> Result<(f64, Grads), DiffError>
where
    F: FnOnce(&mut Graph<'_>) -> Result<Var, DiffError>,
{
    let mut g = Graph::with_params(store, trainable);
    let loss = build(&mut g)?;
    let value = g.value(loss);
    if !value.is_scalar() {
        return Err(DiffError::NonScalarLoss(value.shape().to_vec()));
    }
    let value = value.item();
    let grads = g.backward(loss)?;
    Ok((value, grads.into_params()))
}
