use std::collections::BTreeMap;

use crate::error::{dim_err, AutodiffError, Result};
use crate::tensor::Tensor;

/// Named, ordered collection of learnable tensors.
///
/// Identifiers are dotted paths such as `temporal.l0.fwd.w_ih`; iteration order
/// is lexicographic, which keeps checkpoints and optimizer updates deterministic.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(AutodiffError::Contract(format!(
                "duplicate parameter identifier `{name}`"
            )));
        }
        self.params.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| AutodiffError::Contract(format!("unknown parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Moves every parameter of `other` into `self` under `prefix.`.
    pub fn absorb(&mut self, prefix: &str, other: ParamStore) -> Result<()> {
        for (name, value) in other.params {
            self.insert(format!("{prefix}.{name}"), value)?;
        }
        Ok(())
    }
}

/// Gradients keyed by parameter identifier.
///
/// Parameters that were requested but never reached from the loss get a
/// zero gradient and are listed in [`GradientMap::unreached`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradientMap {
    grads: BTreeMap<String, Tensor>,
    unreached: Vec<String>,
}

impl GradientMap {
    pub(crate) fn from_parts(grads: BTreeMap<String, Tensor>, unreached: Vec<String>) -> Self {
        Self { grads, unreached }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.grads.get(name)
    }

    /// Sets the gradient of `name`, replacing any previous entry.
    pub fn insert(&mut self, name: impl Into<String>, grad: Tensor) {
        self.grads.insert(name.into(), grad);
    }

    pub fn unreached(&self) -> &[String] {
        &self.unreached
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.grads.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Elementwise sum of two maps over the same parameter set.
    pub fn accumulate(&mut self, other: &GradientMap) -> Result<()> {
        for (name, g) in &other.grads {
            match self.grads.get_mut(name) {
                Some(mine) => {
                    if mine.shape() != g.shape() {
                        return Err(dim_err("accumulate", mine.shape(), g.shape()));
                    }
                    for (a, b) in mine.data_mut().iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
                None => {
                    self.grads.insert(name.clone(), g.clone());
                }
            }
        }
        self.unreached.retain(|n| other.unreached.contains(n));
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.grads.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= factor);
        }
    }

    /// Euclidean norm over all gradient entries.
    pub fn global_norm(&self) -> f64 {
        self.grads
            .values()
            .flat_map(|g| g.data().iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.grads.values().all(Tensor::is_finite)
    }
}
