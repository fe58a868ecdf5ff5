//! Named trainable tensors.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{GmnError, Result};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Coarse grouping used for diagnostics (gradient-flow checks, norms).
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ParamGroup {
    Encoder,
    Decoder,
    Heads,
    Controllers,
    Pseudo,
    PriorHeads,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 6] = [
        ParamGroup::Encoder,
        ParamGroup::Decoder,
        ParamGroup::Heads,
        ParamGroup::Controllers,
        ParamGroup::Pseudo,
        ParamGroup::PriorHeads,
    ];
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry<F> {
    pub name: String,
    pub group: ParamGroup,
    pub tensor: Tensor<F>,
}

/// Every trainable weight of a model, addressed by [`ParamId`] or by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterStore<F> {
    entries: Vec<ParamEntry<F>>,
    index: BTreeMap<String, ParamId>,
}

/// How a freshly registered tensor is filled.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Constant(f64),
    Normal { std: f64 },
}

impl<F: Real> ParameterStore<F> {
    pub fn new() -> Self {
        ParameterStore { entries: Vec::new(), index: BTreeMap::new() }
    }

    pub fn register<R: Rng + ?Sized>(
        &mut self,
        name: &str,
        group: ParamGroup,
        shape: Vec<usize>,
        init: Init,
        rng: &mut R,
    ) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(GmnError::Contract(format!("parameter `{name}` registered twice")));
        }
        let numel: usize = shape.iter().product();
        let data: Vec<F> = match init {
            Init::Zeros => vec![F::zero(); numel],
            Init::Constant(c) => vec![F::from_f64(c); numel],
            Init::Normal { std } => (0..numel)
                .map(|_| {
                    let s: f64 = StandardNormal.sample(rng);
                    F::from_f64(s * std)
                })
                .collect(),
        };
        let id = ParamId(self.entries.len());
        self.entries.push(ParamEntry { name: name.to_string(), group, tensor: Tensor::new(shape, data)? });
        self.index.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<F> {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.entries[id.0].tensor
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<F> {
        &self.entries[id.0]
    }

    pub fn entries(&self) -> &[ParamEntry<F>] {
        &self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.numel()).sum()
    }

    /// Replace a tensor's contents, keeping its shape.
    pub fn set(&mut self, id: ParamId, data: &[F]) -> Result<()> {
        let entry = &mut self.entries[id.0];
        if entry.tensor.numel() != data.len() {
            return Err(GmnError::Shape(format!(
                "parameter `{}` has {} elements, got {}",
                entry.name,
                entry.tensor.numel(),
                data.len()
            )));
        }
        entry.tensor.data_mut().copy_from_slice(data);
        Ok(())
    }

    pub fn cast<G: Real>(&self) -> ParameterStore<G> {
        ParameterStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry { name: e.name.clone(), group: e.group, tensor: e.tensor.cast() })
                .collect(),
            index: self.index.clone(),
        }
    }

    /// True when both stores have the same names, groups and shapes in the same order.
    pub fn same_layout<G: Real>(&self, other: &ParameterStore<G>) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|(a, b)| {
                a.name == b.name && a.group == b.group && a.tensor.shape() == b.tensor.shape()
            })
    }
}

/// Parameter gradients aligned with a [`ParameterStore`]; `None` means untouched.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrads<F> {
    grads: Vec<Option<Vec<F>>>,
}

impl<F: Real> ParamGrads<F> {
    pub fn empty(len: usize) -> Self {
        ParamGrads { grads: vec![None; len] }
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn get(&self, id: ParamId) -> Option<&[F]> {
        self.grads[id.0].as_deref()
    }

    pub fn accumulate(&mut self, id: ParamId, grad: &[F]) {
        match &mut self.grads[id.0] {
            Some(acc) => {
                for (a, g) in acc.iter_mut().zip(grad) {
                    *a += *g;
                }
            }
            slot @ None => *slot = Some(grad.to_vec()),
        }
    }

    /// Add another gradient set (in place).
    pub fn add(&mut self, other: &ParamGrads<F>) {
        for (i, g) in other.grads.iter().enumerate() {
            if let Some(g) = g {
                self.accumulate(ParamId(i), g);
            }
        }
    }

    pub fn scale(&mut self, factor: F) {
        for g in self.grads.iter_mut().flatten() {
            for v in g.iter_mut() {
                *v *= factor;
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .flat_map(|g| g.iter())
            .map(|v| v.as_f64() * v.as_f64())
            .sum::<f64>()
            .sqrt()
    }

    /// Euclidean gradient norm per parameter group.
    pub fn group_norms(&self, store: &ParameterStore<F>) -> BTreeMap<ParamGroup, f64> {
        let mut out: BTreeMap<ParamGroup, f64> = BTreeMap::new();
        for (i, g) in self.grads.iter().enumerate() {
            let sq: f64 = g.iter().flat_map(|g| g.iter()).map(|v| v.as_f64() * v.as_f64()).sum();
            *out.entry(store.entry(ParamId(i)).group).or_default() += sq;
        }
        for v in out.values_mut() {
            *v = v.sqrt();
        }
        out
    }
}
