//! Named, grouped parameter storage shared by the models and optimizers.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One learnable tensor with a stable name and a freeze group.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    /// Freeze-group label, e.g. `"visual"` or `"language"`. Freezing and
    /// optimizer-state bookkeeping operate on whole groups.
    pub group: String,
    pub tensor: Tensor,
    /// Frozen parameters receive no optimizer state and no updates.
    pub frozen: bool,
}

/// Ordered collection of [`Param`]s with name lookup.
///
/// Insertion order is the canonical parameter order: optimizers index their
/// state by it and checkpoints serialize in it.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    params: Vec<Param>,
    by_name: BTreeMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a parameter; returns its slot index. Names must be unique.
    pub fn insert(&mut self, name: &str, group: &str, tensor: Tensor) -> Result<usize> {
        if self.by_name.contains_key(name) {
            return Err(Error::InvalidArgument(format!(
                "duplicate parameter name: {name}"
            )));
        }
        let index = self.params.len();
        self.params.push(Param {
            name: name.to_string(),
            group: group.to_string(),
            tensor,
            frozen: false,
        });
        self.by_name.insert(name.to_string(), index);
        Ok(index)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, index: usize) -> &Param {
        &self.params[index]
    }

    pub fn get_mut(&mut self, index: usize) -> &mut Param {
        &mut self.params[index]
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.by_name.get(name).copied().ok_or_else(|| {
            Error::InvalidArgument(format!("no parameter named {name}"))
        })
    }

    pub fn by_name(&self, name: &str) -> Result<&Param> {
        Ok(&self.params[self.index_of(name)?])
    }

    pub fn by_name_mut(&mut self, name: &str) -> Result<&mut Param> {
        let idx = self.index_of(name)?;
        Ok(&mut self.params[idx])
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    /// All distinct group labels, in first-appearance order.
    pub fn groups(&self) -> Vec<String> {
        let mut seen = Vec::new();
        for p in &self.params {
            if !seen.contains(&p.group) {
                seen.push(p.group.clone());
            }
        }
        seen
    }

    /// Freeze or unfreeze every parameter in `group`.
    ///
    /// Errors if the group does not exist, which catches typos at call
    /// sites that would otherwise silently train everything.
    pub fn set_group_frozen(&mut self, group: &str, frozen: bool) -> Result<()> {
        let mut found = false;
        for p in &mut self.params {
            if p.group == group {
                p.frozen = frozen;
                found = true;
            }
        }
        if found {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "no parameter group named {group}"
            )))
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.tensor.zero_grad();
        }
    }

    /// Drop gradients on frozen parameters so no stale values linger.
    pub fn zero_frozen_grads(&mut self) {
        for p in &mut self.params {
            if p.frozen {
                p.tensor.zero_grad();
            }
        }
    }

    /// Total number of scalar elements across all parameters.
    pub fn num_elements(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    /// Exact bit patterns of every parameter in `group`, keyed by name.
    /// Lets tests assert that frozen weights are bitwise untouched.
    pub fn group_bits(&self, group: &str) -> BTreeMap<String, Vec<u64>> {
        self.params
            .iter()
            .filter(|p| p.group == group)
            .map(|p| {
                (
                    p.name.clone(),
                    p.tensor.data.iter().map(|v| v.to_bits()).collect(),
                )
            })
            .collect()
    }
}
