use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub type ParamId = usize;

/// Named parameter tensors plus their accumulated gradients.
///
/// A parameter can be partially trainable: `row_mask` lists which rows the
/// optimizer may touch (used to freeze word rows of the embedding table).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    row_masks: Vec<Option<Vec<bool>>>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Invalid(format!("parameter {name} registered twice")));
        }
        let id = self.tensors.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor);
        self.row_masks.push(None);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| &self.tensors[id])
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        0..self.tensors.len()
    }

    pub fn total_elements(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Whether the optimizer may change element `flat` of parameter `id`.
    pub fn is_trainable(&self, id: ParamId, flat: usize) -> bool {
        let t = &self.tensors[id];
        if !t.requires_grad {
            return false;
        }
        match &self.row_masks[id] {
            None => true,
            Some(rows) => rows[flat / t.dims2().1],
        }
    }

    pub fn row_mask(&self, id: ParamId) -> Option<&[bool]> {
        self.row_masks[id].as_deref()
    }

    pub(crate) fn set_trainable(&mut self, id: ParamId, trainable: bool, row_mask: Option<Vec<bool>>) {
        self.tensors[id].requires_grad = trainable;
        self.row_masks[id] = row_mask;
    }

    pub(crate) fn add_grad(&mut self, id: ParamId, g: &[f32]) {
        let t = &mut self.tensors[id];
        match &mut t.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(g.to_vec()),
        }
    }

    pub fn zero_grads(&mut self) {
        for t in &mut self.tensors {
            t.grad = None;
        }
    }

    /// Copies values (not gradients or trainability) from `other`.
    pub fn load_values(&mut self, other: &ParamStore) -> Result<()> {
        for (id, name) in self.names.iter().enumerate() {
            let src = other
                .by_name(name)
                .ok_or_else(|| Error::Invalid(format!("parameter {name} missing from source")))?;
            if src.shape() != self.tensors[id].shape() {
                return Err(Error::dim("load_values", format!("{name}: {:?} vs {:?}", src.shape(), self.tensors[id].shape())));
            }
            self.tensors[id].data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }
}
