use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{read_checkpoint, write_checkpoint, Gradients, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// Named tensors of a model: trainable parameters (with
/// `requires_grad`) and non-trainable buffers such as running statistics.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    fn add(&mut self, name: String, tensor: Tensor<T>) -> ParamId {
        assert!(!self.by_name.contains_key(&name), "duplicate parameter {name}");
        let id = ParamId(self.tensors.len());
        self.by_name.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor);
        id
    }

    pub fn add_trainable(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> ParamId {
        self.add(name.into(), tensor.with_grad())
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, mut tensor: Tensor<T>) -> ParamId {
        tensor.requires_grad = false;
        self.add(name.into(), tensor)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.ids().filter(|&id| self.get(id).requires_grad)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Number of trainable scalars.
    pub fn parameter_count(&self) -> usize {
        self.tensors
            .iter()
            .filter(|t| t.requires_grad)
            .map(Tensor::numel)
            .sum()
    }

    pub fn accumulate(&mut self, grads: &Gradients<T>) -> Result<()> {
        for (id, g) in grads.params() {
            self.tensors[id.0].accumulate_grad(g)?;
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for t in &mut self.tensors {
            t.zero_grad();
        }
    }

    pub fn apply_updates(&mut self, updates: Vec<(ParamId, Vec<T>)>) {
        for (id, v) in updates {
            let t = &mut self.tensors[id.0];
            assert_eq!(t.numel(), v.len(), "buffer update for {}", self.names[id.0]);
            t.data_mut().copy_from_slice(&v);
        }
    }

    /// Same names and shapes, values converted to another precision.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            by_name: self.by_name.clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_checkpoint(path, self.iter())
    }

    /// Overwrites every entry from a checkpoint. The checkpoint must hold
    /// exactly this store's names with matching shapes.
    pub fn load(&mut self, path: &Path) -> Result<()> {
        let entries = read_checkpoint(path)?;
        let fail = |msg: String| Error::Checkpoint {
            path: path.to_path_buf(),
            msg,
        };
        if entries.len() != self.tensors.len() {
            return Err(fail(format!(
                "{} entries, model expects {}",
                entries.len(),
                self.tensors.len()
            )));
        }
        for (name, t) in entries {
            let id = self.id(&name).ok_or_else(|| fail(format!("unexpected entry {name}")))?;
            let dst = &mut self.tensors[id.0];
            if dst.shape() != t.shape() {
                return Err(fail(format!(
                    "{name}: shape {:?}, model expects {:?}",
                    t.shape(),
                    dst.shape()
                )));
            }
            for (d, &s) in dst.data_mut().iter_mut().zip(t.data()) {
                *d = T::of(s as f64);
            }
        }
        Ok(())
    }
}
