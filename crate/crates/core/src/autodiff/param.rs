use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

static NEXT_STORE_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// A named tensor owned by a [`ParamStore`].
///
/// Non-trainable parameters double as buffers (running statistics); they are
/// checkpointed but never receive gradient.
#[derive(Debug, Clone)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub trainable: bool,
    version: u64,
}

impl<T: Scalar> Parameter<T> {
    pub fn version(&self) -> u64 {
        self.version
    }
}

#[derive(Debug)]
pub struct ParamStore<T> {
    id: u64,
    params: Vec<Parameter<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Clone for ParamStore<T> {
    /// Clones receive a fresh identity, so tapes recorded against the original
    /// cannot be applied to the copy.
    fn clone(&self) -> Self {
        Self {
            id: NEXT_STORE_ID.fetch_add(1, Ordering::Relaxed),
            params: self.params.clone(),
            by_name: self.by_name.clone(),
        }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_STORE_ID.fetch_add(1, Ordering::Relaxed),
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub(crate) fn store_id(&self) -> u64 {
        self.id
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, trainable: bool) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter name `{name}`")));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        let grad = Tensor::zeros(value.shape());
        self.params.push(Parameter {
            name,
            value,
            grad,
            trainable,
            version: 0,
        });
        Ok(id)
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    /// Mutable access to a value; bumps its version so older tapes go stale.
    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        let p = &mut self.params[id.0];
        p.version += 1;
        &mut p.value
    }

    /// Simultaneous access to a value (version bumped) and its gradient.
    pub fn value_and_grad_mut(&mut self, id: ParamId) -> (&mut Tensor<T>, &Tensor<T>) {
        let p = &mut self.params[id.0];
        p.version += 1;
        (&mut p.value, &p.grad)
    }

    pub(crate) fn grad_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].grad
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = T::zero());
        }
    }

    /// Total number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.len()).sum()
    }

    /// Copy with every tensor converted to another scalar type; versions and
    /// gradients start fresh.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for p in &self.params {
            out.add(p.name.clone(), p.value.cast(), p.trainable).expect("names are unique");
        }
        out
    }

    /// Order-sensitive hash of every value, used to detect unintended updates.
    pub fn checksum(&self) -> u64 {
        let mut h = crc32fast::Hasher::new();
        for p in &self.params {
            h.update(p.name.as_bytes());
            let mut bytes = Vec::with_capacity(p.value.len() * 8);
            for &v in p.value.data() {
                v.write_le(&mut bytes);
            }
            h.update(&bytes);
        }
        u64::from(h.finalize())
    }
}
