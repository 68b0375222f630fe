use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{dim_err, Result, TensorError};
use crate::{Float, Tensor};

static NEXT_STORE: AtomicU64 = AtomicU64::new(1);

fn next_uid() -> u64 {
    NEXT_STORE.fetch_add(1, Ordering::Relaxed)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A named trainable tensor with its gradient accumulator.
#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

/// Ordered registry of the parameters of one network. Names are unique.
#[derive(Debug)]
pub struct ParamStore<T> {
    uid: u64,
    params: Vec<Parameter<T>>,
    index: HashMap<String, usize>,
}

impl<T: Float> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

// Clones get a fresh identity so that both copies can be bound on one tape.
impl<T: Float> Clone for ParamStore<T> {
    fn clone(&self) -> Self {
        Self {
            uid: next_uid(),
            params: self.params.clone(),
            index: self.index.clone(),
        }
    }
}

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            uid: next_uid(),
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn uid(&self) -> u64 {
        self.uid
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(TensorError::Contract(format!("duplicate parameter name {name}")));
        }
        let grad = Tensor::zeros(value.shape());
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Parameter { name, value, grad });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter<T>> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(T::zero());
        }
    }

    /// Replaces the value of `name`, keeping its shape.
    pub fn set_value(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let Some(&i) = self.index.get(name) else {
            return Err(TensorError::Contract(format!("unknown parameter {name}")));
        };
        if self.params[i].value.shape() != value.shape() {
            return dim_err(
                "set_value",
                format!(
                    "{name}: expected {:?}, got {:?}",
                    self.params[i].value.shape(),
                    value.shape()
                ),
            );
        }
        self.params[i].value = value;
        Ok(())
    }

    /// Order-sensitive FNV-1a digest of every name and value bit pattern.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        for p in &self.params {
            eat(p.name.as_bytes());
            for v in p.value.data() {
                eat(&v.as_f64().to_bits().to_le_bytes());
            }
        }
        h
    }
}

/// Parameter gradients extracted from one backward pass, keyed by store.
#[derive(Clone, Debug, Default)]
pub struct Gradients<T> {
    pub(crate) map: HashMap<(u64, usize), Tensor<T>>,
}

impl<T: Float> Gradients<T> {
    pub fn get(&self, store: &ParamStore<T>, id: ParamId) -> Option<&Tensor<T>> {
        self.map.get(&(store.uid, id.0))
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Adds every gradient belonging to `store` into its accumulators.
    pub fn accumulate_into(&self, store: &mut ParamStore<T>) {
        let uid = store.uid;
        for (i, p) in store.params.iter_mut().enumerate() {
            if let Some(g) = self.map.get(&(uid, i)) {
                for (a, &b) in p.grad.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::<f32>::new();
        s.add("a/weight", Tensor::zeros(&[2])).unwrap();
        assert!(s.add("a/weight", Tensor::zeros(&[2])).is_err());
    }

    #[test]
    fn clone_gets_new_identity_and_same_checksum() {
        let mut s = ParamStore::<f32>::new();
        s.add("w", Tensor::ones(&[3])).unwrap();
        let c = s.clone();
        assert_ne!(s.uid(), c.uid());
        assert_eq!(s.checksum(), c.checksum());
    }

    #[test]
    fn checksum_sees_value_changes() {
        let mut s = ParamStore::<f32>::new();
        let id = s.add("w", Tensor::ones(&[3])).unwrap();
        let before = s.checksum();
        s.get_mut(id).value.data_mut()[1] = 2.0;
        assert_ne!(before, s.checksum());
    }
}
