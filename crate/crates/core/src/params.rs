//! Named parameter storage shared by every model component.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::{Error, Init, Real, Result, RngState, Tensor};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Insertion-ordered collection of named tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: BTreeMap<String, usize>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { names: Vec::new(), tensors: Vec::new(), index: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor<T>) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::InvalidInput(format!("duplicate parameter `{name}`")));
        }
        let id = self.tensors.len();
        self.names.push(name.to_string());
        self.tensors.push(tensor);
        self.index.insert(name.to_string(), id);
        Ok(ParamId(id))
    }

    /// Creates a parameter with the given init. `trainable` sets `requires_grad`.
    pub fn init(
        &mut self,
        name: &str,
        shape: &[usize],
        scheme: Init,
        rng: &mut RngState,
        trainable: bool,
    ) -> Result<ParamId> {
        let t = Tensor::seeded_init(shape, scheme, rng)?.with_requires_grad(trainable);
        self.insert(name, t)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.index.get(name).map(|&i| ParamId(i)).ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Result<&Tensor<T>> {
        Ok(self.get(self.id(name)?))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &str, &mut Tensor<T>)> {
        self.names
            .iter()
            .zip(self.tensors.iter_mut())
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn zero_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Sets `requires_grad` on every parameter from a name predicate.
    pub fn set_trainable(&mut self, mut pred: impl FnMut(&str) -> bool) {
        for (name, t) in self.names.iter().zip(self.tensors.iter_mut()) {
            t.set_requires_grad(pred(name));
        }
    }

    pub fn trainable_count(&self) -> usize {
        self.tensors.iter().filter(|t| t.requires_grad()).map(Tensor::len).sum()
    }

    /// Copies data (not flags) for every name present in both stores.
    /// Shapes must agree.
    pub fn copy_values_from<U: Real>(&mut self, other: &ParamStore<U>) -> Result<usize> {
        let mut copied = 0;
        for (_, name, src) in other.iter() {
            if let Some(&i) = self.index.get(name) {
                let dst = &mut self.tensors[i];
                if dst.shape() != src.shape() {
                    return Err(Error::Shape(format!(
                        "`{name}`: {:?} vs {:?}",
                        dst.shape(),
                        src.shape()
                    )));
                }
                dst.data_mut().iter_mut().zip(src.data()).for_each(|(d, s)| *d = T::cast(s.as_f64()));
                copied += 1;
            }
        }
        Ok(copied)
    }

    /// Element-type conversion of the whole store.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::<f32>::new();
        let mut rng = RngState::new(0);
        s.init("a", &[2], Init::Zeros, &mut rng, true).unwrap();
        assert!(s.init("a", &[2], Init::Zeros, &mut rng, true).is_err());
        assert!(matches!(s.id("b"), Err(Error::UnknownParam(_))));
    }

    #[test]
    fn set_trainable_partitions_by_name() {
        let mut s = ParamStore::<f32>::new();
        let mut rng = RngState::new(0);
        s.init("lm.w", &[2, 2], Init::Ones, &mut rng, true).unwrap();
        s.init("video_proj.w", &[2, 2], Init::Ones, &mut rng, false).unwrap();
        s.set_trainable(|n| n.starts_with("video_"));
        assert!(!s.by_name("lm.w").unwrap().requires_grad());
        assert!(s.by_name("video_proj.w").unwrap().requires_grad());
        assert_eq!(s.trainable_count(), 4);
    }
}
