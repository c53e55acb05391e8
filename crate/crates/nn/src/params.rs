use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

pub type ParamId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorKind {
    ConvWeight,
    ConvBias,
    BnScale,
    BnShift,
    BnRunningMean,
    BnRunningVar,
}

impl TensorKind {
    /// Running statistics are buffers, not optimized parameters.
    pub fn is_learnable(self) -> bool {
        !matches!(self, TensorKind::BnRunningMean | TensorKind::BnRunningVar)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub kind: TensorKind,
    pub shape: Vec<usize>,
    pub value: Vec<T>,
    /// Empty for buffers.
    pub grad: Vec<T>,
    /// Always `false` for buffers.
    pub trainable: bool,
}

impl<T: Scalar> Param<T> {
    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// Named tensors of a model in registration order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    index: HashMap<String, ParamId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: String, kind: TensorKind, shape: Vec<usize>, value: Vec<T>) -> ParamId {
        assert_eq!(shape.iter().product::<usize>(), value.len(), "{name}: shape/value mismatch");
        assert!(!self.index.contains_key(&name), "duplicate tensor {name}");
        let learnable = kind.is_learnable();
        let id = self.params.len();
        self.index.insert(name.clone(), id);
        self.params.push(Param {
            name,
            kind,
            shape,
            grad: if learnable { vec![T::zero(); value.len()] } else { Vec::new() },
            value,
            trainable: learnable,
        });
        id
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Param<T>> {
        self.id(name).map(|i| &self.params[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.params[id].trainable
    }

    /// Marks a learnable tensor trainable or frozen. Buffers stay frozen.
    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        let p = &mut self.params[id];
        p.trainable = trainable && p.kind.is_learnable();
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = T::zero());
        }
    }

    pub fn accumulate_grad(&mut self, id: ParamId, g: &[T]) {
        let p = &mut self.params[id];
        debug_assert_eq!(p.grad.len(), g.len());
        for (a, &b) in p.grad.iter_mut().zip(g) {
            *a = *a + b;
        }
    }

    pub fn learnable_elements(&self) -> usize {
        self.params.iter().filter(|p| p.kind.is_learnable()).map(|p| p.len()).sum()
    }

    pub fn trainable_elements(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.len()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn buffers_never_train() {
        let mut s = ParamStore::<f32>::new();
        let w = s.add("w".into(), TensorKind::ConvWeight, vec![2], vec![1.0, 2.0]);
        let m = s.add("m".into(), TensorKind::BnRunningMean, vec![1], vec![0.0]);
        assert!(s.is_trainable(w));
        assert!(!s.is_trainable(m));
        s.set_trainable(m, true);
        assert!(!s.is_trainable(m));
        assert!(s.get(m).grad.is_empty());
        assert_eq!(s.learnable_elements(), 2);
        s.set_trainable(w, false);
        assert_eq!(s.trainable_elements(), 0);
        assert_eq!(s.by_name("w").unwrap().value, vec![1.0, 2.0]);
    }
}
