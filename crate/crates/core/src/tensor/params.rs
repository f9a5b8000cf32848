use std::collections::BTreeMap;

use super::{Gradients, Tape, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub value: Tensor,
    pub grad: Option<Tensor>,
}

/// Named learnable tensors, iterated in lexicographic name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterStore {
    params: BTreeMap<String, Parameter>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::usage(format!("duplicate parameter '{name}'")));
        }
        self.params.insert(name, Parameter { value, grad: None });
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Option<&Parameter> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Parameter> {
        self.params.get_mut(name)
    }

    pub fn value(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).map(|p| &p.value)
    }

    pub fn value_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name).map(|p| &mut p.value)
    }

    pub fn grad(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).and_then(|p| p.grad.as_ref())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Parameter)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar entries.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.value.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params.values_mut() {
            p.grad = None;
        }
    }

    /// Copies gradients from a reverse sweep into every parameter. Parameters
    /// the loss did not reach receive zeros.
    pub fn set_grads(&mut self, tape: &Tape, grads: &Gradients) {
        for (name, p) in self.params.iter_mut() {
            let g = tape
                .param_var(name)
                .and_then(|v| grads.get(v))
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; p.value.numel()]);
            let shape = p.value.shape().to_vec();
            p.grad = Some(Tensor::new(shape, g).expect("gradient matches parameter layout"));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iteration_is_lexicographic() {
        let mut s = ParameterStore::new();
        for name in ["z.w", "a.b", "m"] {
            s.insert(name, Tensor::scalar(0.0)).unwrap();
        }
        assert_eq!(s.names().collect::<Vec<_>>(), ["a.b", "m", "z.w"]);
        assert!(s.insert("m", Tensor::scalar(1.0)).is_err());
    }

    #[test]
    fn unreached_parameters_get_zero_grad() {
        let mut s = ParameterStore::new();
        s.insert("used", Tensor::vector(vec![1.0, 2.0])).unwrap();
        s.insert("unused", Tensor::vector(vec![3.0])).unwrap();
        let mut tape = Tape::new();
        let u = tape.param(&s, "used").unwrap();
        let l = tape.sum(u).unwrap();
        let g = tape.backward(l).unwrap();
        s.set_grads(&tape, &g);
        assert_eq!(s.grad("used").unwrap().data(), &[1.0, 1.0]);
        assert_eq!(s.grad("unused").unwrap().data(), &[0.0]);
    }
}
