use std::collections::BTreeSet;

use crate::error::{Error, Result};

use super::rng::Rng;
use super::scalar::Scalar;
use super::tape::{Gradients, Tape, Var};
use super::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
pub struct Param<T> {
    pub name: String,
    pub group: String,
    pub tensor: Tensor<T>,
}

/// Named learnable tensors organised in groups, with a frozen-group set.
#[derive(Debug, Clone, Default)]
pub struct ParamSet<T = f32> {
    params: Vec<Param<T>>,
    frozen: BTreeSet<String>,
}

/// Tape handles for every parameter of a [`ParamSet`], in id order.
#[derive(Debug, Clone)]
pub struct Bindings(Vec<Var>);

impl std::ops::Index<ParamId> for Bindings {
    type Output = Var;
    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            frozen: BTreeSet::new(),
        }
    }

    pub fn add(&mut self, group: &str, name: &str, tensor: Tensor<T>) -> ParamId {
        self.params.push(Param {
            name: format!("{group}.{name}"),
            group: group.to_string(),
            tensor,
        });
        ParamId(self.params.len() - 1)
    }

    /// Normal(0, std²) initialised parameter.
    pub fn add_normal(
        &mut self,
        group: &str,
        name: &str,
        shape: &[usize],
        std: f64,
        rng: &mut Rng,
    ) -> ParamId {
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::of(rng.normal() * std)).collect();
        self.add(
            group,
            name,
            Tensor::new(shape, data).expect("positive shape"),
        )
    }

    pub fn add_const(&mut self, group: &str, name: &str, shape: &[usize], value: f64) -> ParamId {
        self.add(group, name, Tensor::full(shape, T::of(value)))
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].tensor
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

    pub fn by_name(&self, name: &str) -> Option<&Param<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    pub fn groups(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for p in &self.params {
            if !out.contains(&p.group) {
                out.push(p.group.clone());
            }
        }
        out
    }

    pub fn freeze(&mut self, group: &str) {
        self.frozen.insert(group.to_string());
    }

    pub fn unfreeze_all(&mut self) {
        self.frozen.clear();
    }

    pub fn is_frozen(&self, group: &str) -> bool {
        self.frozen.contains(group)
    }

    pub fn frozen(&self) -> &BTreeSet<String> {
        &self.frozen
    }

    pub fn element_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    /// Records every parameter on `tape`; frozen groups become constants.
    pub fn bind(&self, tape: &mut Tape<T>) -> Bindings {
        Bindings(
            self.params
                .iter()
                .map(|p| tape.leaf(&p.tensor, !self.frozen.contains(&p.group)))
                .collect(),
        )
    }

    /// Records every parameter as a constant, for inference.
    pub fn bind_frozen(&self, tape: &mut Tape<T>) -> Bindings {
        Bindings(
            self.params
                .iter()
                .map(|p| tape.constant(&p.tensor))
                .collect(),
        )
    }

    /// Adds tape gradients into each trainable parameter's grad buffer.
    /// Parameters the loss does not reach receive an explicit zero gradient.
    pub fn accumulate(&mut self, grads: &Gradients<T>, bindings: &Bindings) {
        for (p, &v) in self.params.iter_mut().zip(&bindings.0) {
            if self.frozen.contains(&p.group) {
                continue;
            }
            match grads.get(v) {
                Some(g) => p.tensor.accumulate_grad(g),
                None => {
                    let zeros = vec![T::zero(); p.tensor.len()];
                    p.tensor.accumulate_grad(&zeros);
                }
            }
        }
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(|p| p.tensor.zero_grad());
    }

    /// Multiplies every gradient buffer by `c`.
    pub fn scale_grads(&mut self, c: T) {
        for p in &mut self.params {
            if let Some(g) = p.tensor.grad_mut() {
                g.iter_mut().for_each(|x| *x = *x * c);
            }
        }
    }

    /// Errors if a trainable parameter lacks a gradient.
    pub fn check_grads(&self) -> Result<()> {
        for p in &self.params {
            if !self.frozen.contains(&p.group) && p.tensor.grad().is_none() {
                return Err(Error::MissingGrad(p.name.clone()));
            }
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    group: p.group.clone(),
                    tensor: p.tensor.cast(),
                })
                .collect(),
            frozen: self.frozen.clone(),
        }
    }
}
