use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::tape::{Gradients, Tape, Var};
use super::tensor::Tensor;

/// A named parameter tensor with its gradient slot.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
    pub requires_grad: bool,
}

impl<T: Scalar> Param<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        Self {
            name: name.into(),
            value,
            grad: None,
            requires_grad: true,
        }
    }

    /// Add `g` to the gradient slot. Frozen parameters refuse.
    pub fn accumulate_grad(&mut self, g: &Tensor<T>) -> Result<()> {
        if !self.requires_grad {
            return Err(Error::contract(format!(
                "parameter `{}` is grad-exempt and cannot accumulate gradients",
                self.name
            )));
        }
        if g.shape() != self.value.shape() {
            return Err(Error::dim("accumulate_grad", self.value.shape(), g.shape()));
        }
        match &mut self.grad {
            Some(acc) => acc.add_assign(g),
            None => self.grad = Some(g.clone()),
        }
        Ok(())
    }
}

/// Ordered list of named parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet<T> {
    params: Vec<Param<T>>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn push(&mut self, p: Param<T>) -> usize {
        self.params.push(p);
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> std::slice::IterMut<'_, Param<T>> {
        self.params.iter_mut()
    }

    pub fn get(&self, i: usize) -> &Param<T> {
        &self.params[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Param<T> {
        &mut self.params[i]
    }

    pub fn by_name(&self, name: &str) -> Option<&Param<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        for p in &mut self.params {
            p.requires_grad = flag;
            if !flag {
                p.grad = None;
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Register every parameter on `tape` as a leaf labeled `prefix/name`.
    /// Grad-exempt parameters become frozen leaves.
    pub fn register(&self, tape: &mut Tape<T>, prefix: &str) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| {
                let label = format!("{prefix}/{}", p.name);
                if p.requires_grad {
                    tape.param(label, p.value.clone())
                } else {
                    tape.frozen(label, p.value.clone())
                }
            })
            .collect()
    }

    /// Pull gradients for `handles` (as returned by [`ParamSet::register`]) into the slots.
    pub fn accumulate(&mut self, grads: &Gradients<T>, handles: &[Var]) -> Result<()> {
        if handles.len() != self.params.len() {
            return Err(Error::contract("handle list does not match parameter list"));
        }
        for (p, &h) in self.params.iter_mut().zip(handles) {
            if let Some(g) = grads.get(h) {
                p.accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    /// All values concatenated in parameter order.
    pub fn flatten(&self) -> Vec<T> {
        self.params.iter().flat_map(|p| p.value.data().iter().copied()).collect()
    }

    /// Overwrite values from a flat buffer laid out as in [`ParamSet::flatten`].
    pub fn unflatten(&mut self, flat: &[T]) {
        let mut off = 0;
        for p in &mut self.params {
            let n = p.value.len();
            p.value.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
    }

    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}
