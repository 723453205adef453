use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::param::ParamSet;
use super::tensor::Tensor;

/// SGD with momentum and L2 weight decay:
/// `g' = g + wd·p; v ← μ·v + g'; p ← p − lr·v`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd<T> {
    pub lr: T,
    pub momentum: T,
    pub weight_decay: T,
    velocity: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Sgd<T> {
    pub const DEFAULT_MOMENTUM: f64 = 0.9;
    pub const DEFAULT_WEIGHT_DECAY: f64 = 1e-4;

    pub fn new(lr: T, momentum: T, weight_decay: T) -> Result<Self> {
        if !(lr > T::zero()) {
            return Err(Error::contract(format!("learning rate must be positive, got {lr}")));
        }
        if !(momentum >= T::zero() && momentum < T::one()) {
            return Err(Error::contract(format!("SGD momentum must be in [0,1), got {momentum}")));
        }
        if !(weight_decay >= T::zero()) {
            return Err(Error::contract(format!("weight decay must be ≥ 0, got {weight_decay}")));
        }
        Ok(Self {
            lr,
            momentum,
            weight_decay,
            velocity: Vec::new(),
        })
    }

    /// Defaults: momentum 0.9, weight decay 1e-4.
    pub fn with_lr(lr: T) -> Result<Self> {
        Self::new(lr, T::lit(Self::DEFAULT_MOMENTUM), T::lit(Self::DEFAULT_WEIGHT_DECAY))
    }

    pub fn velocity(&self) -> &[Option<Tensor<T>>] {
        &self.velocity
    }

    pub fn set_velocity(&mut self, v: Vec<Option<Tensor<T>>>) {
        self.velocity = v;
    }

    /// Apply one update to every parameter holding a gradient, then clear the
    /// gradients. Nothing is modified if any gradient is non-finite.
    pub fn step(&mut self, params: &mut ParamSet<T>) -> Result<()> {
        if let Some(p) = params
            .iter()
            .find(|p| p.grad.as_ref().is_some_and(|g| !g.is_finite()))
        {
            return Err(Error::Divergence(format!("gradient of `{}`", p.name)));
        }
        if self.velocity.len() < params.len() {
            self.velocity.resize(params.len(), None);
        }
        for (p, v) in params.iter_mut().zip(self.velocity.iter_mut()) {
            let Some(g) = p.grad.take() else { continue };
            if g.shape() != p.value.shape() {
                return Err(Error::dim("sgd_step", p.value.shape(), g.shape()));
            }
            let v = v.get_or_insert_with(|| Tensor::zeros(p.value.shape().to_vec()));
            for ((pv, &gv), vv) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(v.data_mut())
            {
                let gd = gv + self.weight_decay * *pv;
                *vv = self.momentum * *vv + gd;
                *pv -= self.lr * *vv;
            }
        }
        Ok(())
    }
}
