//! Dense tensors, reverse-mode autodiff, batch normalization with per-slice
//! statistics and SGD.

mod param;
mod sgd;
mod tape;
mod tensor;

pub use param::{Param, ParamSet};
pub use sgd::Sgd;
pub use tape::{BnMode, BnState, Gradients, ShardStats, Tape, Var, NORM_FLOOR};
pub use tensor::Tensor;
#[cfg(test)]
pub(crate) use tensor::gemm;

/// Central-difference gradient of `f` at `params`:
/// `(f(p + eps·e_i) − f(p − eps·e_i)) / 2eps` per coordinate.
pub fn finite_diff_grad<T: crate::Scalar>(mut f: impl FnMut(&[T]) -> T, params: &[T], eps: T) -> Vec<T> {
    let mut p = params.to_vec();
    let two = T::lit(2.0);
    (0..p.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + eps;
            let up = f(&p);
            p[i] = orig - eps;
            let down = f(&p);
            p[i] = orig;
            (up - down) / (two * eps)
        })
        .collect()
}

#[cfg(test)]
mod tests;
