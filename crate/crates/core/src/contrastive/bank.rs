use rand::seq::index;
use rand::Rng;

use crate::engine::Tensor;
use crate::error::{Error, Result};
use crate::scalar::{ordered_sum, Scalar};

/// Default feature-level momentum of the memory bank.
pub const DEFAULT_BANK_MOMENTUM: f64 = 0.5;

/// One stored feature per dataset sample, refreshed with feature-level momentum.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryBank<T> {
    features: Tensor<T>,
    feature_momentum: T,
    last_update_step: Vec<u64>,
}

impl<T: Scalar> MemoryBank<T> {
    /// `size × dim` random unit rows.
    pub fn new<R: Rng + ?Sized>(size: usize, dim: usize, feature_momentum: T, rng: &mut R) -> Result<Self> {
        if !(feature_momentum >= T::zero() && feature_momentum < T::one()) {
            return Err(Error::contract(format!(
                "bank feature momentum must be in [0, 1), got {feature_momentum}"
            )));
        }
        if size == 0 || dim < 2 {
            return Err(Error::contract("memory bank needs rows and C ≥ 2"));
        }
        let mut features = Tensor::randn(vec![size, dim], rng);
        for i in 0..size {
            normalize(features.row_mut(i));
        }
        Ok(Self {
            features,
            feature_momentum,
            last_update_step: vec![0; size],
        })
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn features(&self) -> &Tensor<T> {
        &self.features
    }

    pub fn feature_momentum(&self) -> T {
        self.feature_momentum
    }

    pub fn last_update_step(&self) -> &[u64] {
        &self.last_update_step
    }

    pub fn rows(&self, ids: &[usize]) -> Tensor<T> {
        self.features.gather_rows(ids)
    }

    /// `k` distinct rows drawn uniformly from those not in `exclude`.
    /// Returns the `k × C` negatives and their row ids.
    pub fn sample_negatives<R: Rng + ?Sized>(
        &self,
        exclude: &[usize],
        k: usize,
        rng: &mut R,
    ) -> Result<(Tensor<T>, Vec<usize>)> {
        let mut excluded = vec![false; self.len()];
        for &e in exclude {
            if e >= self.len() {
                return Err(Error::Index {
                    target: e,
                    classes: self.len(),
                });
            }
            excluded[e] = true;
        }
        let pool: Vec<usize> = (0..self.len()).filter(|&i| !excluded[i]).collect();
        if k == 0 || k > pool.len() {
            return Err(Error::contract(format!(
                "cannot draw {k} negatives from {} eligible bank rows",
                pool.len()
            )));
        }
        let ids: Vec<usize> = index::sample(rng, pool.len(), k).into_iter().map(|j| pool[j]).collect();
        Ok((self.features.gather_rows(&ids), ids))
    }

    /// `row ← normalize(μ·row + (1 − μ)·feat)` for each id.
    pub fn update(&mut self, ids: &[usize], feats: &Tensor<T>, step: u64) -> Result<()> {
        if feats.rank() != 2 || feats.rows() != ids.len() || feats.shape()[1] != self.dim() {
            return Err(Error::dim("bank_update", feats.shape(), &[ids.len(), self.dim()]));
        }
        let mu = self.feature_momentum;
        for (r, &id) in ids.iter().enumerate() {
            let row = self.features.row_mut(id);
            for (v, &f) in row.iter_mut().zip(feats.row(r)) {
                *v = mu * *v + (T::one() - mu) * f;
            }
            normalize(row);
            self.last_update_step[id] = step;
        }
        Ok(())
    }

    /// Mean of `step − last_update_step` over `ids`.
    pub fn staleness(&self, ids: &[usize], step: u64) -> f64 {
        if ids.is_empty() {
            return 0.0;
        }
        ids.iter()
            .map(|&i| step.saturating_sub(self.last_update_step[i]) as f64)
            .sum::<f64>()
            / ids.len() as f64
    }

    pub(crate) fn restore(features: Tensor<T>, feature_momentum: T, last_update_step: Vec<u64>) -> Result<Self> {
        if features.rank() != 2 || features.rows() != last_update_step.len() {
            return Err(Error::Consistency("memory bank state does not fit its feature matrix".into()));
        }
        Ok(Self {
            features,
            feature_momentum,
            last_update_step,
        })
    }
}

fn normalize<T: Scalar>(row: &mut [T]) {
    let n = ordered_sum(row.iter().map(|&v| v * v)).sqrt();
    if n > T::zero() {
        for v in row {
            *v /= n;
        }
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn zero_momentum_replaces_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut bank = MemoryBank::<f64>::new(10, 2, 0.0, &mut rng).unwrap();
        let f = Tensor::from_rows(&[&[0.6, 0.8]]);
        bank.update(&[3], &f, 5).unwrap();
        assert_eq!(bank.features().row(3), &[0.6, 0.8]);
        assert_eq!(bank.last_update_step()[3], 5);
    }

    #[test]
    fn rows_stay_unit_after_update() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut bank = MemoryBank::<f64>::new(10, 4, 0.5, &mut rng).unwrap();
        let f = Tensor::from_rows(&[&[1.0, 0.0, 0.0, 0.0], &[0.0, 0.0, 0.0, 1.0]]);
        bank.update(&[0, 9], &f, 1).unwrap();
        for i in 0..10 {
            let n: f64 = bank.features().row(i).iter().map(|v| v * v).sum();
            assert!((n - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn negatives_never_include_excluded_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let bank = MemoryBank::<f64>::new(40, 3, 0.5, &mut rng).unwrap();
        let exclude = [0, 5, 7, 39];
        for _ in 0..1000 {
            let (_, ids) = bank.sample_negatives(&exclude, 20, &mut rng).unwrap();
            assert!(ids.iter().all(|i| !exclude.contains(i)));
            let mut sorted = ids.clone();
            sorted.sort_unstable();
            sorted.dedup();
            assert_eq!(sorted.len(), 20);
        }
        assert!(bank.sample_negatives(&exclude, 37, &mut rng).is_err());
    }

    #[test]
    fn staleness_after_an_epoch_is_uniform_over_steps() {
        // one epoch of updates in batches; negatives drawn at the end see ages spread over [0, steps)
        let (d, n) = (400usize, 20usize);
        let steps = d / n;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut bank = MemoryBank::<f64>::new(d, 2, 0.5, &mut rng).unwrap();
        let mut order: Vec<usize> = (0..d).collect();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        let f = Tensor::full(vec![n, 2], 1.0);
        for (s, chunk) in order.chunks(n).enumerate() {
            bank.update(chunk, &f, s as u64).unwrap();
        }
        let now = (steps - 1) as u64;
        let all: Vec<usize> = (0..d).collect();
        let mean = bank.staleness(&all, now);
        // simulation oracle: ages uniform on {0, …, steps−1}, mean (steps−1)/2
        assert!((mean - (steps - 1) as f64 / 2.0).abs() < 1e-12);
        let mut hist = vec![0usize; steps];
        for &i in &all {
            hist[(now - bank.last_update_step()[i]) as usize] += 1;
        }
        assert!(hist.iter().all(|&c| c == n));
    }
}
