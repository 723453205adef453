use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::engine::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Desk-scale dictionary size.
pub const DEFAULT_QUEUE_SIZE: usize = 1024;

/// How a new queue is populated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueueInit {
    /// Random unit columns; the queue counts as full from step 0.
    #[default]
    WarmStart,
    /// Empty; only enqueued columns act as negatives until it fills.
    FillFirst,
}

/// Fixed-capacity FIFO of unit-norm keys stored as a `C × K` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct KeyQueue<T> {
    buffer: Tensor<T>,
    cursor: usize,
    filled: usize,
    /// Step at which each column was written (`None` for warm-start columns).
    written_at: Vec<Option<u64>>,
}

impl<T: Scalar> KeyQueue<T> {
    pub fn new<R: Rng + ?Sized>(capacity: usize, dim: usize, init: QueueInit, rng: &mut R) -> Result<Self> {
        if capacity == 0 || dim < 2 {
            return Err(Error::contract(format!(
                "queue needs K ≥ 1 and C ≥ 2, got K={capacity}, C={dim}"
            )));
        }
        let (buffer, filled) = match init {
            QueueInit::WarmStart => {
                let mut b: Tensor<T> = Tensor::randn(vec![dim, capacity], rng);
                for col in 0..capacity {
                    let norm = (0..dim)
                        .map(|r| b.data()[r * capacity + col].powi(2))
                        .fold(T::zero(), |a, v| a + v)
                        .sqrt();
                    for r in 0..dim {
                        b.data_mut()[r * capacity + col] /= norm;
                    }
                }
                (b, capacity)
            }
            QueueInit::FillFirst => (Tensor::zeros(vec![dim, capacity]), 0),
        };
        Ok(Self {
            buffer,
            cursor: 0,
            filled,
            written_at: vec![None; capacity],
        })
    }

    pub fn capacity(&self) -> usize {
        self.buffer.shape()[1]
    }

    pub fn dim(&self) -> usize {
        self.buffer.shape()[0]
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    pub fn filled(&self) -> usize {
        self.filled
    }

    pub fn buffer(&self) -> &Tensor<T> {
        &self.buffer
    }

    /// `C × filled` matrix of the live keys (the whole buffer once full);
    /// `None` while a fill-first queue is still empty.
    pub fn negatives(&self) -> Option<Tensor<T>> {
        if self.filled == 0 {
            return None;
        }
        if self.filled == self.capacity() {
            return Some(self.buffer.clone());
        }
        let (c, k, f) = (self.dim(), self.capacity(), self.filled);
        let mut data = Vec::with_capacity(c * f);
        for r in 0..c {
            data.extend_from_slice(&self.buffer.data()[r * k..r * k + f]);
        }
        Some(Tensor::new(vec![c, f], data).expect("negatives shape"))
    }

    /// Column `j` as a vector.
    pub fn column(&self, j: usize) -> Vec<T> {
        let k = self.capacity();
        (0..self.dim()).map(|r| self.buffer.data()[r * k + j]).collect()
    }

    /// Overwrite the `N` oldest columns with the rows of `keys` (`N × C`).
    pub fn enqueue(&mut self, keys: &Tensor<T>, step: u64) -> Result<()> {
        let (k, c) = (self.capacity(), self.dim());
        if keys.rank() != 2 || keys.shape()[1] != c {
            return Err(Error::dim("enqueue", keys.shape(), &[0, c]));
        }
        let n = keys.rows();
        if n > k {
            return Err(Error::contract(format!("cannot enqueue {n} keys into a queue of {k}")));
        }
        for i in 0..n {
            let col = (self.cursor + i) % k;
            for (r, &v) in keys.row(i).iter().enumerate() {
                self.buffer.data_mut()[r * k + col] = v;
            }
            self.written_at[col] = Some(step);
        }
        self.cursor = (self.cursor + n) % k;
        self.filled = (self.filled + n).min(k);
        Ok(())
    }

    pub fn written_at(&self) -> &[Option<u64>] {
        &self.written_at
    }

    /// Mean age in steps of the keys written so far, measured at `step`.
    pub fn mean_age(&self, step: u64) -> f64 {
        let ages: Vec<f64> = self
            .written_at
            .iter()
            .flatten()
            .map(|&s| step.saturating_sub(s) as f64)
            .collect();
        if ages.is_empty() {
            0.0
        } else {
            ages.iter().sum::<f64>() / ages.len() as f64
        }
    }

    /// Largest key age at `step`.
    pub fn max_age(&self, step: u64) -> u64 {
        self.written_at
            .iter()
            .flatten()
            .map(|&s| step.saturating_sub(s))
            .max()
            .unwrap_or(0)
    }

    pub(crate) fn restore(buffer: Tensor<T>, cursor: usize, filled: usize, written_at: Vec<Option<u64>>) -> Result<Self> {
        let k = buffer.shape().get(1).copied().unwrap_or(0);
        if buffer.rank() != 2 || cursor >= k.max(1) || filled > k || written_at.len() != k {
            return Err(Error::Consistency("queue state does not fit its buffer".into()));
        }
        Ok(Self {
            buffer,
            cursor,
            filled,
            written_at,
        })
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn keys(n: usize, c: usize, tag: f64) -> Tensor<f64> {
        Tensor::from_fn(vec![n, c], |i| tag + (i / c) as f64)
    }

    #[test]
    fn warm_start_columns_are_unit_and_seeded() {
        let q = KeyQueue::<f64>::new(32, 8, QueueInit::WarmStart, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        for j in 0..32 {
            let n: f64 = q.column(j).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
        let q2 = KeyQueue::<f64>::new(32, 8, QueueInit::WarmStart, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(q, q2);
        assert_eq!(q.filled(), 32);
    }

    #[test]
    fn fifo_keeps_last_two_batches() {
        let mut q = KeyQueue::<f64>::new(8, 2, QueueInit::FillFirst, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        q.enqueue(&keys(4, 2, 100.0), 0).unwrap();
        q.enqueue(&keys(4, 2, 200.0), 1).unwrap();
        q.enqueue(&keys(4, 2, 300.0), 2).unwrap();
        let mut firsts: Vec<f64> = (0..8).map(|j| q.column(j)[0]).collect();
        firsts.sort_by(f64::total_cmp);
        assert_eq!(firsts, vec![200.0, 201.0, 202.0, 203.0, 300.0, 301.0, 302.0, 303.0]);
    }

    #[test]
    fn full_batch_replaces_everything_and_oversize_is_rejected() {
        let mut q = KeyQueue::<f64>::new(4, 2, QueueInit::WarmStart, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let k = keys(4, 2, 5.0);
        q.enqueue(&k, 0).unwrap();
        assert_eq!(q.buffer(), &k.transpose());
        assert!(q.enqueue(&keys(5, 2, 0.0), 1).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn matches_reference_fifo(k in 1usize..12, sizes in proptest::collection::vec(1usize..12, 1..20)) {
            let mut q = KeyQueue::<f64>::new(k, 2, QueueInit::FillFirst, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
            let mut reference: std::collections::VecDeque<f64> = Default::default();
            let mut next = 0.0;
            for (step, &n) in sizes.iter().enumerate() {
                let n = n.min(k);
                let batch = Tensor::from_fn(vec![n, 2], |i| next + (i / 2) as f64);
                for i in 0..n {
                    reference.push_back(next + i as f64);
                    if reference.len() > k {
                        reference.pop_front();
                    }
                }
                next += n as f64;
                q.enqueue(&batch, step as u64).unwrap();
                prop_assert_eq!(q.filled(), reference.len());
                let mut live: Vec<f64> = (0..q.filled()).map(|j| q.column(j)[0]).collect();
                let mut want: Vec<f64> = reference.iter().copied().collect();
                live.sort_by(f64::total_cmp);
                want.sort_by(f64::total_cmp);
                prop_assert_eq!(live, want);
            }
        }
    }
}
