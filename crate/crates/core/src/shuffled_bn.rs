//! Shuffled batch normalization for the key path.
//!
//! The key batch is permuted before it is split into virtual device shards,
//! encoded with per-shard BN statistics, and permuted back. A query and its
//! positive key then see statistics computed from different subsets.

use std::ops::Range;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{Encoder, EncoderOutput};
use crate::engine::{BnMode, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Default number of virtual shards.
pub const DEFAULT_SHARDS: usize = 4;

/// Contiguous, equal split of a batch into `num_shards` slices.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ShardSpec {
    pub num_shards: usize,
}

impl ShardSpec {
    pub fn new(num_shards: usize) -> Result<Self> {
        if num_shards == 0 {
            return Err(Error::contract("num_shards must be positive"));
        }
        Ok(Self { num_shards })
    }

    /// Slice `j` covers positions `[j·N/S, (j+1)·N/S)`.
    pub fn slices(&self, n: usize) -> Result<Vec<Range<usize>>> {
        if n % self.num_shards != 0 {
            return Err(Error::contract(format!(
                "batch of {n} is not divisible into {} shards",
                self.num_shards
            )));
        }
        let per = n / self.num_shards;
        Ok((0..self.num_shards).map(|j| j * per..(j + 1) * per).collect())
    }

    /// Shard index of position `i` in a batch of `n`.
    pub fn shard_of(&self, i: usize, n: usize) -> usize {
        i / (n / self.num_shards)
    }
}

/// A permutation of batch positions and its inverse.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ShufflePlan {
    perm: Vec<usize>,
    inv_perm: Vec<usize>,
}

impl ShufflePlan {
    pub fn from_perm(perm: Vec<usize>) -> Result<Self> {
        let n = perm.len();
        let mut inv_perm = vec![usize::MAX; n];
        for (i, &p) in perm.iter().enumerate() {
            if p >= n || inv_perm[p] != usize::MAX {
                return Err(Error::contract("not a permutation"));
            }
            inv_perm[p] = i;
        }
        Ok(Self { perm, inv_perm })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            perm: (0..n).collect(),
            inv_perm: (0..n).collect(),
        }
    }

    /// Shuffled position `i` holds original sample `perm[i]`.
    pub fn perm(&self) -> &[usize] {
        &self.perm
    }

    pub fn inv_perm(&self) -> &[usize] {
        &self.inv_perm
    }

    pub fn len(&self) -> usize {
        self.perm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.perm.is_empty()
    }

    pub fn shuffle<T: Scalar>(&self, x: &Tensor<T>) -> Tensor<T> {
        x.gather_rows(&self.perm)
    }

    pub fn unshuffle<T: Scalar>(&self, x: &Tensor<T>) -> Tensor<T> {
        x.gather_rows(&self.inv_perm)
    }
}

/// Uniformly random permutation of `0..n`.
pub fn make_shuffle<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Result<ShufflePlan> {
    if n < 2 {
        return Err(Error::contract(format!("shuffle needs at least 2 samples, got {n}")));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    ShufflePlan::from_perm(perm)
}

/// Key-path forward on the tape: shuffle rows, encode with per-shard train-mode
/// BN, restore the original order. Row `i` of the result encodes sample `i`.
///
/// The output stays differentiable (end-to-end keys need that); momentum keys
/// detach it. `plan = None` skips the permutation.
pub fn shuffled_forward<T: Scalar>(
    enc: &mut Encoder<T>,
    tape: &mut Tape<T>,
    x: &Tensor<T>,
    plan: Option<&ShufflePlan>,
    shards: ShardSpec,
    prefix: &str,
) -> Result<(Var, EncoderOutput, Vec<Var>)> {
    let n = x.rows();
    let slices = shards.slices(n)?;
    let input = match plan {
        Some(p) => {
            if p.len() != n {
                return Err(Error::contract(format!("plan for {} samples, batch has {n}", p.len())));
            }
            tape.constant(p.shuffle(x))
        }
        None => tape.constant(x.clone()),
    };
    let (out, handles) = enc.forward(tape, input, BnMode::Train(&slices), prefix)?;
    let restored = match plan {
        Some(p) => tape.gather_rows(out.features, p.inv_perm())?,
        None => out.features,
    };
    Ok((restored, out, handles))
}

/// Detached key features for the momentum mechanism.
pub fn shuffled_key_forward<T: Scalar>(
    f_k: &mut Encoder<T>,
    x_k: &Tensor<T>,
    plan: Option<&ShufflePlan>,
    shards: ShardSpec,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let (k, _, _) = shuffled_forward(f_k, &mut tape, x_k, plan, shards, "key")?;
    Ok(tape.value(k).clone())
}

/// One row of a shuffle-BN ablation curve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LeakageRow {
    pub epoch: usize,
    pub pretext_acc: f64,
    pub knn_val_acc: f64,
}

/// Paired per-epoch curves for runs with and without key shuffling.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LeakageCurves {
    pub with_shuffle: Vec<LeakageRow>,
    pub without_shuffle: Vec<LeakageRow>,
}

impl LeakageCurves {
    pub fn curve(&self, shuffle: bool) -> &[LeakageRow] {
        if shuffle {
            &self.with_shuffle
        } else {
            &self.without_shuffle
        }
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::encoder::{Arch, EncoderConfig};

    fn enc() -> Encoder<f64> {
        let cfg = EncoderConfig {
            arch: Arch::Mlp { widths: vec![12] },
            input_shape: vec![5],
            feature_dim: 4,
            use_bn: true,
        };
        Encoder::new(cfg, &mut ChaCha8Rng::seed_from_u64(11)).unwrap()
    }

    #[test]
    fn inverse_restores_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f64>::randn(vec![9, 3], &mut rng);
        let plan = make_shuffle(9, &mut rng).unwrap();
        assert_eq!(plan.unshuffle(&plan.shuffle(&x)), x);
        for i in 0..9 {
            assert_eq!(plan.inv_perm()[plan.perm()[i]], i);
        }
    }

    #[test]
    fn single_sample_rejected() {
        assert!(make_shuffle(1, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn indivisible_batch_rejected() {
        let mut e = enc();
        let x = Tensor::<f64>::zeros(vec![6, 5]);
        assert!(shuffled_key_forward(&mut e, &x, None, ShardSpec::new(4).unwrap()).is_err());
    }

    #[test]
    fn identity_plan_single_shard_matches_plain_forward() {
        let x = Tensor::<f64>::randn(vec![8, 5], &mut ChaCha8Rng::seed_from_u64(2));
        let mut a = enc();
        let mut b = enc();
        let plan = ShufflePlan::identity(8);
        let k1 = shuffled_key_forward(&mut a, &x, Some(&plan), ShardSpec::new(1).unwrap()).unwrap();

        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let (out, _) = b.forward(&mut tape, xv, BnMode::Train(&[0..8]), "k").unwrap();
        assert_eq!(&k1, tape.value(out.features));
        assert_eq!(a.bn, b.bn);
    }

    #[test]
    fn single_shard_shuffle_is_unobservable() {
        let x = Tensor::<f64>::randn(vec![8, 5], &mut ChaCha8Rng::seed_from_u64(3));
        let spec = ShardSpec::new(1).unwrap();
        let plain = shuffled_key_forward(&mut enc(), &x, None, spec).unwrap();
        let plan = make_shuffle(8, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let shuffled = shuffled_key_forward(&mut enc(), &x, Some(&plan), spec).unwrap();
        assert!(plain.max_abs_diff(&shuffled) < 1e-12);
    }

    #[test]
    fn permutations_of_three_are_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut counts = std::collections::HashMap::new();
        for _ in 0..6000 {
            *counts.entry(make_shuffle(3, &mut rng).unwrap().perm().to_vec()).or_insert(0usize) += 1;
        }
        assert_eq!(counts.len(), 6);
        let chi2: f64 = counts.values().map(|&c| (c as f64 - 1000.0).powi(2) / 1000.0).sum();
        // χ²(5) upper 1% point
        assert!(chi2 < 15.086, "chi2 = {chi2}");
    }

    #[test]
    fn eval_mode_unshuffle_restores_sample_order() {
        let e = enc();
        let x = Tensor::<f64>::randn(vec![8, 5], &mut ChaCha8Rng::seed_from_u64(6));
        let plan = make_shuffle(8, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let (direct, _) = e.encode(&x).unwrap();
        let (via, _) = e.encode(&plan.shuffle(&x)).unwrap();
        assert_eq!(plan.unshuffle(&via), direct);
    }

    #[test]
    fn key_and_query_see_different_shard_statistics() {
        let (n, s) = (16, 4);
        let spec = ShardSpec::new(s).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Tensor::<f64>::randn(vec![n, 5], &mut rng);
        let plan = make_shuffle(n, &mut rng).unwrap();
        let slices = spec.slices(n).unwrap();

        let mut q_enc = enc();
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let (q_out, _) = q_enc.forward(&mut tape, xv, BnMode::Train(&slices), "query").unwrap();
        let (_, k_out, _) = shuffled_forward(&mut enc(), &mut tape, &x, Some(&plan), spec, "key").unwrap();
        let q_stats = tape.bn_stats(q_out.bn_nodes[0]).unwrap();
        let k_stats = tape.bn_stats(k_out.bn_nodes[0]).unwrap();
        let c = q_stats.mean.len() / s;
        let differing = (0..n)
            .filter(|&i| {
                let qs = spec.shard_of(i, n);
                let ks = spec.shard_of(plan.inv_perm()[i], n);
                let qm = &q_stats.mean[qs * c..(qs + 1) * c];
                let km = &k_stats.mean[ks * c..(ks + 1) * c];
                qm.iter().zip(km).any(|(a, b)| (a - b).abs() > 1e-12)
            })
            .count();
        assert!(differing * 2 >= n, "{differing} of {n}");
    }
}
