//! Frozen-feature evaluation: a linear probe and a weighted kNN monitor.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::encoder::Encoder;
use crate::engine::{Param, ParamSet, Sgd, Tape, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Where features are read from the encoder.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tap {
    /// Normalized output of the projection head.
    ProjectionOutput,
    /// Pooled features feeding the head.
    #[default]
    PreProjection,
}

/// `D × F` features with one label per row.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    pub rows: Tensor<f64>,
    pub labels: Vec<u32>,
    pub tap: Option<Tap>,
}

impl FeatureMatrix {
    pub fn new(rows: Tensor<f64>, labels: Vec<u32>, tap: Option<Tap>) -> Result<Self> {
        if rows.rank() != 2 || rows.rows() != labels.len() {
            return Err(Error::dim("feature_matrix", rows.shape(), &[labels.len()]));
        }
        if !rows.is_finite() {
            return Err(Error::Divergence("non-finite feature values".into()));
        }
        Ok(Self { rows, labels, tap })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.rows.shape()[1]
    }

    pub fn num_classes(&self) -> usize {
        self.labels.iter().map(|&c| c as usize + 1).max().unwrap_or(0)
    }
}

fn labels_of<T: Scalar>(ds: &Dataset<T>) -> Result<Vec<u32>> {
    ds.labels()
        .map(<[u32]>::to_vec)
        .ok_or_else(|| Error::contract("evaluation needs a labelled dataset"))
}

/// Eval-mode BN features of every sample, without augmentation.
pub fn extract_features<T: Scalar>(enc: &Encoder<T>, ds: &Dataset<T>, tap: Tap) -> Result<FeatureMatrix> {
    const CHUNK: usize = 512;
    let ids: Vec<usize> = (0..ds.len()).collect();
    let mut data = Vec::new();
    let mut width = 0;
    for chunk in ids.chunks(CHUNK) {
        let (feat, pre) = enc.encode(&ds.batch(chunk))?;
        let t = match tap {
            Tap::ProjectionOutput => feat,
            Tap::PreProjection => pre,
        };
        width = t.shape()[1];
        data.extend(t.data().iter().map(|v| v.as_f64()));
    }
    FeatureMatrix::new(Tensor::new(vec![ds.len(), width], data)?, labels_of(ds)?, Some(tap))
}

/// Flattened raw inputs as features (the no-learning baseline).
pub fn raw_features<T: Scalar>(ds: &Dataset<T>) -> Result<FeatureMatrix> {
    let data = ds.all().data().iter().map(|v| v.as_f64()).collect();
    FeatureMatrix::new(Tensor::new(vec![ds.len(), ds.sample_len()], data)?, labels_of(ds)?, None)
}

// ---------------------------------------------------------------------------
// kNN monitor

pub const DEFAULT_KNN_K: usize = 20;
pub const DEFAULT_KNN_TEMPERATURE: f64 = 0.07;

fn normalized(t: &Tensor<f64>) -> Tensor<f64> {
    let mut out = t.clone();
    for i in 0..out.rows() {
        let n = out.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 0.0 {
            out.row_mut(i).iter_mut().for_each(|v| *v /= n);
        }
    }
    out
}

/// Predicted class of every validation row: vote among the `k` most
/// cosine-similar training rows, weighted by `exp(cos/τ)` (or uniformly when
/// `temperature` is `None`). Similarity ties go to the lower training index,
/// vote ties to the smaller class id.
pub fn knn_predict(train: &FeatureMatrix, val: &FeatureMatrix, k: usize, temperature: Option<f64>) -> Result<Vec<u32>> {
    if k == 0 || k > train.len() {
        return Err(Error::contract(format!("k = {k} invalid for {} training rows", train.len())));
    }
    if train.dim() != val.dim() {
        return Err(Error::dim("knn_monitor", train.rows.shape(), val.rows.shape()));
    }
    if let Some(t) = temperature {
        if !(t > 0.0) {
            return Err(Error::contract(format!("kNN temperature must be positive, got {t}")));
        }
    }
    let (tr, va) = (normalized(&train.rows), normalized(&val.rows));
    let classes = train.num_classes().max(val.num_classes());
    let predict = |i: usize| -> u32 {
        let q = va.row(i);
        let mut sims: Vec<(f64, usize)> = (0..tr.rows())
            .map(|j| (q.iter().zip(tr.row(j)).map(|(a, b)| a * b).sum::<f64>(), j))
            .collect();
        let by_sim = |a: &(f64, usize), b: &(f64, usize)| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1));
        if k < sims.len() {
            sims.select_nth_unstable_by(k - 1, by_sim);
            sims.truncate(k);
        }
        sims.sort_by(by_sim);
        let mut votes = vec![0.0f64; classes];
        for &(s, j) in &sims {
            votes[train.labels[j] as usize] += temperature.map_or(1.0, |t| (s / t).exp());
        }
        (0..classes).fold(0, |best, c| if votes[c] > votes[best] { c } else { best }) as u32
    };
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(8);
    let chunk = val.len().div_ceil(workers).max(1);
    let mut out = vec![0u32; val.len()];
    std::thread::scope(|s| {
        for (w, slot) in out.chunks_mut(chunk).enumerate() {
            let predict = &predict;
            s.spawn(move || {
                for (o, p) in slot.iter_mut().enumerate() {
                    *p = predict(w * chunk + o);
                }
            });
        }
    });
    Ok(out)
}

/// Top-1 accuracy of [`knn_predict`].
pub fn knn_monitor(train: &FeatureMatrix, val: &FeatureMatrix, k: usize, temperature: Option<f64>) -> Result<f64> {
    let pred = knn_predict(train, val, k, temperature)?;
    Ok(accuracy(&pred, &val.labels))
}

fn accuracy(pred: &[u32], labels: &[u32]) -> f64 {
    pred.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / labels.len().max(1) as f64
}

// ---------------------------------------------------------------------------
// Linear probe

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    /// Learning-rate grid; the best validation accuracy is reported.
    pub lrs: Vec<f64>,
    pub weight_decay: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch: usize,
    /// Center and scale features with training-set statistics first.
    pub standardize: bool,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            lrs: vec![0.3, 3.0, 30.0],
            weight_decay: 0.0,
            momentum: 0.9,
            epochs: 30,
            batch: 256,
            standardize: true,
            seed: 0,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lrs.is_empty() || self.lrs.iter().any(|&l| !(l > 0.0)) {
            return Err(Error::Config("probe lrs must be a nonempty list of positive values".into()));
        }
        if self.epochs == 0 || self.batch == 0 {
            return Err(Error::Config("probe epochs and batch must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("probe momentum must be in [0,1) and weight_decay ≥ 0".into()));
        }
        Ok(())
    }
}

/// Probe outcome over the learning-rate grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    /// Best validation accuracy over the runs that did not diverge (0 if all did).
    pub accuracy: f64,
    pub best_lr: Option<f64>,
    /// `(lr, accuracy)`; `None` marks a diverged run.
    pub grid: Vec<(f64, Option<f64>)>,
}

impl ProbeResult {
    pub fn failed(&self) -> bool {
        self.best_lr.is_none()
    }
}

fn standardize(train: &Tensor<f64>, val: &Tensor<f64>) -> (Tensor<f64>, Tensor<f64>) {
    let (n, f) = (train.rows(), train.shape()[1]);
    let mut mean = vec![0.0; f];
    let mut var = vec![0.0; f];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(train.row(i)) {
            *m += v / n as f64;
        }
    }
    for i in 0..n {
        for ((s, v), m) in var.iter_mut().zip(train.row(i)).zip(&mean) {
            *s += (v - m).powi(2) / n as f64;
        }
    }
    let apply = |t: &Tensor<f64>| {
        let mut out = t.clone();
        for i in 0..t.rows() {
            for (j, v) in out.row_mut(i).iter_mut().enumerate() {
                *v = (*v - mean[j]) / (var[j] + 1e-8).sqrt();
            }
        }
        out
    };
    (apply(train), apply(val))
}

/// Softmax regression on frozen features, one run per grid learning rate.
/// A run whose loss or weights go non-finite counts as failed, not as an error.
pub fn linear_probe(train: &FeatureMatrix, val: &FeatureMatrix, cfg: &ProbeConfig) -> Result<ProbeResult> {
    cfg.validate()?;
    if train.dim() != val.dim() {
        return Err(Error::dim("linear_probe", train.rows.shape(), val.rows.shape()));
    }
    let classes = train.num_classes().max(val.num_classes());
    let (xtr, xva) = if cfg.standardize {
        standardize(&train.rows, &val.rows)
    } else {
        (train.rows.clone(), val.rows.clone())
    };
    let mut grid = Vec::new();
    for &lr in &cfg.lrs {
        let acc = probe_once(&xtr, &train.labels, &xva, &val.labels, classes, lr, cfg)?;
        grid.push((lr, acc));
    }
    let best = grid
        .iter()
        .filter_map(|&(lr, a)| a.map(|a| (lr, a)))
        .fold(None, |best: Option<(f64, f64)>, (lr, a)| match best {
            Some((_, b)) if b >= a => best,
            _ => Some((lr, a)),
        });
    Ok(ProbeResult {
        accuracy: best.map_or(0.0, |b| b.1),
        best_lr: best.map(|b| b.0),
        grid,
    })
}

fn probe_once(
    xtr: &Tensor<f64>,
    ytr: &[u32],
    xva: &Tensor<f64>,
    yva: &[u32],
    classes: usize,
    lr: f64,
    cfg: &ProbeConfig,
) -> Result<Option<f64>> {
    let (n, f) = (xtr.rows(), xtr.shape()[1]);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let bound = 1.0 / (f as f64).sqrt();
    let mut params = ParamSet::new();
    params.push(Param::new("probe.weight", Tensor::uniform(vec![f, classes], bound, &mut rng)));
    params.push(Param::new("probe.bias", Tensor::zeros(vec![classes])));
    let mut opt = Sgd::new(lr, cfg.momentum, cfg.weight_decay)?;
    let batch = cfg.batch.min(n);
    for epoch in 0..cfg.epochs {
        let frac = epoch as f64 / cfg.epochs as f64;
        opt.lr = lr * if frac >= 0.8 { 0.01 } else if frac >= 0.6 { 0.1 } else { 1.0 };
        let order = crate::data::minibatches(n, batch, cfg.seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9))?;
        for ids in order {
            let mut tape = Tape::new();
            let h = params.register(&mut tape, "probe");
            let x = tape.constant(xtr.gather_rows(&ids));
            let logits = tape.linear(x, h[0], h[1])?;
            let targets: Vec<usize> = ids.iter().map(|&i| ytr[i] as usize).collect();
            let loss = tape.softmax_cross_entropy(logits, &targets)?;
            if !tape.value(loss).data()[0].is_finite() {
                return Ok(None);
            }
            let grads = tape.backward(loss)?;
            params.accumulate(&grads, &h)?;
            if opt.step(&mut params).is_err() {
                return Ok(None);
            }
        }
        if params.iter().any(|p| !p.value.is_finite()) {
            return Ok(None);
        }
    }
    let w = &params.get(0).value;
    let b = &params.get(1).value;
    let mut pred = Vec::with_capacity(xva.rows());
    for i in 0..xva.rows() {
        let row = xva.row(i);
        let scores: Vec<f64> = (0..classes)
            .map(|c| b.data()[c] + (0..f).map(|j| row[j] * w.data()[j * classes + c]).sum::<f64>())
            .collect();
        if scores.iter().any(|s| !s.is_finite()) {
            return Ok(None);
        }
        pred.push((0..classes).fold(0, |best, c| if scores[c] > scores[best] { c } else { best }) as u32);
    }
    Ok(Some(accuracy(&pred, yva)))
}

#[cfg(test)]
mod tests {
    use rand::seq::SliceRandom;
    use rand::Rng;

    use super::*;
    use crate::data::{synth_clusters, SynthSpec};
    use crate::encoder::{Arch, EncoderConfig};

    fn fm(rows: Tensor<f64>, labels: Vec<u32>) -> FeatureMatrix {
        FeatureMatrix::new(rows, labels, None).unwrap()
    }

    fn random_fm(n: usize, f: usize, classes: u32, rng: &mut ChaCha8Rng) -> FeatureMatrix {
        let rows = Tensor::randn(vec![n, f], rng);
        let labels = (0..n).map(|_| rng.gen_range(0..classes)).collect();
        fm(rows, labels)
    }

    #[test]
    fn knn_identical_point_with_k1() {
        let train = fm(Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0], &[-1.0, 0.2]]), vec![4, 1, 2]);
        let val = fm(Tensor::from_rows(&[&[0.0, 1.0], &[-1.0, 0.2]]), vec![1, 2]);
        assert_eq!(knn_predict(&train, &val, 1, Some(0.07)).unwrap(), vec![1, 2]);
        assert_eq!(knn_monitor(&train, &val, 1, None).unwrap(), 1.0);
        assert!(knn_monitor(&train, &val, 4, None).is_err());
        assert!(knn_monitor(&train, &val, 0, None).is_err());
    }

    #[test]
    fn knn_with_every_neighbor_uniform_is_majority_with_small_class_tiebreak() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 40;
        let train = fm(Tensor::randn(vec![n, 3], &mut rng), (0..n as u32).map(|i| i % 4).collect());
        let val = random_fm(50, 3, 4, &mut rng);
        // balanced classes and uniform weights: every class ties, class 0 wins
        let pred = knn_predict(&train, &val, n, None).unwrap();
        assert!(pred.iter().all(|&p| p == 0));
        let acc = knn_monitor(&train, &val, n, None).unwrap();
        let zeros = val.labels.iter().filter(|&&l| l == 0).count() as f64 / 50.0;
        assert_eq!(acc, zeros);
    }

    #[test]
    fn knn_matches_brute_force_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let train = random_fm(200, 16, 5, &mut rng);
        let val = random_fm(60, 16, 5, &mut rng);
        let (k, t) = (7, 0.1);
        let got = knn_predict(&train, &val, k, Some(t)).unwrap();
        let unit = |r: &[f64]| {
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            r.iter().map(|v| v / n).collect::<Vec<_>>()
        };
        for i in 0..val.len() {
            let q = unit(val.rows.row(i));
            let mut all: Vec<(f64, usize)> = (0..train.len())
                .map(|j| (unit(train.rows.row(j)).iter().zip(&q).map(|(a, b)| a * b).sum(), j))
                .collect();
            // exhaustive: full sort, take the first k
            all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
            let mut votes = [0.0; 5];
            for &(s, j) in &all[..k] {
                votes[train.labels[j] as usize] += (s / t).exp();
            }
            let mut best = 0;
            for c in 1..5 {
                if votes[c] > votes[best] {
                    best = c;
                }
            }
            assert_eq!(got[i], best as u32, "row {i}");
        }
    }

    #[test]
    fn knn_is_rotation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let train = random_fm(120, 6, 4, &mut rng);
        let val = random_fm(40, 6, 4, &mut rng);
        // random orthogonal matrix via Gram-Schmidt
        let mut q: Vec<Vec<f64>> = Vec::new();
        while q.len() < 6 {
            let mut v: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
            for u in &q {
                let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= d * b);
            }
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            q.push(v.iter().map(|x| x / n).collect());
        }
        let rot = Tensor::from_fn(vec![6, 6], |i| q[i / 6][i % 6]);
        let rotate = |m: &FeatureMatrix| {
            let data = crate::engine::gemm(m.rows.data(), rot.data(), m.len(), 6, 6);
            fm(Tensor::new(vec![m.len(), 6], data).unwrap(), m.labels.clone())
        };
        let a = knn_predict(&train, &val, 9, Some(0.07)).unwrap();
        let b = knn_predict(&rotate(&train), &rotate(&val), 9, Some(0.07)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn probe_separates_two_separable_classes() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let make = |n: usize, rng: &mut ChaCha8Rng| {
            let labels: Vec<u32> = (0..n as u32).map(|i| i % 2).collect();
            let rows = Tensor::from_fn(vec![n, 3], |i| {
                let sign = if labels[i / 3] == 0 { -1.0 } else { 1.0 };
                if i % 3 == 0 {
                    sign * rng.gen_range(0.5..2.0)
                } else {
                    rng.gen_range(-1.0..1.0)
                }
            });
            fm(rows, labels)
        };
        let (tr, va) = (make(200, &mut rng), make(100, &mut rng));
        let r = linear_probe(&tr, &va, &ProbeConfig::default()).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.grid.len(), 3);
    }

    #[test]
    fn probe_on_shuffled_labels_sits_at_chance() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let spec = SynthSpec {
            n_classes: 10,
            n_per_class: 200,
            shape: vec![16],
            class_sep: 4.0,
            noise_sigma: 1.0,
            seed: 5,
        };
        let ds = synth_clusters::<f64>(&spec).unwrap();
        let (tr, va) = ds.split(1500);
        let mut train = raw_features(&tr).unwrap();
        train.labels.shuffle(&mut rng);
        let val = raw_features(&va).unwrap();
        let r = linear_probe(&train, &val, &ProbeConfig::default()).unwrap();
        assert!((r.accuracy - 0.10).abs() <= 0.03, "{}", r.accuracy);
    }

    #[test]
    fn probe_reports_divergence_as_failure() {
        let train = fm(Tensor::from_rows(&[&[1e200, -1e200], &[-1e200, 1e200]]), vec![0, 1]);
        let cfg = ProbeConfig {
            lrs: vec![1e10],
            standardize: false,
            ..ProbeConfig::default()
        };
        let r = linear_probe(&train, &train.clone(), &cfg).unwrap();
        assert!(r.failed());
        assert_eq!(r.grid, vec![(1e10, None)]);
    }

    /// Majority vote of the `k` nearest training rows in Euclidean distance.
    fn euclidean_knn(tr: &FeatureMatrix, va: &FeatureMatrix, k: usize) -> f64 {
        let classes = tr.num_classes();
        let mut hits = 0;
        for i in 0..va.len() {
            let mut d: Vec<(f64, u32)> = (0..tr.len())
                .map(|j| {
                    let dist = tr.rows.row(j).iter().zip(va.rows.row(i)).map(|(a, b)| (a - b) * (a - b)).sum();
                    (dist, tr.labels[j])
                })
                .collect();
            d.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
            let mut votes = vec![0; classes];
            for x in &d[..k] {
                votes[x.1 as usize] += 1;
            }
            let best = (0..classes).fold(0, |b, c| if votes[c] > votes[b] { c } else { b });
            hits += usize::from(best as u32 == va.labels[i]);
        }
        hits as f64 / va.len() as f64
    }

    #[test]
    fn synth_difficulty_knob_calibrates_raw_knn() {
        let run = |sep: f64| {
            let spec = SynthSpec {
                n_classes: 10,
                n_per_class: 200,
                shape: vec![16],
                class_sep: sep,
                noise_sigma: 1.0,
                seed: 9,
            };
            let ds = synth_clusters::<f64>(&spec).unwrap();
            let (tr, va) = ds.split(1600);
            euclidean_knn(&raw_features(&tr).unwrap(), &raw_features(&va).unwrap(), 20)
        };
        let easy = run(4.0);
        let hard = run(0.5);
        assert!(easy >= 0.95, "ratio 4: {easy}");
        assert!(hard < 0.2, "ratio 0.5: {hard}");
    }

    #[test]
    fn extraction_is_pure_and_leaves_the_encoder_untouched() {
        let spec = SynthSpec {
            n_classes: 4,
            n_per_class: 30,
            shape: vec![8],
            class_sep: 4.0,
            noise_sigma: 1.0,
            seed: 1,
        };
        let ds = synth_clusters::<f64>(&spec).unwrap();
        let cfg = EncoderConfig {
            arch: Arch::Mlp { widths: vec![16] },
            input_shape: vec![8],
            feature_dim: 6,
            use_bn: true,
        };
        let enc = Encoder::<f64>::new(cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let before = enc.clone();
        let a = extract_features(&enc, &ds, Tap::ProjectionOutput).unwrap();
        let b = extract_features(&enc, &ds, Tap::ProjectionOutput).unwrap();
        assert_eq!(a, b);
        for i in 0..a.len() {
            let n: f64 = a.rows.row(i).iter().map(|v| v * v).sum();
            assert!((n - 1.0).abs() < 1e-9);
        }
        let pre = extract_features(&enc, &ds, Tap::PreProjection).unwrap();
        assert_eq!(pre.dim(), 16);
        let (tr, va) = ds.split(80);
        let ftr = extract_features(&enc, &tr, Tap::PreProjection).unwrap();
        let fva = extract_features(&enc, &va, Tap::PreProjection).unwrap();
        knn_monitor(&ftr, &fva, 5, Some(0.07)).unwrap();
        linear_probe(&ftr, &fva, &ProbeConfig { epochs: 3, ..ProbeConfig::default() }).unwrap();
        assert_eq!(enc, before);
    }

    #[test]
    fn untrained_encoder_features_beat_chance_on_separable_data() {
        let spec = SynthSpec {
            n_classes: 10,
            n_per_class: 100,
            shape: vec![16],
            class_sep: 4.0,
            noise_sigma: 1.0,
            seed: 3,
        };
        let ds = synth_clusters::<f64>(&spec).unwrap();
        let cfg = EncoderConfig {
            arch: Arch::Mlp { widths: vec![64] },
            input_shape: vec![16],
            feature_dim: 32,
            use_bn: true,
        };
        let enc = Encoder::<f64>::new(cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let (tr, va) = ds.split(800);
        let acc = knn_monitor(
            &extract_features(&enc, &tr, Tap::PreProjection).unwrap(),
            &extract_features(&enc, &va, Tap::PreProjection).unwrap(),
            20,
            Some(0.07),
        )
        .unwrap();
        assert!(acc > 0.3, "{acc}");
    }
}
