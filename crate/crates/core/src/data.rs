//! Datasets, IDX ingestion, the synthetic cluster corpus, and two-view augmentation.

use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::engine::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Samples with stable ids `0..len()` and optional labels.
///
/// Labels exist for evaluation only. Every call to [`Dataset::labels`] is
/// counted so tests can assert that pretext training never reads them.
#[derive(Debug)]
pub struct Dataset<T> {
    sample_shape: Vec<usize>,
    values: Vec<T>,
    labels: Option<Vec<u32>>,
    label_reads: AtomicUsize,
}

impl<T: Scalar> Clone for Dataset<T> {
    fn clone(&self) -> Self {
        Self {
            sample_shape: self.sample_shape.clone(),
            values: self.values.clone(),
            labels: self.labels.clone(),
            label_reads: AtomicUsize::new(0),
        }
    }
}

impl<T: Scalar> PartialEq for Dataset<T> {
    fn eq(&self, other: &Self) -> bool {
        self.sample_shape == other.sample_shape && self.values == other.values && self.labels == other.labels
    }
}

impl<T: Scalar> Dataset<T> {
    pub fn new(sample_shape: Vec<usize>, values: Vec<T>, labels: Option<Vec<u32>>) -> Result<Self> {
        let per: usize = sample_shape.iter().product();
        if per == 0 || values.len() % per != 0 {
            return Err(Error::Consistency(format!(
                "{} values do not split into samples of shape {sample_shape:?}",
                values.len()
            )));
        }
        let n = values.len() / per;
        if let Some(l) = &labels {
            if l.len() != n {
                return Err(Error::Consistency(format!("{n} samples but {} labels", l.len())));
            }
        }
        Ok(Self {
            sample_shape,
            values,
            labels,
            label_reads: AtomicUsize::new(0),
        })
    }

    /// Same samples viewed with another shape of equal size.
    pub fn with_sample_shape(mut self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.sample_len() {
            return Err(Error::Consistency(format!(
                "cannot view samples of shape {:?} as {shape:?}",
                self.sample_shape
            )));
        }
        self.sample_shape = shape;
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.values.len() / self.sample_len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.sample_shape
    }

    pub fn sample_len(&self) -> usize {
        self.sample_shape.iter().product()
    }

    pub fn sample(&self, id: usize) -> &[T] {
        let w = self.sample_len();
        &self.values[id * w..(id + 1) * w]
    }

    pub fn has_labels(&self) -> bool {
        self.labels.is_some()
    }

    /// Class ids (counted access).
    pub fn labels(&self) -> Option<&[u32]> {
        self.label_reads.fetch_add(1, Ordering::Relaxed);
        self.labels.as_deref()
    }

    pub fn label_reads(&self) -> usize {
        self.label_reads.load(Ordering::Relaxed)
    }

    pub fn num_classes(&self) -> usize {
        self.labels
            .as_ref()
            .map_or(0, |l| l.iter().map(|&c| c as usize + 1).max().unwrap_or(0))
    }

    /// Samples `ids` stacked into an `N × sample_shape` tensor.
    pub fn batch(&self, ids: &[usize]) -> Tensor<T> {
        let mut data = Vec::with_capacity(ids.len() * self.sample_len());
        for &i in ids {
            data.extend_from_slice(self.sample(i));
        }
        let mut shape = vec![ids.len()];
        shape.extend_from_slice(&self.sample_shape);
        Tensor::new(shape, data).expect("batch shape")
    }

    /// Every sample as one tensor.
    pub fn all(&self) -> Tensor<T> {
        let ids: Vec<usize> = (0..self.len()).collect();
        self.batch(&ids)
    }

    /// First `n` samples and the rest.
    pub fn split(&self, n: usize) -> (Self, Self) {
        let w = self.sample_len();
        let cut = n.min(self.len());
        let labels = self.labels.as_ref().map(|l| (l[..cut].to_vec(), l[cut..].to_vec()));
        let (la, lb) = match labels {
            Some((a, b)) => (Some(a), Some(b)),
            None => (None, None),
        };
        (
            Self::new(self.sample_shape.clone(), self.values[..cut * w].to_vec(), la).expect("split"),
            Self::new(self.sample_shape.clone(), self.values[cut * w..].to_vec(), lb).expect("split"),
        )
    }
}

// ---------------------------------------------------------------------------
// IDX

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Io(std::io::Error::new(
                std::io::ErrorKind::UnexpectedEof,
                format!("truncated IDX {} file at byte {}", self.what, self.bytes.len()),
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32_be(&mut self) -> Result<u32> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// Decode an IDX image file: `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<u8>)> {
    let mut r = Reader {
        bytes,
        pos: 0,
        what: "images",
    };
    let magic = r.u32_be()?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format(format!(
            "bad IDX images magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"
        )));
    }
    let n = r.u32_be()? as usize;
    let rows = r.u32_be()? as usize;
    let cols = r.u32_be()? as usize;
    let pixels = r.take(n * rows * cols)?.to_vec();
    Ok((n, rows, cols, pixels))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let mut r = Reader {
        bytes,
        pos: 0,
        what: "labels",
    };
    let magic = r.u32_be()?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format(format!(
            "bad IDX labels magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"
        )));
    }
    let n = r.u32_be()? as usize;
    Ok(r.take(n)?.to_vec())
}

/// Dataset from decoded IDX bytes; pixels are scaled to `[0, 1]`, samples are `1 × rows × cols`.
pub fn dataset_from_idx<T: Scalar>(images: &[u8], labels: Option<&[u8]>) -> Result<Dataset<T>> {
    let (n, rows, cols, pixels) = parse_idx_images(images)?;
    let labels = match labels {
        Some(b) => {
            let l = parse_idx_labels(b)?;
            if l.len() != n {
                return Err(Error::Consistency(format!("{n} images but {} labels", l.len())));
            }
            Some(l.into_iter().map(u32::from).collect())
        }
        None => None,
    };
    let inv = 1.0 / 255.0;
    let values = pixels.iter().map(|&b| T::lit(f64::from(b) * inv)).collect();
    Dataset::new(vec![1, rows, cols], values, labels)
}

pub fn load_idx<T: Scalar>(images_path: &Path, labels_path: Option<&Path>) -> Result<Dataset<T>> {
    let images = fs::read(images_path)?;
    let labels = labels_path.map(fs::read).transpose()?;
    dataset_from_idx(&images, labels.as_deref())
}

fn idx_image_dims(shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [d] => Ok((1, *d)),
        [1, h, w] => Ok((*h, *w)),
        [h, w] => Ok((*h, *w)),
        other => Err(Error::Format(format!("IDX images hold single-channel samples, not {other:?}"))),
    }
}

/// Encode samples as an IDX image file (values rounded to bytes after clamping to `[0, 1]`).
pub fn encode_idx_images<T: Scalar>(ds: &Dataset<T>) -> Result<Vec<u8>> {
    let (rows, cols) = idx_image_dims(ds.sample_shape())?;
    let mut out = Vec::with_capacity(16 + ds.values.len());
    out.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    for d in [ds.len(), rows, cols] {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend(ds.values.iter().map(|&v| {
        let b = (v.as_f64().clamp(0.0, 1.0) * 255.0).round();
        b as u8
    }));
    Ok(out)
}

pub fn encode_idx_labels(labels: &[u32]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    for &l in labels {
        let b = u8::try_from(l).map_err(|_| Error::Format(format!("label {l} does not fit in a byte")))?;
        out.push(b);
    }
    Ok(out)
}

/// Write `images` (and `labels` when present) IDX files.
pub fn write_idx<T: Scalar>(ds: &Dataset<T>, images_path: &Path, labels_path: Option<&Path>) -> Result<()> {
    fs::write(images_path, encode_idx_images(ds)?)?;
    if let (Some(p), Some(l)) = (labels_path, ds.labels.as_deref()) {
        fs::write(p, encode_idx_labels(l)?)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Synthetic corpus

/// Parameters of the synthetic clustered corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub n_classes: usize,
    pub n_per_class: usize,
    /// `[d]` or `[c, h, w]`.
    pub shape: Vec<usize>,
    /// Radius of the sphere the class prototypes lie on.
    pub class_sep: f64,
    /// Per-coordinate standard deviation of the within-class noise.
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_classes: 10,
            n_per_class: 600,
            shape: vec![32],
            class_sep: 4.0,
            noise_sigma: 1.0,
            seed: 0,
        }
    }
}

/// Class prototypes on a sphere of radius `class_sep` (mutually orthogonal
/// when `n_classes <= dim`) plus isotropic gaussian
/// noise, mapped affinely into `[0, 1]`. Image prototypes are box-smoothed
/// random patterns. Samples are interleaved by class (`label = id % n_classes`).
pub fn synth_clusters<T: Scalar>(spec: &SynthSpec) -> Result<Dataset<T>> {
    if spec.n_classes < 2 {
        return Err(Error::Config("synthetic corpus needs at least 2 classes".into()));
    }
    if spec.n_per_class == 0 || spec.shape.is_empty() || spec.shape.contains(&0) {
        return Err(Error::Config("synthetic corpus needs samples and a nonempty shape".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let dim: usize = spec.shape.iter().product();
    // Directions are made mutually orthogonal when there is room, so every
    // pair of prototypes sits exactly class_sep·√2 apart.
    let orthogonal = spec.n_classes <= dim;
    let mut protos: Vec<Vec<f64>> = Vec::with_capacity(spec.n_classes);
    for _ in 0..spec.n_classes {
        let mut p: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        if spec.shape.len() == 3 {
            p = smooth(&p, &spec.shape);
        }
        if orthogonal {
            for u in &protos {
                let uu = u.iter().map(|v| v * v).sum::<f64>().max(1e-300);
                let d = p.iter().zip(u).map(|(a, b)| a * b).sum::<f64>() / uu;
                p.iter_mut().zip(u).for_each(|(a, b)| *a -= d * b);
            }
        }
        let norm = p.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        protos.push(p.iter().map(|v| v / norm * spec.class_sep).collect());
    }
    let span = 2.0 * (spec.class_sep / (dim as f64).sqrt() * 3.0 + 3.0 * spec.noise_sigma).max(1e-12);
    let n = spec.n_classes * spec.n_per_class;
    let mut values = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % spec.n_classes;
        for &pv in &protos[c] {
            let z: f64 = StandardNormal.sample(&mut rng);
            let v = 0.5 + (pv + spec.noise_sigma * z) / span;
            values.push(T::lit(v.clamp(0.0, 1.0)));
        }
        labels.push(c as u32);
    }
    Dataset::new(spec.shape.clone(), values, Some(labels))
}

fn smooth(p: &[f64], shape: &[usize]) -> Vec<f64> {
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let mut out = vec![0.0; p.len()];
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w {
                let mut acc = 0.0;
                let mut cnt = 0.0;
                for di in -1i64..=1 {
                    for dj in -1i64..=1 {
                        let (a, b) = (i as i64 + di, j as i64 + dj);
                        if a >= 0 && b >= 0 && (a as usize) < h && (b as usize) < w {
                            acc += p[(ch * h + a as usize) * w + b as usize];
                            cnt += 1.0;
                        }
                    }
                }
                out[(ch * h + i) * w + j] = acc / cnt;
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Augmentation

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentationConfig {
    /// Zero padding before a random crop back to the original size.
    pub crop_pad: usize,
    pub flip_prob: f64,
    /// Brightness and contrast factors are drawn from `[1 − s, 1 + s]`.
    pub jitter_strength: f64,
    /// Applies to 3-channel images only.
    pub grayscale_prob: f64,
    pub vector_noise_sigma: f64,
    /// Per-coordinate probability of zeroing a vector entry.
    pub vector_dropout: f64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            crop_pad: 4,
            flip_prob: 0.5,
            jitter_strength: 0.4,
            grayscale_prob: 0.2,
            vector_noise_sigma: 0.1,
            vector_dropout: 0.1,
        }
    }
}

impl AugmentationConfig {
    /// The identity chain.
    pub fn none() -> Self {
        Self {
            crop_pad: 0,
            flip_prob: 0.0,
            jitter_strength: 0.0,
            grayscale_prob: 0.0,
            vector_noise_sigma: 0.0,
            vector_dropout: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("flip_prob", self.flip_prob),
            ("grayscale_prob", self.grayscale_prob),
            ("vector_dropout", self.vector_dropout),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must be in [0, 1], got {p}")));
            }
        }
        if !(self.jitter_strength >= 0.0 && self.vector_noise_sigma >= 0.0) {
            return Err(Error::Config("jitter_strength and vector_noise_sigma must be ≥ 0".into()));
        }
        Ok(())
    }
}

/// Pad with zeros by `pad` on each side and crop back at offset `(dy, dx) ∈ [0, 2·pad]²`.
pub fn pad_crop<T: Scalar>(x: &[T], shape: &[usize], pad: usize, dy: usize, dx: usize) -> Vec<T> {
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let mut out = vec![T::zero(); x.len()];
    for ch in 0..c {
        for i in 0..h {
            let si = i as i64 + dy as i64 - pad as i64;
            if si < 0 || si >= h as i64 {
                continue;
            }
            for j in 0..w {
                let sj = j as i64 + dx as i64 - pad as i64;
                if sj < 0 || sj >= w as i64 {
                    continue;
                }
                out[(ch * h + i) * w + j] = x[(ch * h + si as usize) * w + sj as usize];
            }
        }
    }
    out
}

/// One random view of `x`; values end in `[0, 1]`.
pub fn augment<T: Scalar, R: Rng + ?Sized>(x: &[T], shape: &[usize], cfg: &AugmentationConfig, rng: &mut R) -> Vec<T> {
    let mut v: Vec<f64> = x.iter().map(|t| t.as_f64()).collect();
    if shape.len() == 3 {
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        if cfg.crop_pad > 0 {
            let span = 2 * cfg.crop_pad;
            let (dy, dx) = (rng.gen_range(0..=span), rng.gen_range(0..=span));
            v = pad_crop(&v, shape, cfg.crop_pad, dy, dx);
        }
        if cfg.flip_prob > 0.0 && rng.gen_bool(cfg.flip_prob) {
            for ch in 0..c {
                for i in 0..h {
                    v[(ch * h + i) * w..(ch * h + i + 1) * w].reverse();
                }
            }
        }
        if cfg.jitter_strength > 0.0 {
            let s = cfg.jitter_strength;
            let brightness = rng.gen_range(1.0 - s..=1.0 + s);
            let contrast = rng.gen_range(1.0 - s..=1.0 + s);
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            for p in &mut v {
                *p = ((*p - mean) * contrast + mean) * brightness;
            }
        }
        if c == 3 && cfg.grayscale_prob > 0.0 && rng.gen_bool(cfg.grayscale_prob) {
            let hw = h * w;
            for k in 0..hw {
                let y = 0.299 * v[k] + 0.587 * v[hw + k] + 0.114 * v[2 * hw + k];
                v[k] = y;
                v[hw + k] = y;
                v[2 * hw + k] = y;
            }
        }
    } else {
        for p in &mut v {
            if cfg.vector_noise_sigma > 0.0 {
                let z: f64 = StandardNormal.sample(rng);
                *p += cfg.vector_noise_sigma * z;
            }
            if cfg.vector_dropout > 0.0 && rng.gen_bool(cfg.vector_dropout) {
                *p = 0.0;
            }
        }
    }
    v.into_iter().map(|p| T::lit(p.clamp(0.0, 1.0))).collect()
}

/// Two independent draws of the augmentation chain: `(x_q, x_k)`.
pub fn augment_two_views<T: Scalar, R: Rng + ?Sized>(
    x: &[T],
    shape: &[usize],
    cfg: &AugmentationConfig,
    rng: &mut R,
) -> (Vec<T>, Vec<T>) {
    let q = augment(x, shape, cfg, rng);
    let k = augment(x, shape, cfg, rng);
    (q, k)
}

// ---------------------------------------------------------------------------
// Batching

/// Deterministic sub-stream: a fresh generator keyed by `base` and a path of indices.
pub fn stream_rng(base: u64, path: &[u64]) -> ChaCha8Rng {
    let mut h = splitmix(base);
    for &p in path {
        h = splitmix(h ^ splitmix(p.wrapping_add(0x51_7c_c1_b7_27_22_0a_95)));
    }
    ChaCha8Rng::seed_from_u64(h)
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Epoch-seeded shuffle of `0..len` cut into batches of `n`; the partial tail is dropped.
pub fn minibatches(len: usize, n: usize, epoch_seed: u64) -> Result<Vec<Vec<usize>>> {
    if n == 0 || n > len {
        return Err(Error::contract(format!("batch size {n} invalid for {len} samples")));
    }
    let mut ids: Vec<usize> = (0..len).collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed));
    Ok(ids.chunks_exact(n).map(<[usize]>::to_vec).collect())
}

/// Two augmented views of one minibatch.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchViews<T> {
    pub ids: Vec<usize>,
    pub x_q: Tensor<T>,
    pub x_k: Tensor<T>,
}

/// Views for `ids`; sample `s`, view `v` draws from `stream_rng(seed, [epoch, batch, s, v])`.
pub fn make_views<T: Scalar>(
    ds: &Dataset<T>,
    ids: &[usize],
    aug: &AugmentationConfig,
    seed: u64,
    epoch: u64,
    batch: u64,
) -> BatchViews<T> {
    let shape = ds.sample_shape();
    let mut q = Vec::with_capacity(ids.len() * ds.sample_len());
    let mut k = Vec::with_capacity(ids.len() * ds.sample_len());
    for (s, &id) in ids.iter().enumerate() {
        let x = ds.sample(id);
        q.extend(augment(x, shape, aug, &mut stream_rng(seed, &[epoch, batch, s as u64, 0])));
        k.extend(augment(x, shape, aug, &mut stream_rng(seed, &[epoch, batch, s as u64, 1])));
    }
    let mut full = vec![ids.len()];
    full.extend_from_slice(shape);
    BatchViews {
        ids: ids.to_vec(),
        x_q: Tensor::new(full.clone(), q).expect("view shape"),
        x_k: Tensor::new(full, k).expect("view shape"),
    }
}
