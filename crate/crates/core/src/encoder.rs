//! Query and key encoders: small BN-bearing networks with an L2-normalized
//! projection head, plus the momentum update that lets the key encoder trail
//! the query encoder.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::engine::{BnMode, BnState, Param, ParamSet, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::scalar::{ordered_sum, Scalar};

/// Default output dimension of the projection head.
pub const DEFAULT_FEATURE_DIM: usize = 128;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Arch {
    /// Fully connected blocks (`linear → BN → relu`) of the given widths.
    Mlp { widths: Vec<usize> },
    /// `conv3×3/stride 2 → BN → relu` blocks of the given channel counts, then global average pooling.
    SmallConv { channels: Vec<usize> },
}

impl Default for Arch {
    fn default() -> Self {
        Arch::Mlp {
            widths: vec![256, 128],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub arch: Arch,
    /// Per-sample shape: `[d]` for vectors, `[c, h, w]` for images.
    pub input_shape: Vec<usize>,
    pub feature_dim: usize,
    pub use_bn: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            arch: Arch::default(),
            input_shape: vec![1, 28, 28],
            feature_dim: DEFAULT_FEATURE_DIM,
            use_bn: true,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.feature_dim < 2 {
            return Err(Error::Config(format!("feature_dim must be ≥ 2, got {}", self.feature_dim)));
        }
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return Err(Error::Config(format!("bad input_shape {:?}", self.input_shape)));
        }
        match &self.arch {
            Arch::Mlp { widths } if widths.is_empty() || widths.contains(&0) => {
                Err(Error::Config("mlp widths must be nonempty and positive".into()))
            }
            Arch::SmallConv { channels } if channels.is_empty() || channels.contains(&0) => {
                Err(Error::Config("conv channels must be nonempty and positive".into()))
            }
            Arch::SmallConv { .. } if self.input_shape.len() != 3 => Err(Error::Config(format!(
                "small_conv needs a [c, h, w] input shape, got {:?}",
                self.input_shape
            ))),
            _ => Ok(()),
        }
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    /// Width of the pre-projection (pooled) features.
    pub fn pre_projection_dim(&self) -> usize {
        match &self.arch {
            Arch::Mlp { widths } => *widths.last().expect("validated"),
            Arch::SmallConv { channels } => *channels.last().expect("validated"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Query,
    /// Updated only by [`momentum_update`]; never a gradient recipient.
    Key,
}

/// What happens to BN running statistics during [`momentum_update`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BnBufferPolicy {
    /// Running mean/var are copied from the query encoder.
    #[default]
    Copy,
    /// Running mean/var follow the same moving average as the parameters.
    Momentum,
}

/// Tape handles produced by one encoder pass.
#[derive(Clone, Debug)]
pub struct EncoderOutput {
    /// `N × feature_dim`, unit rows.
    pub features: Var,
    /// Pooled features before the projection head.
    pub pre_projection: Var,
    /// One node per BN layer, in layer order.
    pub bn_nodes: Vec<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Encoder<T> {
    pub config: EncoderConfig,
    pub params: ParamSet<T>,
    pub bn: Vec<BnState<T>>,
    role: Role,
}

impl<T: Scalar> Encoder<T> {
    /// Fresh query encoder: weights and biases ~ U(−1/√fan_in, 1/√fan_in), BN γ=1, β=0.
    pub fn new<R: Rng + ?Sized>(config: EncoderConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new();
        let mut bn = Vec::new();
        let add_bn = |params: &mut ParamSet<T>, bn: &mut Vec<BnState<T>>, name: &str, c: usize| {
            params.push(Param::new(format!("{name}.bn.gamma"), Tensor::full(vec![c], T::one())));
            params.push(Param::new(format!("{name}.bn.beta"), Tensor::zeros(vec![c])));
            bn.push(BnState::new(c));
        };
        let last = match &config.arch {
            Arch::Mlp { widths } => {
                let mut fan_in = config.input_len();
                for (i, &w) in widths.iter().enumerate() {
                    let name = format!("mlp{i}");
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    params.push(Param::new(
                        format!("{name}.weight"),
                        Tensor::uniform(vec![fan_in, w], bound, rng),
                    ));
                    if config.use_bn {
                        add_bn(&mut params, &mut bn, &name, w);
                    } else {
                        params.push(Param::new(format!("{name}.bias"), Tensor::uniform(vec![w], bound, rng)));
                    }
                    fan_in = w;
                }
                fan_in
            }
            Arch::SmallConv { channels } => {
                let mut cin = config.input_shape[0];
                for (i, &co) in channels.iter().enumerate() {
                    let name = format!("conv{i}");
                    let bound = 1.0 / ((cin * 9) as f64).sqrt();
                    params.push(Param::new(
                        format!("{name}.weight"),
                        Tensor::uniform(vec![co, cin, 3, 3], bound, rng),
                    ));
                    if config.use_bn {
                        add_bn(&mut params, &mut bn, &name, co);
                    }
                    cin = co;
                }
                cin
            }
        };
        let bound = 1.0 / (last as f64).sqrt();
        params.push(Param::new(
            "head.weight",
            Tensor::uniform(vec![last, config.feature_dim], bound, rng),
        ));
        params.push(Param::new(
            "head.bias",
            Tensor::uniform(vec![config.feature_dim], bound, rng),
        ));
        Ok(Self {
            config,
            params,
            bn,
            role: Role::Query,
        })
    }

    pub fn role(&self) -> Role {
        self.role
    }

    /// Value copy of `self` acting as a key encoder (grad-exempt).
    pub fn to_key(&self) -> Self {
        let mut k = self.clone();
        k.role = Role::Key;
        k.params.set_requires_grad(false);
        k
    }

    /// Register parameters on `tape` (labels `prefix/name`), run the network on
    /// `x` and, in train mode, fold the batch statistics into the running BN stats.
    ///
    /// Returns the output handles and the parameter handles for
    /// [`ParamSet::accumulate`].
    pub fn forward(
        &mut self,
        tape: &mut Tape<T>,
        x: Var,
        mode: BnMode<'_>,
        prefix: &str,
    ) -> Result<(EncoderOutput, Vec<Var>)> {
        let handles = self.params.register(tape, prefix);
        let out = forward_with(&self.config, &handles, &self.bn, tape, x, mode)?;
        if matches!(mode, BnMode::Train(_)) {
            for (state, &node) in self.bn.iter_mut().zip(&out.bn_nodes) {
                if let Some(stats) = tape.bn_stats(node) {
                    state.update_running(stats);
                }
            }
        }
        Ok((out, handles))
    }

    /// Eval-mode pass with no gradient bookkeeping: `(features, pre_projection)`.
    pub fn encode(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut tape = Tape::new();
        let handles: Vec<Var> = self.params.iter().map(|p| tape.constant(p.value.clone())).collect();
        let xv = tape.constant(x.clone());
        let out = forward_with(&self.config, &handles, &self.bn, &mut tape, xv, BnMode::Eval)?;
        Ok((
            tape.value(out.features).clone(),
            tape.value(out.pre_projection).clone(),
        ))
    }
}

/// Network body over externally supplied parameter handles (in [`ParamSet`] order).
///
/// Does not touch running statistics; see [`Encoder::forward`].
pub fn forward_with<T: Scalar>(
    config: &EncoderConfig,
    handles: &[Var],
    bn: &[BnState<T>],
    tape: &mut Tape<T>,
    x: Var,
    mode: BnMode<'_>,
) -> Result<EncoderOutput> {
    let in_shape = tape.value(x).shape();
    if in_shape.len() < 2 || in_shape[1..] != config.input_shape[..] {
        return Err(Error::dim("encoder_forward", in_shape, &config.input_shape));
    }
    let mut next = handles.iter().copied();
    let mut take = || next.next().ok_or_else(|| Error::contract("too few parameter handles"));
    let mut bn_nodes = Vec::new();
    let mut bn_layer = 0;
    let mut h = x;
    let pooled = match &config.arch {
        Arch::Mlp { widths } => {
            h = tape.flatten(h)?;
            for _ in widths {
                let w = take()?;
                h = tape.matmul(h, w)?;
                if config.use_bn {
                    let (g, b) = (take()?, take()?);
                    h = tape.batch_norm(h, g, b, &bn[bn_layer], mode)?;
                    bn_layer += 1;
                    bn_nodes.push(h);
                } else {
                    let b = take()?;
                    h = tape.add_bias(h, b)?;
                }
                h = tape.relu(h);
            }
            h
        }
        Arch::SmallConv { channels } => {
            for _ in channels {
                let w = take()?;
                h = tape.conv2d(h, w, 2, 1)?;
                if config.use_bn {
                    let (g, b) = (take()?, take()?);
                    h = tape.batch_norm(h, g, b, &bn[bn_layer], mode)?;
                    bn_layer += 1;
                    bn_nodes.push(h);
                }
                h = tape.relu(h);
            }
            tape.global_avg_pool(h)?
        }
    };
    let (w, b) = (take()?, take()?);
    let z = tape.linear(pooled, w, b)?;
    let features = tape.l2_normalize(z)?;
    Ok(EncoderOutput {
        features,
        pre_projection: pooled,
        bn_nodes,
    })
}

/// Query encoder and an exact value copy acting as the key encoder.
pub fn build_pair<T: Scalar, R: Rng + ?Sized>(cfg: EncoderConfig, rng: &mut R) -> Result<(Encoder<T>, Encoder<T>)> {
    let f_q = Encoder::new(cfg, rng)?;
    let f_k = f_q.to_key();
    Ok((f_q, f_k))
}

fn check_matched<T: Scalar>(a: &Encoder<T>, b: &Encoder<T>) -> Result<()> {
    let same = a.params.len() == b.params.len()
        && a.params
            .iter()
            .zip(b.params.iter())
            .all(|(x, y)| x.name == y.name && x.value.shape() == y.value.shape())
        && a.bn.len() == b.bn.len();
    if same {
        Ok(())
    } else {
        Err(Error::contract("encoders have different parameter lists"))
    }
}

/// `θ_k ← m·θ_k + (1 − m)·θ_q`, elementwise over all parameters.
pub fn momentum_update<T: Scalar>(
    f_k: &mut Encoder<T>,
    f_q: &Encoder<T>,
    m: T,
    buffers: BnBufferPolicy,
) -> Result<()> {
    if !(m >= T::zero() && m < T::one()) {
        return Err(Error::contract(format!("momentum must be in [0, 1), got {m}")));
    }
    check_matched(f_k, f_q)?;
    let blend = |k: &mut Tensor<T>, q: &Tensor<T>| {
        for (kv, &qv) in k.data_mut().iter_mut().zip(q.data()) {
            *kv = m * *kv + (T::one() - m) * qv;
        }
    };
    for (pk, pq) in f_k.params.iter_mut().zip(f_q.params.iter()) {
        blend(&mut pk.value, &pq.value);
    }
    for (bk, bq) in f_k.bn.iter_mut().zip(&f_q.bn) {
        match buffers {
            BnBufferPolicy::Copy => {
                bk.running_mean = bq.running_mean.clone();
                bk.running_var = bq.running_var.clone();
            }
            BnBufferPolicy::Momentum => {
                blend(&mut bk.running_mean, &bq.running_mean);
                blend(&mut bk.running_var, &bq.running_var);
            }
        }
    }
    Ok(())
}

/// Euclidean distance between the concatenated parameters (BN running buffers excluded).
pub fn param_distance<T: Scalar>(a: &Encoder<T>, b: &Encoder<T>) -> Result<T> {
    check_matched(a, b)?;
    let sq = ordered_sum(a.params.iter().zip(b.params.iter()).flat_map(|(x, y)| {
        x.value
            .data()
            .iter()
            .zip(y.value.data())
            .map(|(&u, &v)| (u - v) * (u - v))
    }));
    Ok(sq.sqrt())
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn mlp_cfg() -> EncoderConfig {
        EncoderConfig {
            arch: Arch::Mlp { widths: vec![16, 8] },
            input_shape: vec![6],
            feature_dim: 5,
            use_bn: true,
        }
    }

    fn batch(n: usize, d: usize, seed: u64) -> Tensor<f64> {
        Tensor::randn(vec![n, d], &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn pair_starts_identical_and_key_is_frozen() {
        let (f_q, mut f_k) = build_pair::<f64, _>(mlp_cfg(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(param_distance(&f_q, &f_k).unwrap(), 0.0);
        assert_eq!(f_q.bn, f_k.bn);
        assert_eq!(f_k.role(), Role::Key);
        let g = f_k.params.get(0).value.clone();
        assert!(f_k.params.get_mut(0).accumulate_grad(&g).is_err());
    }

    #[test]
    fn same_seed_builds_bitwise_identical_params() {
        let a = Encoder::<f64>::new(mlp_cfg(), &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = Encoder::<f64>::new(mlp_cfg(), &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let bits = |e: &Encoder<f64>| e.params.flatten().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn forward_rows_are_unit_norm_and_default_dim_is_128() {
        assert_eq!(EncoderConfig::default().feature_dim, 128);
        let mut enc = Encoder::<f64>::new(mlp_cfg(), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(batch(8, 6, 3));
        let slices = [0..4, 4..8];
        let (out, _) = enc.forward(&mut tape, x, BnMode::Train(&slices), "q").unwrap();
        let f = tape.value(out.features);
        for i in 0..8 {
            let n: f64 = f.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn eval_mode_duplicates_give_duplicate_rows() {
        let enc = Encoder::<f64>::new(mlp_cfg(), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let x = batch(1, 6, 4);
        let dup = Tensor::new(vec![2, 6], [x.data(), x.data()].concat()).unwrap();
        let (f, _) = enc.encode(&dup).unwrap();
        assert_eq!(f.row(0), f.row(1));
        let (f2, _) = enc.encode(&dup).unwrap();
        assert_eq!(f, f2);
    }

    #[test]
    fn conv_encoder_runs_on_images() {
        let cfg = EncoderConfig {
            arch: Arch::SmallConv { channels: vec![4, 6] },
            input_shape: vec![1, 8, 8],
            feature_dim: 3,
            use_bn: true,
        };
        let mut enc = Encoder::<f64>::new(cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::randn(vec![4, 1, 8, 8], &mut ChaCha8Rng::seed_from_u64(6)));
        let (out, _) = enc.forward(&mut tape, x, BnMode::Train(&[0..2, 2..4]), "q").unwrap();
        assert_eq!(tape.value(out.features).shape(), &[4, 3]);
        assert_eq!(tape.value(out.pre_projection).shape(), &[4, 6]);
    }

    #[test]
    fn momentum_update_arithmetic() {
        let (f_q, mut f_k) = build_pair::<f64, _>(mlp_cfg(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let mut zeros = f_q.clone();
        for p in zeros.params.iter_mut() {
            p.value.data_mut().fill(0.0);
        }
        for p in f_k.params.iter_mut() {
            p.value.data_mut().fill(1.0);
        }
        momentum_update(&mut f_k, &zeros, 0.999, BnBufferPolicy::Copy).unwrap();
        assert!(f_k.params.flatten().iter().all(|&v| (v - 0.999).abs() < 1e-15));

        momentum_update(&mut f_k, &f_q, 0.0, BnBufferPolicy::Copy).unwrap();
        assert_eq!(f_k.params.flatten(), f_q.params.flatten());
        assert!(f_k.params.iter().all(|p| !p.requires_grad));
    }

    #[test]
    fn momentum_outside_unit_interval_is_rejected() {
        let (f_q, mut f_k) = build_pair::<f64, _>(mlp_cfg(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        for m in [1.0, -0.1, 1.5, f64::NAN] {
            assert!(momentum_update(&mut f_k, &f_q, m, BnBufferPolicy::Copy).is_err());
        }
    }

    #[test]
    fn frozen_query_gives_geometric_convergence() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f_q = Encoder::<f64>::new(mlp_cfg(), &mut rng).unwrap();
        let mut f_k = Encoder::<f64>::new(mlp_cfg(), &mut rng).unwrap().to_key();
        let m = 0.9;
        let d0 = param_distance(&f_q, &f_k).unwrap();
        for step in 1..=20 {
            momentum_update(&mut f_k, &f_q, m, BnBufferPolicy::Copy).unwrap();
            let d = param_distance(&f_q, &f_k).unwrap();
            let expected = d0 * m.powi(step);
            assert!((d - expected).abs() < 1e-12 * d0.max(1.0), "step {step}: {d} vs {expected}");
        }
    }

    #[test]
    fn momentum_update_is_affine_elementwise() {
        // u(k, q) = m·k + (1 − m)·q, so u(1, 0) + u(0, 1) == u(1, 1)
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let base = Encoder::<f64>::new(mlp_cfg(), &mut rng).unwrap();
        let fill = |v: f64| {
            let mut e = base.clone();
            for p in e.params.iter_mut() {
                p.value.data_mut().fill(v);
            }
            e
        };
        let m = 0.37;
        let run = |k: f64, q: f64| {
            let mut fk = fill(k).to_key();
            momentum_update(&mut fk, &fill(q), m, BnBufferPolicy::Copy).unwrap();
            fk.params.flatten()
        };
        let (a, b, c) = (run(1.0, 0.0), run(0.0, 1.0), run(1.0, 1.0));
        for i in 0..a.len() {
            assert!((a[i] + b[i] - c[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn bn_buffer_policies() {
        let (mut f_q, mut f_k) = build_pair::<f64, _>(mlp_cfg(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        f_q.bn[0].running_mean.data_mut().fill(2.0);
        let mut f_k2 = f_k.clone();
        momentum_update(&mut f_k, &f_q, 0.5, BnBufferPolicy::Copy).unwrap();
        assert_eq!(f_k.bn[0].running_mean.data()[0], 2.0);
        momentum_update(&mut f_k2, &f_q, 0.5, BnBufferPolicy::Momentum).unwrap();
        assert_eq!(f_k2.bn[0].running_mean.data()[0], 1.0);
    }

    #[test]
    fn distance_is_symmetric_and_checks_lists() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = Encoder::<f64>::new(mlp_cfg(), &mut rng).unwrap();
        let b = Encoder::<f64>::new(mlp_cfg(), &mut rng).unwrap();
        assert_eq!(param_distance(&a, &b).unwrap(), param_distance(&b, &a).unwrap());
        let mut other = mlp_cfg();
        other.arch = Arch::Mlp { widths: vec![16] };
        let c = Encoder::<f64>::new(other, &mut rng).unwrap();
        assert!(param_distance(&a, &c).is_err());
    }
}
