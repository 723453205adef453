//! Analytic-versus-finite-difference gradient checks for every differentiable
//! tape op and for the full momentum-contrast loss.

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::contrastive::{infonce_loss, logits_moco};
use crate::data::stream_rng;
use crate::encoder::{forward_with, Arch, Encoder, EncoderConfig};
use crate::engine::{finite_diff_grad, BnMode, BnState, Tape, Tensor, Var};
use crate::error::Result;

/// Step used for the central differences.
pub const FD_EPS: f64 = 1e-5;
/// Suite-wide bound on the relative error.
pub const SUITE_TOLERANCE: f64 = 1e-4;

/// Outcome for one op over all its random instances.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckReport {
    pub op: &'static str,
    pub instances: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

/// `‖a − n‖ / max(‖a‖, ‖n‖)`, with a floor so that two zero gradients agree.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut analytic.iter().zip(numeric).map(|(a, n)| a - n));
    let scale = norm(&mut analytic.iter().copied()).max(norm(&mut numeric.iter().copied()));
    diff / scale.max(1e-8)
}

type Build<'a> = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'a;

/// Compare tape gradients of `Σ w ⊙ build(leaves)` against central differences.
/// `w` is a fixed non-uniform weighting so every output element matters.
pub fn check_instance(leaves: &[Tensor<f64>], build: &Build<'_>) -> Result<f64> {
    let eval = |vals: &[Tensor<f64>], weights: Option<&Tensor<f64>>| -> Result<(Tape<f64>, Vec<Var>, Var, Tensor<f64>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals
            .iter()
            .enumerate()
            .map(|(i, t)| tape.param(format!("leaf{i}"), t.clone()))
            .collect();
        let out = build(&mut tape, &vars)?;
        let w = match weights {
            Some(w) => w.clone(),
            None => Tensor::from_fn(tape.value(out).shape().to_vec(), |i| 0.5 + ((i * 7919) % 13) as f64 / 13.0),
        };
        let wv = tape.constant(w.clone());
        let prod = tape.mul(out, wv)?;
        let loss = tape.sum(prod);
        Ok((tape, vars, loss, w))
    };
    let (tape, vars, loss, w) = eval(leaves, None)?;
    let grads = tape.backward(loss)?;
    let mut analytic = Vec::new();
    for (&v, leaf) in vars.iter().zip(leaves) {
        match grads.get(v) {
            Some(g) => analytic.extend_from_slice(g.data()),
            None => analytic.extend(std::iter::repeat(0.0).take(leaf.len())),
        }
    }
    let flat: Vec<f64> = leaves.iter().flat_map(|t| t.data().iter().copied()).collect();
    let unflatten = |p: &[f64]| -> Vec<Tensor<f64>> {
        let mut off = 0;
        leaves
            .iter()
            .map(|t| {
                let out = Tensor::new(t.shape().to_vec(), p[off..off + t.len()].to_vec()).expect("leaf shape");
                off += t.len();
                out
            })
            .collect()
    };
    let f = |p: &[f64]| {
        let (tape, _, loss, _) = eval(&unflatten(p), Some(&w)).expect("perturbed forward");
        tape.value(loss).data()[0]
    };
    let numeric = finite_diff_grad(f, &flat, FD_EPS);
    Ok(relative_error(&analytic, &numeric))
}

fn away_from_zero(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(0.1..1.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

fn rand_t(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::uniform(shape, 1.0, rng)
}

fn shard_split(n: usize, shards: usize) -> Vec<Range<usize>> {
    let per = n / shards;
    (0..shards).map(|j| j * per..(j + 1) * per).collect()
}

/// One op's generator: draws leaves and returns the build closure.
type Case = fn(&mut ChaCha8Rng) -> (Vec<Tensor<f64>>, Box<Build<'static>>);

fn cases() -> Vec<(&'static str, f64, Case)> {
    vec![
        ("matmul", 1e-6, |r| {
            let (m, p, n) = (r.gen_range(1..5), r.gen_range(1..5), r.gen_range(1..5));
            (vec![rand_t(vec![m, p], r), rand_t(vec![p, n], r)], Box::new(|t, v| t.matmul(v[0], v[1])))
        }),
        ("matmul_nt", 1e-6, |r| {
            let (m, p, n) = (r.gen_range(1..5), r.gen_range(1..5), r.gen_range(1..5));
            (vec![rand_t(vec![m, p], r), rand_t(vec![n, p], r)], Box::new(|t, v| t.matmul_nt(v[0], v[1])))
        }),
        ("batched_dot", 1e-6, |r| {
            let (n, c) = (r.gen_range(1..6), r.gen_range(1..8));
            (vec![rand_t(vec![n, c], r), rand_t(vec![n, c], r)], Box::new(|t, v| t.batched_dot(v[0], v[1])))
        }),
        ("add_bias", 1e-6, |r| {
            let (n, c) = (r.gen_range(1..5), r.gen_range(1..5));
            (vec![rand_t(vec![n, c], r), rand_t(vec![c], r)], Box::new(|t, v| t.add_bias(v[0], v[1])))
        }),
        ("linear", 1e-6, |r| {
            let (n, p, q) = (r.gen_range(1..5), r.gen_range(1..5), r.gen_range(1..5));
            (
                vec![rand_t(vec![n, p], r), rand_t(vec![p, q], r), rand_t(vec![q], r)],
                Box::new(|t, v| t.linear(v[0], v[1], v[2])),
            )
        }),
        ("add", 1e-6, |r| {
            let s = vec![r.gen_range(1..4), r.gen_range(1..4)];
            (vec![rand_t(s.clone(), r), rand_t(s, r)], Box::new(|t, v| t.add(v[0], v[1])))
        }),
        ("mul", 1e-6, |r| {
            let s = vec![r.gen_range(1..4), r.gen_range(1..4)];
            (vec![rand_t(s.clone(), r), rand_t(s, r)], Box::new(|t, v| t.mul(v[0], v[1])))
        }),
        ("scale", 1e-6, |r| {
            let s = r.gen_range(-3.0..3.0);
            (vec![rand_t(vec![3, 2], r)], Box::new(move |t, v| Ok(t.scale(v[0], s))))
        }),
        ("relu", 1e-6, |r| {
            let s = vec![r.gen_range(1..5), r.gen_range(1..5)];
            (vec![away_from_zero(s, r)], Box::new(|t, v| Ok(t.relu(v[0]))))
        }),
        ("sum", 1e-6, |r| {
            (vec![rand_t(vec![r.gen_range(1..5), 3], r)], Box::new(|t, v| Ok(t.sum(v[0]))))
        }),
        ("reshape", 1e-6, |r| {
            let (a, b) = (r.gen_range(1..4), r.gen_range(1..4));
            (vec![rand_t(vec![a, b], r)], Box::new(move |t, v| t.reshape(v[0], vec![b, a])))
        }),
        ("gather_rows", 1e-6, |r| {
            let n = r.gen_range(1..5);
            let idx: Vec<usize> = (0..r.gen_range(1..8)).map(|_| r.gen_range(0..n)).collect();
            (vec![rand_t(vec![n, 3], r)], Box::new(move |t, v| t.gather_rows(v[0], &idx)))
        }),
        ("concat_cols", 1e-6, |r| {
            let n = r.gen_range(1..4);
            (
                vec![rand_t(vec![n, 1], r), rand_t(vec![n, r.gen_range(1..4)], r), rand_t(vec![n, 2], r)],
                Box::new(|t, v| t.concat_cols(&[v[0], v[1], v[2]])),
            )
        }),
        ("conv2d", 1e-5, |r| {
            let (n, ci, co) = (r.gen_range(1..3), r.gen_range(1..3), r.gen_range(1..3));
            let (h, w) = (r.gen_range(3..6), r.gen_range(3..6));
            let (k, stride, pad) = (r.gen_range(1..4), r.gen_range(1..3), r.gen_range(0..2));
            (
                vec![rand_t(vec![n, ci, h, w], r), rand_t(vec![co, ci, k, k], r)],
                Box::new(move |t, v| t.conv2d(v[0], v[1], stride, pad)),
            )
        }),
        ("global_avg_pool", 1e-6, |r| {
            let s = vec![r.gen_range(1..3), r.gen_range(1..3), r.gen_range(1..4), r.gen_range(1..4)];
            (vec![rand_t(s, r)], Box::new(|t, v| t.global_avg_pool(v[0])))
        }),
        ("batch_norm", 1e-4, |r| {
            let shards = r.gen_range(1..3);
            let n = shards * r.gen_range(2..4);
            let c = r.gen_range(1..4);
            let spatial = r.gen_bool(0.5);
            let shape = if spatial { vec![n, c, 2, 2] } else { vec![n, c] };
            let state = BnState::new(c);
            (
                vec![rand_t(shape, r), rand_t(vec![c], r), rand_t(vec![c], r)],
                Box::new(move |t, v| {
                    let slices = shard_split(n, shards);
                    t.batch_norm(v[0], v[1], v[2], &state, BnMode::Train(&slices))
                }),
            )
        }),
        ("l2_normalize", 1e-5, |r| {
            (vec![rand_t(vec![r.gen_range(1..5), r.gen_range(2..6)], r)], Box::new(|t, v| t.l2_normalize(v[0])))
        }),
        ("softmax_cross_entropy", 1e-6, |r| {
            let (n, m) = (r.gen_range(1..7), r.gen_range(2..10));
            let targets: Vec<usize> = (0..n).map(|_| r.gen_range(0..m)).collect();
            let logits = Tensor::uniform(vec![n, m], 3.0, r);
            (vec![logits], Box::new(move |t, v| t.softmax_cross_entropy(v[0], &targets)))
        }),
        ("moco_loss_mlp", SUITE_TOLERANCE, |r| moco_case(r, false)),
        ("moco_loss_conv", SUITE_TOLERANCE, |r| moco_case(r, true)),
    ]
}

/// Query-encoder parameters as leaves; detached keys and a random queue.
fn moco_case(r: &mut ChaCha8Rng, conv: bool) -> (Vec<Tensor<f64>>, Box<Build<'static>>) {
    let (n, c, k) = (8, 4, 8);
    let config = if conv {
        EncoderConfig {
            arch: Arch::SmallConv { channels: vec![3] },
            input_shape: vec![2, 5, 5],
            feature_dim: c,
            use_bn: true,
        }
    } else {
        EncoderConfig {
            arch: Arch::Mlp { widths: vec![6, 5] },
            input_shape: vec![5],
            feature_dim: c,
            use_bn: true,
        }
    };
    let enc: Encoder<f64> = Encoder::new(config.clone(), r).expect("encoder");
    let mut xs = vec![n];
    xs.extend_from_slice(&config.input_shape);
    let x = Tensor::from_fn(xs, |_| r.gen::<f64>());
    let keys = unit_rows(Tensor::randn(vec![n, c], r));
    let queue = unit_rows(Tensor::randn(vec![k, c], r)).transpose();
    let leaves: Vec<Tensor<f64>> = enc.params.iter().map(|p| p.value.clone()).collect();
    let bn = enc.bn.clone();
    let build = move |t: &mut Tape<f64>, v: &[Var]| {
        let slices = shard_split(n, 2);
        let xv = t.constant(x.clone());
        let out = forward_with(&config, v, &bn, t, xv, BnMode::Train(&slices))?;
        let kv = t.constant(keys.clone());
        let logits = logits_moco(t, out.features, kv, &queue, 0.07)?;
        infonce_loss(t, logits)
    };
    (leaves, Box::new(build))
}

fn unit_rows(mut t: Tensor<f64>) -> Tensor<f64> {
    for i in 0..t.rows() {
        let n = t.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
        t.row_mut(i).iter_mut().for_each(|v| *v /= n);
    }
    t
}

/// Names of the checked ops, in suite order.
pub fn op_names() -> Vec<&'static str> {
    cases().into_iter().map(|(n, _, _)| n).collect()
}

/// Run `instances` random instances of every op; instance `j` of op `i` draws
/// from the stream `(seed, [i, j])`.
pub fn run_suite(seed: u64, instances: usize) -> Result<Vec<CheckReport>> {
    let mut reports = Vec::new();
    for (i, (op, tolerance, case)) in cases().into_iter().enumerate() {
        let mut worst: f64 = 0.0;
        for j in 0..instances {
            let mut rng = ChaCha8Rng::from_rng(stream_rng(seed, &[i as u64, j as u64])).expect("chacha seeding");
            let (leaves, build) = case(&mut rng);
            let err = check_instance(&leaves, build.as_ref())?;
            worst = worst.max(if err.is_nan() { f64::INFINITY } else { err });
        }
        reports.push(CheckReport {
            op,
            instances,
            max_rel_err: worst,
            tolerance: tolerance.min(SUITE_TOLERANCE),
        });
    }
    Ok(reports)
}
