use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn close(a: &Tensor<f64>, b: &[f64], tol: f64) -> bool {
    a.data().len() == b.len() && a.data().iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

#[test]
fn matmul_examples() {
    let mut t = Tape::<f64>::new();
    let i2 = t.constant(Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]));
    let m = t.constant(Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]));
    let out = t.matmul(i2, m).unwrap();
    assert_eq!(t.value(out).data(), &[1.0, 2.0, 3.0, 4.0]);

    let a = t.constant(Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 0.0]]));
    let b = t.constant(Tensor::from_rows(&[&[0.0], &[5.0]]));
    let out = t.matmul(a, b).unwrap();
    assert_eq!(t.value(out).data(), &[0.0, 0.0]);

    match t.matmul(m, b).and_then(|_| t.matmul(b, m)) {
        Err(Error::Dimension { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 1]);
            assert_eq!(rhs, vec![2, 2]);
        }
        other => panic!("expected a dimension error, got {other:?}"),
    }
}

#[test]
fn batched_dot_examples() {
    let mut t = Tape::<f64>::new();
    let q = t.constant(Tensor::from_rows(&[&[0.6, 0.8], &[1.0, 0.0]]));
    let k = t.constant(Tensor::from_rows(&[&[0.8, 0.6], &[1.0, 0.0]]));
    let out = t.batched_dot(q, k).unwrap();
    assert!(close(t.value(out), &[0.96, 1.0], 1e-15));
    assert_eq!(t.value(out).shape(), &[2, 1]);

    // diagonal of q·kᵀ
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (qv, kv) = (Tensor::randn(vec![5, 7], &mut rng), Tensor::randn(vec![5, 7], &mut rng));
    let q = t.constant(qv);
    let k = t.constant(kv);
    let d = t.batched_dot(q, k).unwrap();
    let full = t.matmul_nt(q, k).unwrap();
    for i in 0..5 {
        assert!((t.value(d).data()[i] - t.value(full).at(i, i)).abs() < 1e-12);
    }
    let bad = t.constant(Tensor::zeros(vec![5, 6]));
    assert!(matches!(t.batched_dot(q, bad), Err(Error::Dimension { .. })));
}

#[test]
fn conv2d_examples() {
    let mut t = Tape::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let xv = Tensor::randn(vec![2, 1, 4, 5], &mut rng);
    let x = t.constant(xv.clone());
    let w = t.constant(Tensor::full(vec![1, 1, 1, 1], 1.0));
    let out = t.conv2d(x, w, 1, 0).unwrap();
    assert_eq!(t.value(out), &xv);

    let ones = t.constant(Tensor::full(vec![1, 1, 3, 3], 1.0));
    let k = t.constant(Tensor::full(vec![1, 1, 3, 3], 1.0));
    let out = t.conv2d(ones, k, 1, 0).unwrap();
    assert_eq!(t.value(out).shape(), &[1, 1, 1, 1]);
    assert_eq!(t.value(out).data(), &[9.0]);

    // floor((H + 2p − k)/s) + 1
    let x = t.constant(Tensor::zeros(vec![1, 2, 7, 6]));
    let w = t.constant(Tensor::zeros(vec![3, 2, 3, 3]));
    let out = t.conv2d(x, w, 2, 1).unwrap();
    assert_eq!(t.value(out).shape(), &[1, 3, 4, 3]);

    let big = t.constant(Tensor::zeros(vec![1, 2, 8, 3]));
    assert!(matches!(t.conv2d(x, big, 1, 0), Err(Error::Dimension { .. })));
    let wide = t.constant(Tensor::zeros(vec![1, 2, 10, 3]));
    assert!(matches!(t.conv2d(x, wide, 1, 1), Err(Error::Dimension { .. })));
}

#[test]
fn elementwise_and_pooling_examples() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap());
    let r = t.relu(x);
    assert_eq!(t.value(r).data(), &[0.0, 0.0, 2.0]);

    let m = t.constant(Tensor::full(vec![2, 3, 4, 4], 1.75));
    let p = t.global_avg_pool(m).unwrap();
    assert_eq!(t.value(p).shape(), &[2, 3]);
    assert!(t.value(p).data().iter().all(|&v| v == 1.75));

    let xs = t.param("x", Tensor::from_rows(&[&[1.0, 2.0]]));
    let w = t.param("w", Tensor::from_rows(&[&[1.0, 0.0, 2.0], &[0.0, 1.0, -1.0]]));
    let b = t.param("b", Tensor::new(vec![3], vec![0.5, 0.5, 0.5]).unwrap());
    let y = t.linear(xs, w, b).unwrap();
    assert_eq!(t.value(y).data(), &[1.5, 2.5, 0.5]);
    let bad = t.param("bad", Tensor::zeros(vec![2]));
    assert!(t.linear(xs, w, bad).is_err());
}

#[test]
fn batch_norm_examples() {
    let mut t = Tape::<f64>::new();
    let st = BnState::new(2);
    let gamma = t.param("g", Tensor::new(vec![2], vec![2.0, 3.0]).unwrap());
    let beta = t.param("b", Tensor::new(vec![2], vec![0.25, -1.0]).unwrap());
    let x = t.constant(Tensor::full(vec![4, 2], 7.0));
    let all = [0..4];
    let y = t.batch_norm(x, gamma, beta, &st, BnMode::Train(&all)).unwrap();
    assert!(close(t.value(y), &[0.25, -1.0, 0.25, -1.0, 0.25, -1.0, 0.25, -1.0], 1e-12));

    // two shards with different means: each shard is zero-mean on its own
    let g1 = t.param("g1", Tensor::full(vec![1], 1.0));
    let b0 = t.param("b0", Tensor::zeros(vec![1]));
    let st1 = BnState::new(1);
    let x = t.constant(Tensor::new(vec![4, 1], vec![0.0, 2.0, 100.0, 104.0]).unwrap());
    let halves = [0..2, 2..4];
    let y = t.batch_norm(x, g1, b0, &st1, BnMode::Train(&halves)).unwrap();
    let v = t.value(y).data();
    assert!((v[0] + v[1]).abs() < 1e-12 && (v[2] + v[3]).abs() < 1e-12);
    assert!(v[0] < 0.0 && v[2] < 0.0);

    let ones = [0..1, 1..4];
    assert!(matches!(
        t.batch_norm(x, g1, b0, &st1, BnMode::Train(&ones)),
        Err(Error::DegenerateShard { shard: 0, size: 1 })
    ));
    let mut corrupt = BnState::new(1);
    corrupt.running_var.data_mut()[0] = -0.5;
    assert!(matches!(
        t.batch_norm(x, g1, b0, &corrupt, BnMode::Eval),
        Err(Error::Corruption(_))
    ));
}

#[test]
fn batch_norm_running_stats_and_eval_mode() {
    let mut t = Tape::<f64>::new();
    let mut st = BnState::<f64>::new(1);
    let g = t.param("g", Tensor::full(vec![1], 1.0));
    let b = t.param("b", Tensor::zeros(vec![1]));
    let x = t.constant(Tensor::new(vec![4, 1], vec![1.0, 3.0, 10.0, 14.0]).unwrap());
    let halves = [0..2, 2..4];
    let y = t.batch_norm(x, g, b, &st, BnMode::Train(&halves)).unwrap();
    st.update_running(t.bn_stats(y).unwrap());
    // slice means 2 and 12, unbiased slice variances 2 and 8
    assert!((st.running_mean.data()[0] - 0.1 * 7.0).abs() < 1e-12);
    assert!((st.running_var.data()[0] - (0.9 + 0.1 * 5.0)).abs() < 1e-12);

    let e = t.batch_norm(x, g, b, &st, BnMode::Eval).unwrap();
    let (m, v) = (st.running_mean.data()[0], st.running_var.data()[0]);
    let want: Vec<f64> = [1.0, 3.0, 10.0, 14.0].iter().map(|x| (x - m) / (v + 1e-5).sqrt()).collect();
    assert!(close(t.value(e), &want, 1e-12));
    assert!(t.bn_stats(e).is_none());
}

#[test]
fn l2_normalize_examples() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(Tensor::from_rows(&[&[3.0, 4.0], &[0.6, 0.8]]));
    let y = t.l2_normalize(x).unwrap();
    assert!(close(t.value(y), &[0.6, 0.8, 0.6, 0.8], 1e-15));
    let z = t.constant(Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1e-13]]));
    assert!(matches!(t.l2_normalize(z), Err(Error::DegenerateFeature { row: 1, .. })));
    let w = t.constant(Tensor::from_rows(&[&[1.0, f64::NAN]]));
    assert!(matches!(t.l2_normalize(w), Err(Error::Divergence(_))));
}

#[test]
fn softmax_cross_entropy_examples() {
    let mut t = Tape::<f64>::new();
    let l = t.constant(Tensor::<f64>::zeros(vec![3, 4]));
    let loss = t.softmax_cross_entropy(l, &[0, 1, 3]).unwrap();
    assert!((t.value(loss).data()[0] - 4f64.ln()).abs() < 1e-12);

    let big = t.constant(Tensor::from_rows(&[&[1e6, 0.0, 0.0], &[0.0, 1e6, -3.0]]));
    let loss = t.softmax_cross_entropy(big, &[0, 1]).unwrap();
    let v = t.value(loss).data()[0];
    assert!(v.is_finite() && (0.0..1e-9).contains(&v));

    assert!(matches!(t.softmax_cross_entropy(l, &[0, 4, 1]), Err(Error::Index { target: 4, classes: 4 })));

    // backward = (softmax − onehot)/N
    let lv: Tensor<f64> = Tensor::from_rows(&[&[1.0, 2.0, 0.5], &[-1.0, 0.0, 1.0]]);
    let mut t = Tape::<f64>::new();
    let l = t.param("l", lv.clone());
    let loss = t.softmax_cross_entropy(l, &[2, 0]).unwrap();
    let g = t.backward(loss).unwrap();
    for (i, target) in [2usize, 0].into_iter().enumerate() {
        let row = lv.row(i);
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        for j in 0..3 {
            let want = (row[j].exp() / z - if j == target { 1.0 } else { 0.0 }) / 2.0;
            assert!((g.get(l).unwrap().at(i, j) - want).abs() < 1e-14);
        }
    }
}

#[test]
fn backward_basics() {
    let mut t = Tape::<f64>::new();
    let x = t.param("x", Tensor::new(vec![3], vec![1.0, -2.0, 5.0]).unwrap());
    let s = t.sum(x);
    let g = t.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);

    let mut t = Tape::<f64>::new();
    let a = t.param("a", Tensor::full(vec![2], 3.0));
    let d = t.detach(a);
    let p = t.mul(a, d).unwrap();
    let s = t.sum(p);
    let g = t.backward(s).unwrap();
    assert!(g.get(d).is_none());
    assert_eq!(g.get(a).unwrap().data(), &[3.0, 3.0]);
    assert_eq!(g.recipients().len(), 1);

    assert!(matches!(t.backward(p), Err(Error::Contract(_))));
}

#[test]
fn frozen_leaves_receive_nothing() {
    let mut t = Tape::<f64>::new();
    let w = t.frozen("key/w", Tensor::full(vec![2, 2], 1.0));
    let x = t.param("query/x", Tensor::full(vec![1, 2], 1.0));
    let y = t.matmul(x, w).unwrap();
    let s = t.sum(y);
    let g = t.backward(s).unwrap();
    assert!(g.get(w).is_none());
    let r = g.recipients();
    assert_eq!(r.len(), 1);
    assert_eq!(r[0].0, "query/x");
}

#[test]
fn backward_visits_consumers_before_producers() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut t = Tape::<f64>::new();
    let a = t.param("a", Tensor::randn(vec![3, 3], &mut rng));
    let b = t.param("b", Tensor::randn(vec![3, 3], &mut rng));
    let mut pool = vec![a, b];
    for _ in 0..30 {
        let x = pool[rng.gen_range(0..pool.len())];
        let y = pool[rng.gen_range(0..pool.len())];
        let v = match rng.gen_range(0..4) {
            0 => t.add(x, y).unwrap(),
            1 => t.mul(x, y).unwrap(),
            2 => t.matmul(x, y).unwrap(),
            _ => t.scale(x, 0.5),
        };
        pool.push(v);
    }
    let mut acc = pool[2];
    for &v in &pool[3..] {
        acc = t.add(acc, v).unwrap();
    }
    let loss = t.sum(acc);
    let g = t.backward(loss).unwrap();
    let order = g.visit_order();
    let mut pos = vec![usize::MAX; t.len()];
    for (p, &n) in order.iter().enumerate() {
        assert_eq!(pos[n], usize::MAX, "node {n} visited twice");
        pos[n] = p;
    }
    for consumer in 0..t.len() {
        for operand in t.operands(Var(consumer)) {
            if pos[operand.index()] != usize::MAX && pos[consumer] != usize::MAX {
                assert!(pos[consumer] < pos[operand.index()], "{operand:?} before consumer {consumer}");
            }
        }
    }
}

#[test]
fn finite_diff_examples() {
    let g = finite_diff_grad(|p: &[f64]| p[0] * p[0], &[3.0], 1e-5);
    assert!((g[0] - 6.0).abs() < 1e-7);
    let g = finite_diff_grad(|_: &[f64]| 4.0, &[1.0, 2.0], 1e-5);
    assert_eq!(g, vec![0.0, 0.0]);
}

#[test]
fn batch_norm_shards_equal_independent_single_shard_passes() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for spatial in [false, true] {
        let (s, per, c) = (4, 3, 5);
        let n = s * per;
        let shape = if spatial { vec![n, c, 2, 3] } else { vec![n, c] };
        let xv = Tensor::randn(shape, &mut rng);
        let st = BnState::new(c);
        let gv = Tensor::randn(vec![c], &mut rng);
        let bv = Tensor::randn(vec![c], &mut rng);
        let mut t = Tape::<f64>::new();
        let (x, g, b) = (t.constant(xv.clone()), t.constant(gv.clone()), t.constant(bv.clone()));
        let slices: Vec<_> = (0..s).map(|j| j * per..(j + 1) * per).collect();
        let y = t.batch_norm(x, g, b, &st, BnMode::Train(&slices)).unwrap();
        let mut concat = Vec::new();
        for j in 0..s {
            let ids: Vec<usize> = (j * per..(j + 1) * per).collect();
            let part = t.constant(xv.gather_rows(&ids));
            let one = [0..per];
            let yj = t.batch_norm(part, g, b, &st, BnMode::Train(&one)).unwrap();
            concat.extend_from_slice(t.value(yj).data());
        }
        assert!(close(t.value(y), &concat, 1e-12));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn cross_entropy_is_shift_invariant(
        rows in prop::collection::vec(prop::collection::vec(-20.0f64..20.0, 5), 1..6),
        shifts in prop::collection::vec(-50.0f64..50.0, 6),
        target in 0usize..5,
    ) {
        let n = rows.len();
        let flat: Vec<f64> = rows.concat();
        let shifted: Vec<f64> = flat.iter().enumerate().map(|(i, v)| v + shifts[i / 5]).collect();
        let mut t = Tape::<f64>::new();
        let a = t.constant(Tensor::new(vec![n, 5], flat).unwrap());
        let b = t.constant(Tensor::new(vec![n, 5], shifted).unwrap());
        let targets = vec![target; n];
        let la = t.softmax_cross_entropy(a, &targets).unwrap();
        let lb = t.softmax_cross_entropy(b, &targets).unwrap();
        prop_assert!((t.value(la).data()[0] - t.value(lb).data()[0]).abs() < 1e-10);
    }

    #[test]
    fn l2_normalize_is_unit_and_idempotent(
        rows in prop::collection::vec(prop::collection::vec(-1e3f64..1e3, 4), 1..6),
    ) {
        prop_assume!(rows.iter().all(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt() > 1e-6));
        let n = rows.len();
        let mut t = Tape::<f64>::new();
        let x = t.constant(Tensor::new(vec![n, 4], rows.concat()).unwrap());
        let y = t.l2_normalize(x).unwrap();
        let z = t.l2_normalize(y).unwrap();
        for i in 0..n {
            let norm = t.value(y).row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!((norm - 1.0).abs() <= 1e-6);
        }
        prop_assert!(t.value(y).max_abs_diff(t.value(z)) < 1e-10);
    }
}
