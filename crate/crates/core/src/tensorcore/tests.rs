use std::sync::Arc;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap()
}

/// Plain triple loop, independent of the tape kernels.
fn naive_matmul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let (m, k, n) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; n]; m];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                out[i][j] += a[i][p] * b[p][j];
            }
        }
    }
    out
}

#[test]
fn matmul_identity_and_oracle() {
    let mut tape = Tape::new();
    let a = Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap();
    let an = tape.leaf(a.clone());
    let id = tape.constant(Tensor::identity(3));
    let out = tape.matmul(an, id).unwrap();
    assert_eq!(tape.value(out), &a);

    let lhs = vec![vec![1.0, 2.0], vec![3.0, 4.0]];
    let rhs = vec![vec![5.0, 6.0], vec![7.0, 8.0]];
    let expected = naive_matmul(&lhs, &rhs);
    assert_eq!(expected, vec![vec![19.0, 22.0], vec![43.0, 50.0]]);
    let l = tape.leaf(Tensor::from_rows(&lhs).unwrap());
    let r = tape.leaf(Tensor::from_rows(&rhs).unwrap());
    let p = tape.matmul(l, r).unwrap();
    assert_eq!(tape.value(p).data(), &[19.0, 22.0, 43.0, 50.0]);
}

#[test]
fn matmul_matches_naive_on_random_shapes() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let (m, k, n) = (rng.random_range(1..6), rng.random_range(1..6), rng.random_range(1..6));
        let a = random_tensor(&mut rng, &[m, k]);
        let b = random_tensor(&mut rng, &[k, n]);
        let rows = |t: &Tensor| (0..t.shape()[0]).map(|i| t.row(i).to_vec()).collect::<Vec<_>>();
        let expected = naive_matmul(&rows(&a), &rows(&b));
        let mut tape = Tape::new();
        let (x, y) = (tape.leaf(a), tape.leaf(b));
        let out = tape.matmul(x, y).unwrap();
        for i in 0..m {
            for j in 0..n {
                assert!((tape.value(out).at(i, j) - expected[i][j]).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn softmax_of_zeros_is_uniform() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::vector(vec![0.0, 0.0]));
    let y = tape.softmax_last_dim(x).unwrap();
    assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
}

#[test]
fn shape_errors() {
    let mut tape = Tape::new();
    let a = tape.leaf(Tensor::zeros(&[2, 3]));
    let b = tape.leaf(Tensor::zeros(&[2, 3]));
    assert!(matches!(tape.matmul(a, b), Err(Error::ShapeMismatch { .. })));
    let c = tape.leaf(Tensor::zeros(&[4]));
    assert!(matches!(tape.add(a, c), Err(Error::ShapeMismatch { .. })));
    assert!(tape.split_last_dim(a, &[1, 1]).is_err());
    assert!(matches!(tape.backward(a), Err(Error::NotScalar(_))));
}

#[test]
fn non_finite_results_are_rejected() {
    let mut tape = Tape::new();
    let a = tape.leaf(Tensor::vector(vec![1e308, 1e308]));
    assert!(matches!(tape.sum(a), Err(Error::NonFinite { .. })));
}

#[test]
fn sum_gradient_is_ones() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::new(vec![2, 3, 2], vec![0.3; 12]).unwrap());
    let s = tape.sum(x).unwrap();
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(x), Tensor::ones(&[2, 3, 2]));
}

#[test]
fn mean_of_square_gradient() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
    let sq = tape.mul(x, x).unwrap();
    let m = tape.mean(sq).unwrap();
    let g = tape.backward(m).unwrap();
    assert_eq!(g.get(x).data(), &[1.0, 2.0]);
}

#[test]
fn unreachable_leaf_has_zero_gradient() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
    let unused = tape.leaf(Tensor::ones(&[3, 2]));
    let s = tape.sum(x).unwrap();
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(unused), Tensor::zeros(&[3, 2]));
}

#[test]
fn log_softmax_pick_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random_tensor(&mut rng, &[4]);
    let onehot = Tensor::vector(vec![0.0, 0.0, 1.0, 0.0]);
    let err = finite_diff_check(
        |tape, p| {
            let ls = tape.log_softmax_last_dim(p[0])?;
            let pick = tape.constant(onehot.clone());
            let picked = tape.mul(ls, pick)?;
            tape.sum(picked)
        },
        &[x],
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-8, "err {err}");
}

#[test]
fn finite_diff_trivial_functions() {
    let p = Tensor::vector(vec![0.3, -0.7, 2.0]);
    let constant = finite_diff_check(
        |tape, _| Ok(tape.constant(Tensor::scalar(4.0))),
        &[p.clone()],
        1e-5,
    )
    .unwrap();
    assert_eq!(constant, 0.0);
    let w = Tensor::vector(vec![1.5, -2.0, 0.25]);
    let linear = finite_diff_check(
        |tape, params| {
            let c = tape.constant(w.clone());
            let prod = tape.mul(params[0], c)?;
            tape.sum(prod)
        },
        &[p],
        1e-5,
    )
    .unwrap();
    assert!(linear < 1e-9, "linear err {linear}");
}

#[test]
fn concat_then_split_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = random_tensor(&mut rng, &[3, 2]);
    let b = random_tensor(&mut rng, &[3, 4]);
    let mut tape = Tape::new();
    let (an, bn) = (tape.leaf(a.clone()), tape.leaf(b.clone()));
    let c = tape.concat_last_dim(&[an, bn]).unwrap();
    let parts = tape.split_last_dim(c, &[2, 4]).unwrap();
    assert_eq!(tape.value(parts[0]), &a);
    assert_eq!(tape.value(parts[1]), &b);
}

struct SquaredNorm;

impl ScalarFunction for SquaredNorm {
    fn name(&self) -> &'static str {
        "squared_norm"
    }

    fn eval(&self, inputs: &[&Tensor]) -> (f64, Vec<Tensor>) {
        let x = inputs[0];
        (x.data().iter().map(|v| v * v).sum(), vec![x.map(|v| 2.0 * v)])
    }
}

/// Builds `sum(prim(inputs) * weights)` so every output entry gets a
/// distinct upstream gradient.
fn weighted_probe(
    tape: &mut Tape,
    out: NodeId,
    weights_seed: u64,
) -> crate::error::Result<NodeId> {
    let shape = tape.value(out).shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(weights_seed);
    let w = tape.constant(random_tensor(&mut rng, &shape));
    let prod = tape.mul(out, w)?;
    tape.sum(prod)
}

fn check_primitive(
    seed: u64,
    shapes: &[Vec<usize>],
    build: impl Fn(&mut Tape, &[NodeId]) -> crate::error::Result<NodeId>,
) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params: Vec<Tensor> = shapes.iter().map(|s| random_tensor(&mut rng, s)).collect();
    finite_diff_check(
        |tape, p| {
            let out = build(tape, p)?;
            if tape.value(out).rank() == 0 {
                Ok(out)
            } else {
                weighted_probe(tape, out, seed ^ 0xabcd)
            }
        },
        &params,
        1e-5,
    )
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn every_primitive_matches_finite_differences(seed in 0u64..10_000, m in 1usize..4, n in 1usize..5, k in 1usize..4) {
        let tol = 1e-6;
        let cases: Vec<(&str, f64)> = vec![
            ("matmul", check_primitive(seed, &[vec![m, k], vec![k, n]], |t, p| t.matmul(p[0], p[1]))),
            ("batched matmul", check_primitive(seed, &[vec![2, m, k], vec![2, k, n]], |t, p| t.matmul(p[0], p[1]))),
            ("add", check_primitive(seed, &[vec![m, n], vec![m, n]], |t, p| t.add(p[0], p[1]))),
            ("add bias", check_primitive(seed, &[vec![m, n], vec![n]], |t, p| t.add(p[0], p[1]))),
            ("mul", check_primitive(seed, &[vec![m, n], vec![m, n]], |t, p| t.mul(p[0], p[1]))),
            ("mul row scalar", check_primitive(seed, &[vec![m, n], vec![m, 1]], |t, p| t.mul(p[0], p[1]))),
            ("scale", check_primitive(seed, &[vec![m, n]], |t, p| t.scale(p[0], -1.7))),
            ("concat", check_primitive(seed, &[vec![m, n], vec![m, k]], |t, p| t.concat_last_dim(&[p[0], p[1]]))),
            ("split", check_primitive(seed, &[vec![m, n + 1]], |t, p| Ok(t.split_last_dim(p[0], &[1, n])?[1]))),
            ("softmax", check_primitive(seed, &[vec![m, n]], |t, p| t.softmax_last_dim(p[0]))),
            ("log_softmax", check_primitive(seed, &[vec![m, n]], |t, p| t.log_softmax_last_dim(p[0]))),
            // the ramp keeps each row's spread away from zero, where central
            // differences lose accuracy
            ("layer_norm", check_primitive(seed, &[vec![m, n + 1], vec![n + 1], vec![n + 1]], |t, p| {
                let ramp = t.constant(Tensor::vector((0..=n).map(|j| 4.0 * j as f64).collect()));
                let x = t.add(p[0], ramp)?;
                t.layer_norm(x, p[1], p[2], 1e-5)
            })),
            ("transpose", check_primitive(seed, &[vec![m, n]], |t, p| t.transpose_last_two(p[0]))),
            ("embedding", check_primitive(seed, &[vec![3, n]], |t, p| t.embedding_lookup(p[0], vec![2, 0, 2]))),
            ("sum", check_primitive(seed, &[vec![m, n]], |t, p| t.sum(p[0]))),
            ("mean", check_primitive(seed, &[vec![m, n]], |t, p| t.mean(p[0]))),
            ("fused", check_primitive(seed, &[vec![m, n]], |t, p| t.fused(Arc::new(SquaredNorm), &[p[0]]))),
        ];
        for (name, err) in cases {
            prop_assert!(err < tol, "{} error {}", name, err);
        }
    }

    #[test]
    fn relu_matches_away_from_kink(values in prop::collection::vec(prop_oneof![-2.0f64..-0.01, 0.01f64..2.0], 1..8)) {
        let x = Tensor::vector(values);
        let err = finite_diff_check(
            |t, p| { let r = t.relu(p[0])?; weighted_probe(t, r, 3) },
            &[x],
            1e-5,
        ).unwrap();
        prop_assert!(err < 1e-6);
    }

    #[test]
    fn softmax_rows_are_distributions(seed in 0u64..10_000, m in 1usize..5, n in 1usize..7) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_tensor(&mut rng, &[m, n]).map(|v| v * 20.0);
        let mut tape = Tape::new();
        let xn = tape.leaf(x);
        let y = tape.softmax_last_dim(xn).unwrap();
        for r in 0..m {
            let row = tape.value(y).row(r);
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn concat_split_roundtrip(seed in 0u64..10_000, m in 1usize..4, a in 1usize..5, b in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_tensor(&mut rng, &[m, a]);
        let y = random_tensor(&mut rng, &[m, b]);
        let mut tape = Tape::new();
        let (xn, yn) = (tape.leaf(x.clone()), tape.leaf(y.clone()));
        let c = tape.concat_last_dim(&[xn, yn]).unwrap();
        let parts = tape.split_last_dim(c, &[a, b]).unwrap();
        prop_assert_eq!(tape.value(parts[0]), &x);
        prop_assert_eq!(tape.value(parts[1]), &y);
    }
}

#[test]
fn replay_is_bit_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut tape = Tape::new();
    let x = tape.leaf(random_tensor(&mut rng, &[5, 4]));
    let w = tape.leaf(random_tensor(&mut rng, &[4, 6]));
    let g = tape.leaf(Tensor::ones(&[6]));
    let b = tape.leaf(Tensor::zeros(&[6]));
    let h = tape.matmul(x, w).unwrap();
    let h = tape.layer_norm(h, g, b, 1e-5).unwrap();
    let h = tape.relu(h).unwrap();
    let ht = tape.transpose_last_two(h).unwrap();
    let a = tape.matmul(h, ht).unwrap();
    let a = tape.softmax_last_dim(a).unwrap();
    let ls = tape.log_softmax_last_dim(a).unwrap();
    let _ = tape.mean(ls).unwrap();
    let replayed = tape.replay().unwrap();
    for (orig, again) in tape.recorded_values().zip(&replayed) {
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(orig), bits(again));
    }
}
