use super::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn mat(rows: usize, cols: usize, data: &[f64]) -> Tensor {
    Tensor::matrix(rows, cols, data.to_vec()).unwrap()
}

#[test]
fn matmul_identity_and_hand_values() {
    let mut g = Graph::new();
    let i = g.constant(mat(2, 2, &[1.0, 0.0, 0.0, 1.0]));
    let b = g.constant(mat(2, 2, &[2.0, 3.0, 4.0, 5.0]));
    let c = g.matmul(i, b).unwrap();
    assert_eq!(g.value(c).data(), &[2.0, 3.0, 4.0, 5.0]);

    let a = g.constant(mat(1, 2, &[1.0, 2.0]));
    let b = g.constant(mat(2, 1, &[3.0, 4.0]));
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.value(c).data(), &[11.0]);
    assert_eq!(g.value(c).shape(), &[1, 1]);
}

#[test]
fn matmul_shape_mismatch_is_dimension_error() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    assert!(matches!(g.matmul(a, b), Err(NumericsError::Shape(_))));
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let mut r = rng(11);
    let a = Tensor::randn(&[4, 5], 1.0, &mut r);
    let b = Tensor::randn(&[5, 3], 1.0, &mut r);
    let err = finite_diff_check_many(
        |g, v| {
            let c = g.matmul(v[0], v[1])?;
            let sq = g.mul(c, c)?;
            g.sum(sq)
        },
        &[a, b],
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "rel err {err}");
}

#[test]
fn elementwise_examples() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::vector(vec![1.0, 2.0]));
    let b = g.constant(Tensor::vector(vec![3.0, 4.0]));
    let s = g.add(a, b).unwrap();
    assert_eq!(g.value(s).data(), &[4.0, 6.0]);
    let z = g.mul(a, 0.0).unwrap();
    assert_eq!(g.value(z).data(), &[0.0, 0.0]);

    let mut g = Graph::new();
    let x = g.param(Tensor::vector(vec![0.3, -1.2, 5.0]));
    let d = g.sub(x, x).unwrap();
    assert_eq!(g.value(d).data(), &[0.0; 3]);
    let s = g.sum(d).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[0.0; 3]);
}

#[test]
fn elementwise_shape_mismatch() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::vector(vec![1.0, 2.0]));
    let b = g.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
    assert!(g.add(a, b).is_err());
    assert!(g.elementwise(a, b, ElementwiseKind::Mul).is_err());
}

#[test]
fn log_softmax_uniform_and_stable() {
    let mut g = Graph::new();
    let z = g.constant(Tensor::full(&[1, 4], 0.7));
    let l = g.log_softmax(z).unwrap();
    for &v in g.value(l).data() {
        assert!((v - (0.25f64).ln()).abs() < 1e-15);
    }
    let z = g.constant(mat(1, 2, &[1000.0, 0.0]));
    let l = g.log_softmax(z).unwrap();
    let out = g.value(l).data();
    assert!(out[0].abs() < 1e-300 || out[0] == 0.0);
    assert!((out[1] + 1000.0).abs() < 1e-9);
}

#[test]
fn log_softmax_rows_sum_to_one() {
    let mut g = Graph::new();
    let z = g.constant(Tensor::randn(&[3, 7], 3.0, &mut rng(5)));
    let l = g.log_softmax(z).unwrap();
    for r in 0..3 {
        let s: f64 = g.value(l).row(r).iter().map(|v| v.exp()).sum();
        assert!((s - 1.0).abs() < 1e-12);
    }
}

#[test]
fn masked_cross_entropy_examples() {
    let mut g = Graph::new();
    let lp = g.constant(Tensor::full(&[1, 4], (0.25f64).ln()));
    let l = g.masked_cross_entropy(lp, &[2], &[true]).unwrap();
    assert!((g.value(l).item().unwrap() - 4f64.ln()).abs() < 1e-12);

    let lp = g.constant(mat(2, 2, &[0.0, f64::NEG_INFINITY, f64::NEG_INFINITY, 0.0]));
    let l = g.masked_cross_entropy(lp, &[0, 1], &[true, true]).unwrap();
    assert_eq!(g.value(l).item().unwrap(), 0.0);

    let lp = g.constant(mat(3, 2, &[-0.4, -1.0, -1.0, -0.6, -9.0, -9.0]));
    let l = g.masked_cross_entropy(lp, &[0, 1, 0], &[true, true, false]).unwrap();
    assert!((g.value(l).item().unwrap() - 0.5).abs() < 1e-15);

    assert_eq!(
        g.masked_cross_entropy(lp, &[0, 1, 0], &[false; 3]),
        Err(NumericsError::EmptyMask)
    );
}

#[test]
fn masked_cross_entropy_backward_skips_unmasked_rows() {
    let mut g = Graph::new();
    let z = g.param(Tensor::randn(&[3, 5], 1.0, &mut rng(3)));
    let lp = g.log_softmax(z).unwrap();
    let l = g.masked_cross_entropy(lp, &[1, 2, 3], &[true, false, true]).unwrap();
    g.backward(l).unwrap();
    let grad = g.grad(z).unwrap();
    assert!(grad[5..10].iter().all(|&v| v == 0.0));
    assert!(grad[0..5].iter().any(|&v| v != 0.0));
}

#[test]
fn backward_simple_cases() {
    let mut g = Graph::new();
    let x = g.param(Tensor::vector(vec![1.0, 2.0, 3.0]));
    let s = g.sum(x).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 1.0]);

    let mut g = Graph::new();
    let x = g.param(Tensor::scalar(3.0));
    let y = g.mul(x, x).unwrap();
    g.backward(y).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[6.0]);
    // a second sweep accumulates into the leaf
    g.backward(y).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[12.0]);
}

#[test]
fn backward_rejects_non_scalar_root() {
    let mut g = Graph::new();
    let x = g.param(Tensor::vector(vec![1.0, 2.0]));
    assert!(matches!(
        g.backward(x),
        Err(NumericsError::NonScalarRoot(_))
    ));
}

#[test]
fn reuse_accumulates_both_paths() {
    // y = sum(x * w + x), so dy/dx = w + 1 and dy/dw = x
    let mut g = Graph::new();
    let x = g.param(Tensor::vector(vec![2.0, -1.0]));
    let w = g.param(Tensor::vector(vec![0.5, 4.0]));
    let xw = g.mul(x, w).unwrap();
    let y = g.add(xw, x).unwrap();
    let s = g.sum(y).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[1.5, 5.0]);
    assert_eq!(g.grad(w).unwrap(), &[2.0, -1.0]);
}

fn mlp_loss(g: &mut Graph, v: &[Var]) -> Result<Var> {
    let h = g.matmul(v[0], v[1])?;
    let h = g.add_row(h, v[2])?;
    let h = g.gelu(h)?;
    let o = g.matmul(h, v[3])?;
    let lp = g.log_softmax(o)?;
    g.masked_cross_entropy(lp, &[0, 2, 1, 3], &[true, true, false, true])
}

#[test]
fn random_mlp_gradients_match_finite_differences() {
    let mut r = rng(99);
    let pts = vec![
        Tensor::randn(&[4, 3], 1.0, &mut r),
        Tensor::randn(&[3, 6], 0.7, &mut r),
        Tensor::randn(&[6], 0.3, &mut r),
        Tensor::randn(&[6, 4], 0.7, &mut r),
    ];
    let err = finite_diff_check_many(mlp_loss, &pts, 1e-5).unwrap();
    assert!(err < 1e-4, "rel err {err}");
}

#[test]
fn finite_diff_check_quadratic_and_degenerate_step() {
    let p = Tensor::vector(vec![0.3, -2.0, 1.7]);
    let quad = |g: &mut Graph, x: Var| {
        let sq = g.mul(x, x)?;
        let s = g.mul(sq, 2.5)?;
        g.sum(s)
    };
    assert!(finite_diff_check(quad, &p, 1e-5).unwrap() < 1e-9);
    assert!(matches!(
        finite_diff_check(quad, &p, 0.0),
        Err(NumericsError::InvalidArgument(_))
    ));
}

/// Every differentiable op, five seeds each.
#[test]
fn every_op_passes_finite_difference_suite() {
    for seed in 0..5u64 {
        let mut r = rng(1000 + seed);
        let cases: Vec<(&str, f64)> = vec![
            (
                "elementwise",
                finite_diff_check_many(
                    |g, v| {
                        let a = g.add(v[0], v[1])?;
                        let b = g.sub(a, v[1])?;
                        let c = g.mul(b, v[1])?;
                        let d = g.mul(c, 1.7)?;
                        let e = g.add(d, 0.2)?;
                        let f = g.mul(e, e)?;
                        g.mean(f)
                    },
                    &[Tensor::randn(&[2, 3], 1.0, &mut r), Tensor::randn(&[2, 3], 1.0, &mut r)],
                    1e-5,
                )
                .unwrap(),
            ),
            (
                "layer_norm",
                finite_diff_check_many(
                    |g, v| {
                        let y = g.layer_norm(v[0], v[1], v[2])?;
                        let w = g.constant(Tensor::randn(&[3, 5], 1.0, &mut rng(seed)));
                        let p = g.mul(y, w)?;
                        g.sum(p)
                    },
                    &[
                        Tensor::randn(&[3, 5], 1.0, &mut r),
                        Tensor::randn(&[5], 1.0, &mut r),
                        Tensor::randn(&[5], 1.0, &mut r),
                    ],
                    1e-5,
                )
                .unwrap(),
            ),
            (
                "embedding",
                finite_diff_check(
                    |g, t| {
                        let e = g.embedding(t, &[2, 0, 2, 1])?;
                        let sq = g.mul(e, e)?;
                        g.sum(sq)
                    },
                    &Tensor::randn(&[3, 4], 1.0, &mut r),
                    1e-5,
                )
                .unwrap(),
            ),
            (
                "causal_attention",
                finite_diff_check(
                    |g, x| {
                        let segs = [Segment { start: 0, len: 3 }, Segment { start: 3, len: 4 }];
                        let a = g.causal_attention(x, 2, &segs)?;
                        let w = g.constant(Tensor::randn(&[7, 4], 1.0, &mut rng(seed + 7)));
                        let p = g.mul(a, w)?;
                        g.sum(p)
                    },
                    &Tensor::randn(&[7, 12], 1.0, &mut r),
                    1e-5,
                )
                .unwrap(),
            ),
            (
                "log_softmax+pick_sum",
                finite_diff_check(
                    |g, x| {
                        let lp = g.log_softmax(x)?;
                        g.pick_sum(lp, &[(0, 1), (1, 3), (2, 0), (0, 1)])
                    },
                    &Tensor::randn(&[3, 5], 2.0, &mut r),
                    1e-5,
                )
                .unwrap(),
            ),
            (
                "log_sigmoid",
                finite_diff_check(
                    |g, x| {
                        let y = g.log_sigmoid(x)?;
                        g.sum(y)
                    },
                    &Tensor::randn(&[6], 3.0, &mut r),
                    1e-5,
                )
                .unwrap(),
            ),
            (
                "mlp+masked_ce",
                finite_diff_check_many(
                    mlp_loss,
                    &[
                        Tensor::randn(&[4, 3], 1.0, &mut r),
                        Tensor::randn(&[3, 6], 0.7, &mut r),
                        Tensor::randn(&[6], 0.3, &mut r),
                        Tensor::randn(&[6, 4], 0.7, &mut r),
                    ],
                    1e-5,
                )
                .unwrap(),
            ),
        ];
        for (name, err) in cases {
            assert!(err < 1e-4, "seed {seed} op {name}: rel err {err}");
        }
    }
}

#[test]
fn attention_segments_are_isolated_and_causal() {
    let mut r = rng(4);
    let x = Tensor::randn(&[5, 6], 1.0, &mut r);
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let segs = [Segment { start: 0, len: 2 }, Segment { start: 2, len: 3 }];
    let a = g.causal_attention(v, 1, &segs).unwrap();
    let full = g.value(a).clone();

    // editing row 4 (last of segment 2) leaves rows 0..4 unchanged
    let mut x2 = x.clone();
    for c in 0..6 {
        x2.data_mut()[4 * 6 + c] += 1.0;
    }
    let mut g2 = Graph::new();
    let v2 = g2.constant(x2);
    let a2 = g2.causal_attention(v2, 1, &segs).unwrap();
    assert_eq!(&g2.value(a2).data()[..8], &full.data()[..8]);
    // first row of each segment attends only to itself: output = its value slice
    assert_eq!(&full.data()[0..2], &x.data()[4..6]);
    assert_eq!(&full.data()[4..6], &x.data()[2 * 6 + 4..2 * 6 + 6]);
}

#[test]
fn log_sigmoid_is_stable() {
    assert!((log_sigmoid(0.0) + 2f64.ln()).abs() < 1e-15);
    assert!(log_sigmoid(-800.0).is_finite());
    assert!(log_sigmoid(800.0) == 0.0 || log_sigmoid(800.0).abs() < 1e-300);
    assert!((sigmoid(2.0) + sigmoid(-2.0) - 1.0).abs() < 1e-15);
}

#[test]
fn tensor_shape_invariant() {
    assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
    assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn log_softmax_exp_sums_to_one(row in prop::collection::vec(-50.0f64..50.0, 2..12)) {
            let mut r = row.clone();
            log_softmax_in_place(&mut r);
            let s: f64 = r.iter().map(|v| v.exp()).sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
        }
    }
}
