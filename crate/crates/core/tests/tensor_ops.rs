use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use semvlp_core::tensor::{finite_diff_grad, relative_error, Graph, Tensor};
use semvlp_core::Error;

fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(vec![rows, cols], data).unwrap()
}

fn triple_loop(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for t in 0..k {
                s += a.get(i, t) * b.get(t, j);
            }
            c[i * n + j] = s;
        }
    }
    c
}

#[test]
fn matmul_identity_and_dot() {
    let g = Graph::new();
    let a = g.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
    let i = g.constant(Tensor::eye(2));
    assert_eq!(a.matmul(&i).unwrap().value().data(), &[1.0, 2.0, 3.0, 4.0]);

    let r = g.constant(Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap());
    let c = g.constant(Tensor::from_rows(&[vec![3.0], vec![4.0]]).unwrap());
    assert_eq!(r.matmul(&c).unwrap().value().data(), &[11.0]);
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (a, b) = (random_matrix(7, 5, &mut rng), random_matrix(5, 3, &mut rng));
    let g = Graph::new();
    let c = g.constant(a.clone()).matmul(&g.constant(b.clone())).unwrap();
    let reference = triple_loop(&a, &b);
    for (x, y) in c.value().data().iter().zip(&reference) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    match a.matmul(&b) {
        Err(Error::Shape { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 3]);
        }
        other => panic!("expected shape error, got {other:?}"),
    }
}

#[test]
fn softmax_examples() {
    let g = Graph::new();
    let s = g
        .constant(Tensor::from_rows(&[vec![0.0, 0.0], vec![2f64.ln(), 0.0]]).unwrap())
        .softmax_rows()
        .unwrap()
        .value();
    assert_eq!(s.row(0), &[0.5, 0.5]);
    assert!((s.get(1, 0) - 2.0 / 3.0).abs() < 1e-15);
    assert!((s.get(1, 1) - 1.0 / 3.0).abs() < 1e-15);
}

#[test]
fn softmax_shift_invariance() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random_matrix(4, 6, &mut rng);
    let g = Graph::new();
    let a = g.constant(x.clone()).softmax_rows().unwrap().value();
    let b = g.constant(x.map(|v| v + 100.0)).softmax_rows().unwrap().value();
    assert!(a.max_abs_diff(&b) < 1e-12);
}

#[test]
fn softmax_nan_is_an_error() {
    let g = Graph::new();
    let x = g.constant(Tensor::from_rows(&[vec![f64::NAN, 0.0]]).unwrap());
    assert!(matches!(x.softmax_rows(), Err(Error::NaN { .. })));
}

#[test]
fn masked_softmax_zeroes_masked_and_rejects_empty_rows() {
    let g = Graph::new();
    let x = g.constant(Tensor::from_rows(&[vec![1.0, 5.0, 2.0]]).unwrap());
    let y = x.masked_softmax_rows(&[true, false, true]).unwrap().value();
    assert_eq!(y.get(0, 1), 0.0);
    assert!((y.row(0).iter().sum::<f64>() - 1.0).abs() < 1e-15);
    assert!(matches!(
        x.masked_softmax_rows(&[false, false, false]),
        Err(Error::AllKeysMasked { row: 0 })
    ));
}

fn ln_params(g: &Graph, d: usize) -> (semvlp_core::tensor::Var<'_>, semvlp_core::tensor::Var<'_>) {
    (g.constant(Tensor::full(&[d], 1.0)), g.constant(Tensor::zeros(&[d])))
}

#[test]
fn layer_norm_examples() {
    let g = Graph::new();
    let (gm, bt) = ln_params(&g, 4);
    let y = g
        .constant(Tensor::full(&[1, 4], 3.5))
        .layer_norm(&gm, &bt, 1e-12)
        .unwrap()
        .value();
    assert!(y.data().iter().all(|&v| v == 0.0));

    let (gm, bt) = ln_params(&g, 2);
    let y = g
        .constant(Tensor::from_rows(&[vec![1.0, -1.0]]).unwrap())
        .layer_norm(&gm, &bt, 0.0)
        .unwrap()
        .value();
    assert_eq!(y.data(), &[1.0, -1.0]);
}

#[test]
fn layer_norm_matches_two_pass_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let x = random_matrix(1, 9, &mut rng);
    let gamma = random_matrix(1, 9, &mut rng).into_data();
    let beta = random_matrix(1, 9, &mut rng).into_data();
    let eps = 1e-12;

    let row = x.row(0);
    let mut mean = 0.0;
    for v in row {
        mean += v;
    }
    mean /= 9.0;
    let mut var = 0.0;
    for v in row {
        var += (v - mean) * (v - mean);
    }
    var /= 9.0;
    let reference: Vec<f64> = (0..9)
        .map(|j| gamma[j] * (row[j] - mean) / (var + eps).sqrt() + beta[j])
        .collect();

    let g = Graph::new();
    let y = g
        .constant(x)
        .layer_norm(&g.constant(Tensor::vector(gamma)), &g.constant(Tensor::vector(beta)), eps)
        .unwrap()
        .value();
    for (a, b) in y.data().iter().zip(&reference) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn backward_sum_of_squares() {
    let g = Graph::new();
    let x = g.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]));
    let loss = x.mul(&x).unwrap().sum().unwrap();
    g.backward(loss).unwrap();
    assert_eq!(x.grad().unwrap().data(), &[2.0, 4.0, 6.0]);
}

#[test]
fn backward_cross_entropy_uniform_logits() {
    let g = Graph::new();
    let logits = g.leaf(Tensor::zeros(&[1, 4]));
    let loss = logits.cross_entropy(&[2]).unwrap();
    assert!((loss.item() - 4f64.ln()).abs() < 1e-15);
    g.backward(loss).unwrap();
    assert_eq!(logits.grad().unwrap().data(), &[0.25, 0.25, -0.75, 0.25]);
}

#[test]
fn backward_rejects_non_scalar_and_second_call() {
    let g = Graph::new();
    let x = g.leaf(Tensor::vector(vec![1.0, 2.0]));
    let y = x.scale(2.0).unwrap();
    assert!(matches!(g.backward(y), Err(Error::NonScalarLoss(_))));
    let loss = y.sum().unwrap();
    g.backward(loss).unwrap();
    assert!(matches!(g.backward(loss), Err(Error::DeadGraph)));
}

#[test]
fn smooth_l1_quadratic_zone() {
    let g = Graph::new();
    let p = g.constant(Tensor::vector(vec![0.5, -0.5, 1.5]));
    let loss = p.smooth_l1(&[0.0, 0.0, 1.0]).unwrap();
    assert!((loss.item() - 0.125).abs() < 1e-15);
}

/// A composite touching every differentiable op, as a function of the input
/// matrix `x` (3×4) and a weight `w` (4×4).
fn composite(g: &Graph, x: &Tensor, w: &Tensor) -> (f64, Option<Tensor>, Option<Tensor>) {
    let xv = g.leaf(x.clone());
    let wv = g.leaf(w.clone());
    let gamma = g.leaf(Tensor::vector(vec![1.1, 0.9, 1.0, 1.2]));
    let beta = g.leaf(Tensor::vector(vec![0.1, -0.2, 0.0, 0.3]));
    let bias = g.leaf(Tensor::vector(vec![0.05, -0.1, 0.2, 0.0]));

    let h = xv.matmul(&wv).unwrap().add_row(&bias).unwrap().gelu().unwrap();
    let h = h.layer_norm(&gamma, &beta, 1e-5).unwrap();
    let scores = h.matmul_bt(&xv).unwrap().scale(0.5).unwrap();
    let attn = scores.softmax_rows().unwrap();
    let ctx = attn.matmul(&xv).unwrap();
    let left = ctx.slice_cols(0, 2).unwrap();
    let right = ctx.slice_cols(2, 4).unwrap().tanh().unwrap();
    let joined = g.concat_cols(&[right, left]).unwrap();
    let top = joined.slice_rows(0, 1).unwrap();
    let stacked = g.concat_rows(&[joined, top, xv.gather_rows(&[2, 0]).unwrap()]).unwrap();
    let ce = stacked.cross_entropy(&[0, 1, 2, 3, 0, 1]).unwrap();
    let bce = stacked.slice_rows(0, 2).unwrap().bce_with_logits(&[0.3; 8]).unwrap();
    let sl1 = h.smooth_l1(&[0.2; 12]).unwrap();
    let diff = stacked.sub(&stacked.scale(0.3).unwrap()).unwrap().mean().unwrap();
    let loss = ce.add(&bce).unwrap().add(&sl1).unwrap().add(&diff).unwrap();
    let value = loss.item();
    g.backward(loss).unwrap();
    (value, xv.grad(), wv.grad())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn autodiff_matches_finite_differences(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_matrix(3, 4, &mut rng);
        let w = random_matrix(4, 4, &mut rng);
        let (_, gx, gw) = composite(&Graph::new(), &x, &w);
        let fx = finite_diff_grad(|t| composite(&Graph::new(), t, &w).0, &x, 1e-5);
        let fw = finite_diff_grad(|t| composite(&Graph::new(), &x, t).0, &w, 1e-5);
        for (a, n) in gx.unwrap().data().iter().zip(fx.data()) {
            prop_assert!(relative_error(*a, *n, 1e-5) < 1e-4, "x: {a} vs {n}");
        }
        for (a, n) in gw.unwrap().data().iter().zip(fw.data()) {
            prop_assert!(relative_error(*a, *n, 1e-5) < 1e-4, "w: {a} vs {n}");
        }
    }

    #[test]
    fn softmax_rows_sum_to_one(values in prop::collection::vec(-50.0f64..50.0, 1..40)) {
        let g = Graph::new();
        let n = values.len();
        let y = g.constant(Tensor::new(vec![1, n], values).unwrap()).softmax_rows().unwrap().value();
        let s: f64 = y.data().iter().sum();
        prop_assert!((s - 1.0).abs() < 1e-9);
        prop_assert!(y.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn forward_and_backward_are_deterministic(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_matrix(3, 4, &mut rng);
        let w = random_matrix(4, 4, &mut rng);
        let (l1, gx1, gw1) = composite(&Graph::new(), &x, &w);
        let (l2, gx2, gw2) = composite(&Graph::new(), &x, &w);
        prop_assert_eq!(l1.to_bits(), l2.to_bits());
        prop_assert!(gx1.unwrap().bitwise_eq(&gx2.unwrap()));
        prop_assert!(gw1.unwrap().bitwise_eq(&gw2.unwrap()));
    }
}
