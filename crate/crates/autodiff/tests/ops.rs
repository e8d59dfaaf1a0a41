use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use svio_autodiff::check::check_gradients;
use svio_autodiff::{
    AutodiffError, BinaryKind, Conv2dSpec, ElementwiseKind, Graph, ParamStore, Tensor, UnaryKind,
};

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn store(entries: Vec<(&str, Tensor)>) -> ParamStore {
    let mut s = ParamStore::new();
    for (k, v) in entries {
        s.insert(k, v).unwrap();
    }
    s
}

#[test]
fn matmul_identity() {
    let mut g = Graph::new();
    let i = g.constant(Tensor::matrix(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap());
    let m = Tensor::matrix(&[&[1.5, -2.0], &[3.0, 4.25]]).unwrap();
    let mv = g.constant(m.clone());
    let out = g.matmul(i, mv).unwrap();
    assert_eq!(g.value(out), &m);
}

#[test]
fn matmul_shape_mismatch_names_both_shapes() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[4, 1]));
    match g.matmul(a, b) {
        Err(AutodiffError::Dimension { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![4, 1]);
        }
        other => panic!("expected dimension error, got {other:?}"),
    }
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let p = store(vec![("a", random(&mut rng, &[2, 3])), ("b", random(&mut rng, &[3, 1]))]);
        let probe = random(&mut rng, &[2, 1]);
        let r = check_gradients(&p, EPS, |g, s| {
            let a = g.param_from(s, "a")?;
            let b = g.param_from(s, "b")?;
            let c = g.matmul(a, b)?;
            let w = g.constant(probe.clone());
            let y = g.mul(c, w)?;
            g.sum(y)
        })
        .unwrap();
        assert!(r.passes(TOL), "{r:?}");
    }
}

#[test]
fn sigmoid_of_zero_is_half() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::scalar(0.0));
    let y = g.sigmoid(x).unwrap();
    assert_eq!(g.value(y).item().unwrap(), 0.5);
}

#[test]
fn sigmoid_is_stable_at_extremes() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::vector(vec![-800.0, 800.0]));
    let y = g.sigmoid(x).unwrap();
    assert_eq!(g.value(y).data(), &[0.0, 1.0]);
}

#[test]
fn elementwise_mul() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
    let b = g.constant(Tensor::vector(vec![0.0, 1.0, 2.0]));
    let c = g
        .elementwise(ElementwiseKind::Binary(BinaryKind::Mul), a, Some(b))
        .unwrap();
    assert_eq!(g.value(c).data(), &[0.0, 2.0, 6.0]);
}

#[test]
fn sigmoid_gradient_at_1_3() {
    let p = store(vec![("x", Tensor::scalar(1.3))]);
    let r = check_gradients(&p, EPS, |g, s| {
        let x = g.param_from(s, "x")?;
        g.sigmoid(x)
    })
    .unwrap();
    assert!(r.passes(TOL), "{r:?}");
}

#[test]
fn log_rejects_non_positive() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::vector(vec![1.0, 0.0]));
    assert!(matches!(g.log(x), Err(AutodiffError::Domain { .. })));
}

#[test]
fn div_rejects_zero_divisor() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::vector(vec![1.0]));
    let b = g.constant(Tensor::vector(vec![0.0]));
    assert!(matches!(g.div(a, b), Err(AutodiffError::Domain { .. })));
}

#[test]
fn non_broadcastable_shapes_rejected() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2]));
    assert!(matches!(g.add(a, b), Err(AutodiffError::Dimension { .. })));
}

#[test]
fn unary_kind_with_second_operand_is_contract_error() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2]));
    let r = g.elementwise(ElementwiseKind::Unary(UnaryKind::Tanh), a, Some(a));
    assert!(matches!(r, Err(AutodiffError::Contract(_))));
}

#[test]
fn every_elementwise_kind_passes_gradient_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let unary = [
        UnaryKind::Sigmoid,
        UnaryKind::Tanh,
        UnaryKind::Log,
        UnaryKind::Exp,
        UnaryKind::Neg,
        UnaryKind::Square,
        UnaryKind::LeakyRelu(0.1),
        UnaryKind::Scale(-2.5),
        UnaryKind::Offset(0.75),
    ];
    for kind in unary {
        for _ in 0..10 {
            // Positive inputs keep log inside its domain.
            let x = Tensor::vector((0..4).map(|_| rng.random_range(0.1..2.0)).collect());
            let p = store(vec![("x", x)]);
            let r = check_gradients(&p, EPS, |g, s| {
                let x = g.param_from(s, "x")?;
                let y = g.unary(kind, x)?;
                let y2 = g.square(y)?;
                g.sum(y2)
            })
            .unwrap();
            assert!(r.passes(TOL), "{kind:?}: {r:?}");
        }
    }
    for kind in [BinaryKind::Add, BinaryKind::Sub, BinaryKind::Mul, BinaryKind::Div] {
        for _ in 0..10 {
            let a = random(&mut rng, &[3, 4]);
            let b = Tensor::vector((0..4).map(|_| rng.random_range(0.5..1.5)).collect());
            let p = store(vec![("a", a), ("b", b)]);
            let r = check_gradients(&p, EPS, |g, s| {
                let a = g.param_from(s, "a")?;
                let b = g.param_from(s, "b")?;
                let y = g.binary(kind, a, b)?;
                let y2 = g.square(y)?;
                g.sum(y2)
            })
            .unwrap();
            assert!(r.passes(TOL), "{kind:?}: {r:?}");
        }
    }
}

#[test]
fn concat_values_and_gradients() {
    let mut g = Graph::new();
    let s = store(vec![
        ("a", Tensor::vector(vec![1.0, 2.0])),
        ("b", Tensor::vector(vec![3.0])),
    ]);
    let a = g.param_from(&s, "a").unwrap();
    let b = g.param_from(&s, "b").unwrap();
    let c = g.concat(&[a, b], 0).unwrap();
    assert_eq!(g.value(c).data(), &[1.0, 2.0, 3.0]);
    let loss = g.sum(c).unwrap();
    let grads = g.backward(loss, &s).unwrap();
    assert_eq!(grads.get("a").unwrap().data(), &[1.0, 1.0]);
    assert_eq!(grads.get("b").unwrap().data(), &[1.0]);
}

#[test]
fn concat_mismatched_axes_rejected() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[3, 3]));
    assert!(matches!(g.concat(&[a, b], 1), Err(AutodiffError::Dimension { .. })));
}

#[test]
fn concat_and_slice_inner_axis_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let p = store(vec![("a", random(&mut rng, &[2, 3, 2])), ("b", random(&mut rng, &[2, 1, 2]))]);
    let w = random(&mut rng, &[2, 2, 2]);
    let r = check_gradients(&p, EPS, |g, s| {
        let a = g.param_from(s, "a")?;
        let b = g.param_from(s, "b")?;
        let c = g.concat(&[a, b], 1)?;
        let mid = g.slice(c, 1, 2, 2)?;
        let wc = g.constant(w.clone());
        let y = g.mul(mid, wc)?;
        let t = g.tanh(y)?;
        g.sum(t)
    })
    .unwrap();
    assert!(r.passes(TOL), "{r:?}");
}

#[test]
fn softmax_uniform_for_equal_logits() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::vector(vec![0.0, 0.0]));
    let y = g.softmax_axis(x, 0, 1.0).unwrap();
    assert_eq!(g.value(y).data(), &[0.5, 0.5]);
}

#[test]
fn softmax_low_temperature_approaches_one_hot() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::vector(vec![2.0, 1.0]));
    let y = g.softmax_axis(x, 0, 0.1).unwrap();
    // exp(10)/(exp(10)+1) by direct evaluation.
    let expected = 1.0 / (1.0 + (-10.0f64).exp());
    assert!(g.value(y).data()[0] > 0.9999);
    assert!((g.value(y).data()[0] - expected).abs() < 1e-15);
}

#[test]
fn softmax_rejects_non_positive_temperature() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::vector(vec![1.0, 2.0]));
    assert!(matches!(g.softmax_axis(x, 0, 0.0), Err(AutodiffError::Parameter(_))));
    assert!(matches!(g.softmax_axis(x, 0, -1.0), Err(AutodiffError::Parameter(_))));
}

#[test]
fn softmax_gradient_at_fixed_point() {
    let p = store(vec![("x", Tensor::vector(vec![0.3, -0.7]))]);
    let r = check_gradients(&p, EPS, |g, s| {
        let x = g.param_from(s, "x")?;
        let y = g.softmax_axis(x, 0, 0.5)?;
        // Pick the first coordinate; the sum is identically 1.
        let first = g.slice(y, 0, 0, 1)?;
        g.sum(first)
    })
    .unwrap();
    assert!(r.passes(TOL), "{r:?}");
}

#[test]
fn backward_of_sum_of_squares() {
    let s = store(vec![("w", Tensor::vector(vec![1.0, -2.0]))]);
    let mut g = Graph::new();
    let w = g.param_from(&s, "w").unwrap();
    let sq = g.mul(w, w).unwrap();
    let loss = g.sum(sq).unwrap();
    let grads = g.backward(loss, &s).unwrap();
    assert_eq!(grads.get("w").unwrap().data(), &[2.0, -4.0]);
    assert!(grads.unreached().is_empty());
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let s = store(vec![("w", Tensor::vector(vec![1.0, -2.0]))]);
    let mut g = Graph::new();
    let w = g.param_from(&s, "w").unwrap();
    assert!(matches!(g.backward(w, &s), Err(AutodiffError::Contract(_))));
}

#[test]
fn unreached_parameter_gets_zero_and_is_flagged() {
    let s = store(vec![
        ("used", Tensor::vector(vec![1.0])),
        ("unused", Tensor::zeros(&[2, 2])),
    ]);
    let mut g = Graph::new();
    let w = g.param_from(&s, "used").unwrap();
    let loss = g.sum(w).unwrap();
    let grads = g.backward(loss, &s).unwrap();
    assert_eq!(grads.len(), 2);
    assert_eq!(grads.get("unused").unwrap(), &Tensor::zeros(&[2, 2]));
    assert_eq!(grads.unreached(), &["unused".to_string()]);
}

#[test]
fn composite_sigmoid_matmul_network() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let p = store(vec![
        ("w1", random(&mut rng, &[3, 4])),
        ("b1", random(&mut rng, &[4])),
        ("w2", random(&mut rng, &[4, 2])),
    ]);
    let x = random(&mut rng, &[5, 3]);
    let r = check_gradients(&p, EPS, |g, s| {
        let xv = g.constant(x.clone());
        let w1 = g.param_from(s, "w1")?;
        let b1 = g.param_from(s, "b1")?;
        let w2 = g.param_from(s, "w2")?;
        let h = g.matmul(xv, w1)?;
        let h = g.add(h, b1)?;
        let h = g.sigmoid(h)?;
        let y = g.matmul(h, w2)?;
        let y = g.square(y)?;
        g.sum(y)
    })
    .unwrap();
    assert!(r.passes(TOL), "{r:?}");
}

#[test]
fn repeated_backward_is_bit_identical() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let s = store(vec![("w", random(&mut rng, &[4, 3])), ("b", random(&mut rng, &[3]))]);
    let x = random(&mut rng, &[2, 4]);
    let run = || {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let w = g.param_from(&s, "w").unwrap();
        let b = g.param_from(&s, "b").unwrap();
        let y = g.matmul(xv, w).unwrap();
        let y = g.add(y, b).unwrap();
        let y = g.tanh(y).unwrap();
        let loss = g.sum(y).unwrap();
        g.backward(loss, &s).unwrap()
    };
    assert_eq!(run(), run());
}

#[test]
fn conv_identity_kernel() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random(&mut rng, &[1, 1, 5, 4]);
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let w = g.constant(Tensor::filled(&[1, 1, 1, 1], 1.0));
    let b = g.constant(Tensor::zeros(&[1]));
    let y = g.conv2d(xv, w, b, Conv2dSpec { stride: 1, pad: 0 }).unwrap();
    assert_eq!(g.value(y), &x);
}

#[test]
fn conv_all_ones_sums_to_nine() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::filled(&[1, 1, 3, 3], 1.0));
    let w = g.constant(Tensor::filled(&[1, 1, 3, 3], 1.0));
    let b = g.constant(Tensor::zeros(&[1]));
    let y = g.conv2d(x, w, b, Conv2dSpec { stride: 1, pad: 0 }).unwrap();
    assert_eq!(g.value(y).shape(), &[1, 1, 1, 1]);
    assert_eq!(g.value(y).item().unwrap(), 9.0);
}

#[test]
fn conv_kernel_larger_than_padded_input() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[1, 1, 2, 2]));
    let w = g.constant(Tensor::zeros(&[1, 1, 5, 5]));
    let b = g.constant(Tensor::zeros(&[1]));
    let r = g.conv2d(x, w, b, Conv2dSpec { stride: 1, pad: 1 });
    assert!(matches!(r, Err(AutodiffError::Dimension { .. })));
}

#[test]
fn conv_output_size_formula() {
    // floor((in + 2·pad − k)/stride) + 1 for several geometries.
    for (input, k, stride, pad) in [(8, 3, 2, 1), (16, 5, 2, 2), (7, 3, 1, 0), (9, 4, 3, 1)] {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 1, input, input]));
        let w = g.constant(Tensor::zeros(&[2, 1, k, k]));
        let b = g.constant(Tensor::zeros(&[2]));
        let y = g.conv2d(x, w, b, Conv2dSpec { stride, pad }).unwrap();
        let expect = (input + 2 * pad - k) / stride + 1;
        assert_eq!(g.value(y).shape(), &[1, 2, expect, expect]);
    }
}

#[test]
fn conv_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let p = store(vec![
        ("x", random(&mut rng, &[1, 2, 8, 8])),
        ("w", random(&mut rng, &[3, 2, 3, 3])),
        ("b", random(&mut rng, &[3])),
    ]);
    let probe = random(&mut rng, &[1, 3, 4, 4]);
    let r = check_gradients(&p, EPS, |g, s| {
        let x = g.param_from(s, "x")?;
        let w = g.param_from(s, "w")?;
        let b = g.param_from(s, "b")?;
        let y = g.conv2d(x, w, b, Conv2dSpec { stride: 2, pad: 1 })?;
        let pc = g.constant(probe.clone());
        let y = g.mul(y, pc)?;
        g.sum(y)
    })
    .unwrap();
    assert!(r.passes(TOL), "{r:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_sums_to_one(
        values in prop::collection::vec(-50.0f64..50.0, 2..12),
        tau in 0.01f64..10.0,
    ) {
        let rows = 2;
        let cols = values.len() / rows;
        prop_assume!(cols >= 1);
        let data = values[..rows * cols].to_vec();
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![rows, cols], data).unwrap());
        let y = g.softmax_axis(x, 1, tau).unwrap();
        for row in g.value(y).data().chunks(cols) {
            let s: f64 = row.iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn forward_is_deterministic(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random(&mut rng, &[3, 4]);
        let b = random(&mut rng, &[4, 2]);
        let eval = || {
            let mut g = Graph::new();
            let av = g.constant(a.clone());
            let bv = g.constant(b.clone());
            let c = g.matmul(av, bv).unwrap();
            let c = g.sigmoid(c).unwrap();
            let c = g.softmax_axis(c, 1, 0.7).unwrap();
            g.value(c).clone()
        };
        prop_assert_eq!(eval(), eval());
    }
}
