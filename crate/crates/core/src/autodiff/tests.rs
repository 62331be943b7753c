use super::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

#[test]
fn matmul_identity_leaves_vector_unchanged() {
    let mut g = Graph::new();
    let eye = g.constant(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let v = g.constant(vec![2, 1], vec![3.5, -2.0]).unwrap();
    let out = g.matmul(eye, v).unwrap();
    assert_eq!(g.value(out), &[3.5, -2.0]);
}

#[test]
fn softmax_of_equal_logits_is_uniform() {
    let mut g = Graph::new();
    let x = g.constant(vec![2], vec![0.0, 0.0]).unwrap();
    let y = g.softmax(x);
    assert_eq!(g.value(y), &[0.5, 0.5]);
}

#[test]
fn log_softmax_matches_high_precision_values() {
    // mpmath, 40 digits
    let expected = [
        -2.407_605_964_444_380_3,
        -1.407_605_964_444_380_3,
        -0.407_605_964_444_380_3,
    ];
    let mut g = Graph::new();
    let x = g.constant(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
    let y = g.log_softmax(x);
    for (a, b) in g.value(y).iter().zip(expected) {
        assert!((a - b).abs() < 1e-15, "{a} vs {b}");
    }
    let total: f64 = g.value(y).iter().map(|v| v.exp()).sum();
    assert!((total - 1.0).abs() < 1e-15);
}

#[test]
fn square_has_gradient_six_at_three() {
    let mut g = Graph::new();
    let x = g.leaf(vec![1], vec![3.0], true).unwrap();
    let y = g.mul(x, x).unwrap();
    let grads = g.backward(y).unwrap();
    assert_eq!(grads.get(x).unwrap(), &[6.0]);
}

#[test]
fn sum_of_softmax_has_zero_gradient() {
    let mut g = Graph::new();
    let x = g.leaf(vec![4], vec![0.3, -1.2, 2.0, 0.7], true).unwrap();
    let s = g.softmax(x);
    let y = g.sum(s);
    let grads = g.backward(y).unwrap();
    for v in grads.get(x).unwrap() {
        assert!(v.abs() < 1e-15);
    }
}

fn mlp(g: &mut Graph, x: Var, weights: &[(Tensor, Tensor)]) -> Result<Var, AutodiffError> {
    let mut h = x;
    for (i, (w, b)) in weights.iter().enumerate() {
        let w = g.input(w)?;
        let b = g.input(b)?;
        h = g.matmul(h, w)?;
        h = g.add(h, b)?;
        if i + 1 < weights.len() {
            h = g.relu(h);
        }
    }
    Ok(g.sum(h))
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    t(shape, &(0..n).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>())
}

#[test]
fn three_layer_mlp_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let weights = vec![
        (random_tensor(&mut rng, &[4, 5]), random_tensor(&mut rng, &[5])),
        (random_tensor(&mut rng, &[5, 5]), random_tensor(&mut rng, &[5])),
        (random_tensor(&mut rng, &[5, 1]), random_tensor(&mut rng, &[1])),
    ];
    let x = random_tensor(&mut rng, &[3, 4]);
    let err = finite_diff_check(|g, v| mlp(g, v, &weights), &x, 1e-5).unwrap();
    assert!(err < 1e-4, "relative error {err}");
}

#[test]
fn linear_function_derivative_is_exact() {
    let w = t(&[4], &[0.5, -1.25, 2.0, 3.0]);
    let x = t(&[4], &[1.0, 2.0, -3.0, 0.25]);
    let err = finite_diff_check(
        |g, v| {
            let w = g.input(&w)?;
            let p = g.mul(v, w)?;
            Ok(g.sum(p))
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-10, "relative error {err}");
}

#[test]
fn constant_function_has_zero_gradients() {
    let x = t(&[3], &[1.0, 2.0, 3.0]);
    let err = finite_diff_check(|g, _| g.constant(vec![1], vec![4.0]), &x, 1e-5).unwrap();
    assert_eq!(err, 0.0);
}

#[test]
fn nondeterministic_function_is_detected() {
    let counter = std::cell::Cell::new(0.0);
    let x = t(&[2], &[1.0, 2.0]);
    let res = finite_diff_check(
        |g, v| {
            counter.set(counter.get() + 1.0);
            let s = g.sum(v);
            let c = g.constant(vec![1], vec![counter.get()])?;
            g.add(s, c)
        },
        &x,
        1e-5,
    );
    assert!(matches!(res, Err(AutodiffError::NonDeterministic { .. })));
}

#[test]
fn step_must_be_positive() {
    let x = t(&[1], &[1.0]);
    assert!(matches!(
        finite_diff_check(|g, v| Ok(g.sum(v)), &x, 0.0),
        Err(AutodiffError::InvalidStep(_))
    ));
}

#[test]
fn shape_mismatch_names_op_and_shapes() {
    let mut g = Graph::new();
    let a = g.constant(vec![2, 3], vec![0.0; 6]).unwrap();
    let b = g.constant(vec![2, 3], vec![0.0; 6]).unwrap();
    let err = g.matmul(a, b).unwrap_err();
    assert_eq!(
        err,
        AutodiffError::ShapeMismatch {
            op: "matmul",
            lhs: vec![2, 3],
            rhs: vec![2, 3]
        }
    );
    assert!(err.to_string().contains("matmul"));
}

#[test]
fn non_finite_inputs_are_rejected() {
    let mut g = Graph::new();
    assert_eq!(
        g.leaf(vec![2], vec![1.0, f64::NAN], true),
        Err(AutodiffError::NonFiniteInput { index: 1 })
    );
}

#[test]
fn backward_requires_scalar_seed_from_this_graph() {
    let mut g = Graph::new();
    let x = g.leaf(vec![2], vec![1.0, 2.0], true).unwrap();
    assert!(matches!(g.backward(x), Err(AutodiffError::SeedNotScalar { .. })));

    let mut other = Graph::new();
    let a = other.leaf(vec![1], vec![1.0], true).unwrap();
    let b = other.scale(a, 2.0);
    assert_eq!(Graph::new().backward(b).unwrap_err(), AutodiffError::BackwardBeforeForward);
}

#[test]
fn unreachable_leaves_get_zero_gradients() {
    let mut g = Graph::new();
    let x = g.leaf(vec![2], vec![1.0, 2.0], true).unwrap();
    let unused = g.leaf(vec![3], vec![1.0, 2.0, 3.0], true).unwrap();
    let y = g.sum(x);
    let grads = g.backward(y).unwrap();
    assert_eq!(grads.get(unused).unwrap(), &[0.0, 0.0, 0.0]);
}

#[test]
fn constants_never_receive_gradients() {
    let mut g = Graph::new();
    let w = g.constant(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let x = g.leaf(vec![1, 2], vec![1.0, 1.0], true).unwrap();
    let y = g.matmul(x, w).unwrap();
    let s = g.sum(y);
    let grads = g.backward(s).unwrap();
    assert!(grads.get(w).is_none());
    assert_eq!(grads.get(x).unwrap(), &[3.0, 7.0]);
}

#[test]
fn dropout_mask_is_reused_in_backward() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut g = Graph::new();
    let x = g.leaf(vec![50], vec![1.0; 50], true).unwrap();
    let d = g.dropout(x, 0.5, &mut rng);
    let y = g.sum(d);
    let grads = g.backward(y).unwrap();
    assert_eq!(grads.get(x).unwrap(), g.value(d));
    assert!(g.value(d).iter().all(|&v| v == 0.0 || v == 2.0));
}

#[test]
fn identical_graphs_are_bit_identical() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut g = Graph::new();
        let x = g.leaf(vec![3, 4], (0..12).map(|i| (i as f64).sin()).collect(), true).unwrap();
        let d = g.dropout(x, 0.1, &mut rng);
        let s = g.log_softmax(d);
        let y = g.mean(s);
        let grads = g.backward(y).unwrap();
        (g.scalar_value(y).to_bits(), grads.get(x).unwrap().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
    };
    assert_eq!(run(), run());
}

#[test]
fn backward_is_linear_in_the_objective() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..20 {
        let x = random_tensor(&mut rng, &[3, 4]);
        let (a, b) = (rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
        let grad_of = |ca: f64, cb: f64| {
            let mut g = Graph::new();
            let v = g.input(&x.clone().with_requires_grad(true)).unwrap();
            let f = g.log_softmax(v);
            let f = g.sum(f);
            let sq = g.mul(v, v).unwrap();
            let gg = g.mean(sq);
            let f = g.scale(f, ca);
            let gg = g.scale(gg, cb);
            let y = g.add(f, gg).unwrap();
            g.backward(y).unwrap().get(v).unwrap().to_vec()
        };
        let combined = grad_of(a, b);
        let fa = grad_of(1.0, 0.0);
        let gb = grad_of(0.0, 1.0);
        for i in 0..combined.len() {
            let expected = a * fa[i] + b * gb[i];
            let rel = (combined[i] - expected).abs() / expected.abs().max(1e-8);
            assert!(rel < 1e-10, "{} vs {}", combined[i], expected);
        }
    }
}
