use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Weighted sum with fixed random weights so no coordinate of the gradient is
/// structurally zero.
fn weighted_sum(tape: &mut Tape, v: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = tape.value(v).shape().to_vec();
    let w = tape.constant(random(&shape, &mut rng));
    let p = tape.mul(v, w).unwrap();
    tape.sum(p)
}

#[test]
fn square_gradient() {
    let mut tape = Tape::new();
    let x = tape.input(Tensor::scalar(3.0));
    let y = tape.mul(x, x).unwrap();
    let g = tape.backward(y).unwrap();
    assert_eq!(g.wrt(x).unwrap().item(), 6.0);
}

#[test]
fn log_softmax_pick_gradient() {
    let mut tape = Tape::new();
    let x = tape.input(Tensor::vector(vec![0.0, 0.0]));
    let l = tape.log_softmax(x).unwrap();
    let y = tape.pick(l, &[(0, 0)]).unwrap();
    let y = tape.sum(y);
    let g = tape.backward(y).unwrap().wrt(x).unwrap();
    assert!((g.data()[0] - 0.5).abs() < 1e-15);
    assert!((g.data()[1] + 0.5).abs() < 1e-15);
}

#[test]
fn log_softmax_values() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::vector(vec![0.0, 0.0]));
    let l = tape.log_softmax(x).unwrap();
    for v in tape.value(l).data() {
        assert!((v + core::f64::consts::LN_2).abs() < 1e-15);
    }
}

#[test]
fn log_softmax_normalizes_and_is_shift_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let v = random(&[7], &mut rng);
    for shift in [-1e3, -3.5, 0.0, 2.0, 1e3] {
        let mut tape = Tape::new();
        let a = tape.constant(v.clone());
        let b = tape.constant(Tensor::vector(v.data().iter().map(|x| x + shift).collect()));
        let la = tape.log_softmax(a).unwrap();
        let lb = tape.log_softmax(b).unwrap();
        assert!(tape.value(la).max_abs_diff(tape.value(lb)) < 1e-12);
        let total: f64 = tape.value(lb).data().iter().map(|x| crate::math::exp(*x)).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }
}

#[test]
fn log_softmax_rejects_non_finite() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::vector(vec![0.0, f64::NAN]));
    assert_eq!(tape.log_softmax(x), Err(Error::NumericInput("log_softmax")));
    let y = tape.constant(Tensor::vector(vec![f64::INFINITY, 0.0]));
    assert!(tape.log_softmax(y).is_err());
}

#[test]
fn backward_requires_scalar() {
    let mut tape = Tape::new();
    let x = tape.input(Tensor::vector(vec![1.0, 2.0]));
    assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
}

#[test]
fn matmul_shape_error() {
    let mut tape = Tape::new();
    let a = tape.input(Tensor::zeros(&[3, 4]));
    let b = tape.input(Tensor::zeros(&[3, 2]));
    assert!(matches!(tape.matmul(a, b), Err(Error::Shape { .. })));
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let b = random(&[4, 2], &mut rng);
    let a = random(&[3, 4], &mut rng);
    let err = grad_check(
        |t, x| {
            let bv = t.constant(b.clone());
            let p = t.matmul(x, bv).unwrap();
            t.sum(p)
        },
        &a,
        1e-5,
    );
    assert!(err < 1e-6, "{err}");
    let err = grad_check(
        |t, x| {
            let av = t.constant(a.clone());
            let p = t.matmul(av, x).unwrap();
            weighted_sum(t, p, 2)
        },
        &b,
        1e-5,
    );
    assert!(err < 1e-6, "{err}");
}

#[test]
fn constants_and_frozen_params_get_no_gradient() {
    let mut store = ParamStore::new();
    let frozen = store.push("w", Tensor::vector(vec![1.0, 2.0]), false);
    let live = store.push("b", Tensor::vector(vec![0.5, 0.5]), true);
    let mut tape = Tape::new();
    let w = tape.param(&store, frozen);
    let b = tape.param(&store, live);
    let s = tape.mul(w, b).unwrap();
    let s = tape.sum(s);
    let g = tape.backward(s).unwrap();
    assert!(g.wrt(w).is_none());
    g.accumulate_into(&mut store).unwrap();
    assert!(store.get(frozen).grad.is_none());
    assert_eq!(store.get(live).grad.as_ref().unwrap().data(), &[1.0, 2.0]);
}

#[test]
fn repeated_backward_accumulates_into_store() {
    let mut store = ParamStore::new();
    let id = store.push("x", Tensor::scalar(2.0), true);
    for _ in 0..2 {
        let mut tape = Tape::new();
        let x = tape.param(&store, id);
        let y = tape.mul(x, x).unwrap();
        tape.backward(y).unwrap().accumulate_into(&mut store).unwrap();
    }
    assert_eq!(store.get(id).grad.as_ref().unwrap().item(), 8.0);
}

#[test]
fn graph_is_topologically_ordered() {
    let mut tape = Tape::new();
    let x = tape.input(Tensor::vector(vec![1.0, 2.0]));
    let y = tape.exp(x);
    let z = tape.mul(x, y).unwrap();
    let _ = tape.sum(z);
    for rec in tape.records() {
        assert!(rec.inputs.iter().all(|&i| i < rec.output));
    }
    assert_eq!(tape.records().last().unwrap().kind, "sum");
}

#[test]
fn linear_function_has_zero_error() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let p = random(&[6], &mut rng);
    let err = grad_check(|t, x| weighted_sum(t, x, 9), &p, 1e-5);
    assert!(err < 1e-10, "{err}");
}

#[test]
fn sum_of_squares_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let p = random(&[10], &mut rng);
    let err = grad_check(
        |t, x| {
            let sq = t.mul(x, x).unwrap();
            t.sum(sq)
        },
        &p,
        1e-5,
    );
    assert!(err < 1e-7, "{err}");
}

#[test]
fn harness_detects_wrong_gradient() {
    // d/dx x³ is 3x², the fixture claims 2x²
    let point = [0.7, -1.3, 2.0];
    let wrong: Vec<f64> = point.iter().map(|x| 2.0 * x * x).collect();
    let numeric = numeric_gradient(|v| v.iter().map(|x| x * x * x).sum(), &point, 1e-5);
    assert!(max_relative_error(&wrong, &numeric) > 0.1);
}

#[test]
fn nan_propagates() {
    assert!(max_relative_error(&[f64::NAN], &[1.0]).is_nan());
}

#[test]
fn linearity_over_independent_subgraphs() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let a0 = random(&[3], &mut rng);
    let b0 = random(&[3], &mut rng);
    let f = |t: &mut Tape, v: Var| {
        let e = t.exp(v);
        let s = t.sigmoid(e);
        t.sum(s)
    };
    let single = |x0: &Tensor| {
        let mut t = Tape::new();
        let x = t.input(x0.clone());
        let y = f(&mut t, x);
        t.backward(y).unwrap().wrt(x).unwrap()
    };
    let mut t = Tape::new();
    let a = t.input(a0.clone());
    let b = t.input(b0.clone());
    let fa = f(&mut t, a);
    let fb = f(&mut t, b);
    let total = t.add(fa, fb).unwrap();
    let g = t.backward(total).unwrap();
    assert!(g.wrt(a).unwrap().max_abs_diff(&single(&a0)) < 1e-15);
    assert!(g.wrt(b).unwrap().max_abs_diff(&single(&b0)) < 1e-15);
}

/// Every primitive, checked at three random points.
#[test]
fn primitive_gradients() {
    for seed in 0..3u64 {
        for (name, err) in run_primitive_suite(100 + seed, 1e-5) {
            assert!(err < 1e-6, "{name} seed {seed}: {err}");
        }
    }
}

#[test]
fn five_point_differences_are_fourth_order() {
    let point = [0.7, -1.3, 2.0];
    let exact: Vec<f64> = point.iter().map(|x| 5.0 * x * x * x * x).collect();
    let f = |v: &[f64]| v.iter().map(|x| x * x * x * x * x).sum::<f64>();
    let five = numeric_gradient_five_point(f, &point, 1e-3);
    let central = numeric_gradient(f, &point, 1e-3);
    assert!(max_relative_error(&exact, &five) < 1e-11);
    assert!(max_relative_error(&exact, &central) > 1e-8);
}
