use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Tape, Var};
use crate::tensor::Tensor;

/// Central finite differences of `f` at `point`, one coordinate at a time.
pub fn numeric_gradient<F: FnMut(&[f64]) -> f64>(mut f: F, point: &[f64], step: f64) -> Vec<f64> {
    let mut x = point.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + step;
            let up = f(&x);
            x[i] = orig - step;
            let down = f(&x);
            x[i] = orig;
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// Fourth-order differences `(−f(x+2h) + 8f(x+h) − 8f(x−h) + f(x−2h)) / 12h`,
/// one coordinate at a time. Accurate to far smaller absolute errors than
/// [`numeric_gradient`] on deep compositions, where coordinates with tiny
/// gradients otherwise drown in rounding noise.
pub fn numeric_gradient_five_point<F: FnMut(&[f64]) -> f64>(mut f: F, point: &[f64], step: f64) -> Vec<f64> {
    let mut x = point.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            let mut at = |d: f64| {
                x[i] = orig + d;
                let v = f(&x);
                x[i] = orig;
                v
            };
            (-at(2.0 * step) + 8.0 * at(step) - 8.0 * at(-step) + at(-2.0 * step)) / (12.0 * step)
        })
        .collect()
}

/// `max_i |a_i − n_i| / max(1e-12, |a_i| + |n_i|)`. NaN anywhere yields NaN.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let mut worst: f64 = 0.0;
    for (a, n) in analytic.iter().zip(numeric) {
        let e = (a - n).abs() / f64::max(1e-12, a.abs() + n.abs());
        if e.is_nan() {
            return f64::NAN;
        }
        worst = worst.max(e);
    }
    worst
}

/// Compares the tape gradient of a scalar function against central
/// differences and returns the worst relative error over all coordinates.
///
/// `f` must build a scalar from its input on the given tape.
pub fn grad_check<F>(f: F, point: &Tensor, step: f64) -> f64
where
    F: Fn(&mut Tape, Var) -> Var,
{
    assert!(step > 0.0, "finite-difference step must be positive");
    let mut tape = Tape::new();
    let x = tape.input(point.clone());
    let y = f(&mut tape, x);
    let analytic = match tape.backward(y) {
        Ok(g) => g
            .wrt(x)
            .map(Tensor::into_data)
            .unwrap_or_else(|| alloc::vec![0.0; point.numel()]),
        Err(_) => return f64::NAN,
    };
    let numeric = numeric_gradient(
        |v| {
            let mut tape = Tape::new();
            let t = Tensor::new(point.shape().to_vec(), v.to_vec()).expect("same shape");
            let x = tape.input(t);
            let y = f(&mut tape, x);
            tape.scalar(y)
        },
        point.data(),
        step,
    );
    max_relative_error(&analytic, &numeric)
}

/// Builds a scalar from a tensor input on a tape.
pub type PrimitiveBuild = fn(&mut Tape, Var) -> Var;

/// One primitive exercised by the gradient suite: its name, the shape of the
/// random input and the scalar function wrapping it.
pub struct PrimitiveCase {
    pub name: &'static str,
    pub shape: Vec<usize>,
    pub build: PrimitiveBuild,
}

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("shape")
}

/// Weighted sum with fixed random weights so no coordinate of the gradient is
/// structurally zero.
fn weighted_sum(tape: &mut Tape, v: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = tape.value(v).shape().to_vec();
    let w = tape.constant(random_tensor(&shape, &mut rng));
    let p = tape.mul(v, w).expect("same shape");
    tape.sum(p)
}

/// Every differentiable primitive of the tape wrapped into a scalar function.
pub fn primitive_cases() -> Vec<PrimitiveCase> {
    let cases: Vec<(&'static str, Vec<usize>, PrimitiveBuild)> = vec![
        ("matmul", vec![3, 4], |t, x| {
            let w = t.constant(
                Tensor::new(vec![4, 2], (0..8).map(|i| 0.1 * i as f64 - 0.3).collect()).expect("fixture shapes agree"),
            );
            let p = t.matmul(x, w).expect("fixture shapes agree");
            weighted_sum(t, p, 1)
        }),
        ("matmul_nt", vec![3, 4], |t, x| {
            let p = t.matmul_nt(x, x).expect("fixture shapes agree");
            weighted_sum(t, p, 2)
        }),
        ("transpose", vec![2, 3], |t, x| {
            let p = t.transpose(x).expect("fixture shapes agree");
            weighted_sum(t, p, 3)
        }),
        ("add", vec![5], |t, x| {
            let e = t.exp(x);
            let p = t.add(x, e).expect("fixture shapes agree");
            weighted_sum(t, p, 4)
        }),
        ("sub", vec![5], |t, x| {
            let e = t.exp(x);
            let p = t.sub(e, x).expect("fixture shapes agree");
            weighted_sum(t, p, 5)
        }),
        ("multiply", vec![5], |t, x| {
            let p = t.mul(x, x).expect("fixture shapes agree");
            weighted_sum(t, p, 6)
        }),
        ("scale", vec![4], |t, x| {
            let p = t.scale(x, -2.5);
            let p = t.mul(p, x).expect("fixture shapes agree");
            weighted_sum(t, p, 7)
        }),
        ("add_row", vec![4], |t, x| {
            let m = t.constant(
                Tensor::new(vec![3, 4], (0..12).map(|i| i as f64 * 0.05).collect()).expect("fixture shapes agree"),
            );
            let p = t.add_row(m, x).expect("fixture shapes agree");
            let p = t.mul(p, p).expect("fixture shapes agree");
            weighted_sum(t, p, 8)
        }),
        ("mul_row", vec![4], |t, x| {
            let m = t.constant(
                Tensor::new(vec![3, 4], (0..12).map(|i| i as f64 * 0.1 - 0.5).collect()).expect("fixture shapes agree"),
            );
            let p = t.mul_row(m, x).expect("fixture shapes agree");
            weighted_sum(t, p, 9)
        }),
        ("embedding_gather", vec![5, 3], |t, x| {
            let p = t.gather_rows(x, &[4, 0, 4, 2]).expect("fixture shapes agree");
            let p = t.mul(p, p).expect("fixture shapes agree");
            weighted_sum(t, p, 10)
        }),
        ("slice_concat", vec![3, 4], |t, x| {
            let a = t.slice_cols(x, 0, 2).expect("fixture shapes agree");
            let b = t.slice_cols(x, 2, 2).expect("fixture shapes agree");
            let c = t.concat_cols(&[b, a]).expect("fixture shapes agree");
            let r = t.slice_rows(c, 1, 2).expect("fixture shapes agree");
            let r = t.mul(r, r).expect("fixture shapes agree");
            weighted_sum(t, r, 11)
        }),
        ("layer_norm", vec![3, 5], |t, x| {
            let p = t.layer_norm(x, 1e-5);
            weighted_sum(t, p, 12)
        }),
        ("gelu", vec![6], |t, x| {
            let p = t.gelu(x);
            weighted_sum(t, p, 13)
        }),
        ("log_softmax", vec![2, 5], |t, x| {
            let p = t.log_softmax(x).expect("fixture shapes agree");
            weighted_sum(t, p, 14)
        }),
        ("causal_softmax", vec![4, 4], |t, x| {
            let p = t.causal_softmax(x).expect("fixture shapes agree");
            weighted_sum(t, p, 15)
        }),
        ("pick", vec![3, 3], |t, x| {
            let p = t.exp(x);
            let p = t.pick(p, &[(0, 1), (2, 2), (0, 1)]).expect("fixture shapes agree");
            weighted_sum(t, p, 16)
        }),
        ("sum", vec![4], |t, x| {
            let e = t.exp(x);
            t.sum(e)
        }),
        ("mean", vec![4], |t, x| {
            let e = t.exp(x);
            t.mean(e).expect("fixture shapes agree")
        }),
        ("sigmoid", vec![5], |t, x| {
            let p = t.sigmoid(x);
            weighted_sum(t, p, 17)
        }),
        ("log_sigmoid", vec![5], |t, x| {
            let p = t.log_sigmoid(x);
            weighted_sum(t, p, 18)
        }),
        ("log", vec![5], |t, x| {
            let e = t.exp(x);
            let p = t.log(e);
            let p = t.mul(p, p).expect("fixture shapes agree");
            weighted_sum(t, p, 19)
        }),
        ("exp", vec![5], |t, x| {
            let p = t.exp(x);
            weighted_sum(t, p, 20)
        }),
    ];
    cases
        .into_iter()
        .map(|(name, shape, build)| PrimitiveCase { name, shape, build })
        .collect()
}

/// Runs [`grad_check`] for every primitive at one random point drawn from
/// `seed`, returning `(name, max relative error)` pairs.
pub fn run_primitive_suite(seed: u64, step: f64) -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    primitive_cases()
        .into_iter()
        .map(|case| {
            let point = random_tensor(&case.shape, &mut rng);
            (case.name, grad_check(case.build, &point, step))
        })
        .collect()
}
