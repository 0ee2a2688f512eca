//! Five-point central differences against reverse-mode gradients for every
//! tape primitive.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use replaylens::tape::{Tape, Var};
use replaylens::{Result, Tensor};

const SEEDS: u64 = 50;
const STEP: f64 = 1e-3;
const TOL: f64 = 1e-6;

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Relative error with a floor on the denominator so that coordinates whose
/// true gradient is zero are compared absolutely.
fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

/// Checks `d/dinputs Σ f(inputs) ⊙ R` for a fixed random `R`.
fn check<F>(name: &str, inputs: Vec<Tensor>, seed: u64, f: F)
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let loss = |xs: &[Tensor], r: Option<&Tensor>| -> (f64, Vec<Tensor>, Tensor) {
        let tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
        let out = f(&tape, &vars).unwrap();
        let shape = out.shape();
        let r = match r {
            Some(r) => r.clone(),
            None => random(&mut ChaCha8Rng::seed_from_u64(seed), &shape, -1.0, 1.0),
        };
        let l = out.mul(&tape.constant(r.clone())).unwrap().sum();
        let value = l.value().item().unwrap();
        let g = tape.backward(l).unwrap();
        (value, vars.iter().map(|v| g.get_or_zeros(*v)).collect(), r)
    };
    let (_, grads, r) = loss(&inputs, None);
    for (k, x) in inputs.iter().enumerate() {
        for j in 0..x.len() {
            let at = |h: f64| {
                let mut xs = inputs.clone();
                xs[k].data_mut()[j] += h;
                loss(&xs, Some(&r)).0
            };
            let fd = (8.0 * (at(STEP) - at(-STEP)) - (at(2.0 * STEP) - at(-2.0 * STEP))) / (12.0 * STEP);
            let an = grads[k].data()[j];
            assert!(
                rel_err(an, fd) < TOL,
                "{name} seed {seed}: input {k} coord {j}: analytic {an} vs numeric {fd}"
            );
        }
    }
}

fn each_seed(mut body: impl FnMut(u64, &mut ChaCha8Rng)) {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        body(seed, &mut rng);
    }
}

#[test]
fn matmul() {
    each_seed(|s, rng| {
        let a = random(rng, &[3, 4], -1.0, 1.0);
        let b = random(rng, &[4, 2], -1.0, 1.0);
        check("matmul", vec![a, b], s, |_, v| v[0].matmul(&v[1]));
    });
}

#[test]
fn add_with_row_broadcast() {
    each_seed(|s, rng| {
        let a = random(rng, &[3, 4], -1.0, 1.0);
        let b = random(rng, &[4], -1.0, 1.0);
        let c = random(rng, &[3, 4], -1.0, 1.0);
        check("add", vec![a, b, c], s, |_, v| v[0].add(&v[1])?.add(&v[2]));
    });
}

#[test]
fn mul_and_scale() {
    each_seed(|s, rng| {
        let a = random(rng, &[2, 5], -1.0, 1.0);
        let b = random(rng, &[2, 5], -1.0, 1.0);
        check("mul", vec![a, b], s, |_, v| Ok(v[0].mul(&v[1])?.scale(-1.7)));
    });
}

#[test]
fn gelu() {
    each_seed(|s, rng| {
        let a = random(rng, &[3, 3], -3.0, 3.0);
        check("gelu", vec![a], s, |_, v| Ok(v[0].gelu()));
    });
}

#[test]
fn log_above_floor() {
    each_seed(|s, rng| {
        let a = random(rng, &[2, 4], 0.1, 2.0);
        check("log", vec![a], s, |_, v| Ok(v[0].log()));
    });
}

#[test]
fn sum_and_mean() {
    each_seed(|s, rng| {
        let a = random(rng, &[3, 4], -1.0, 1.0);
        check("sum", vec![a.clone()], s, |_, v| Ok(v[0].sum()));
        check("mean", vec![a], s, |_, v| Ok(v[0].mean()));
    });
}

#[test]
fn reshape_and_transpose() {
    each_seed(|s, rng| {
        let a = random(rng, &[3, 4], -1.0, 1.0);
        check("reshape", vec![a.clone()], s, |_, v| v[0].reshape(&[2, 6]));
        check("transpose", vec![a], s, |_, v| v[0].transpose());
    });
}

#[test]
fn softmax_and_log_softmax() {
    each_seed(|s, rng| {
        let a = random(rng, &[3, 5], -3.0, 3.0);
        check("softmax", vec![a.clone()], s, |_, v| Ok(v[0].softmax()));
        check("log_softmax", vec![a], s, |_, v| Ok(v[0].log_softmax()));
    });
}

#[test]
fn layer_norm() {
    each_seed(|s, rng| {
        let a = random(rng, &[3, 6], -2.0, 2.0);
        let g = random(rng, &[6], 0.5, 1.5);
        let b = random(rng, &[6], -0.5, 0.5);
        check("layer_norm", vec![a, g, b], s, |_, v| v[0].layer_norm(&v[1], &v[2]));
    });
}

#[test]
fn embedding() {
    each_seed(|s, rng| {
        let table = random(rng, &[6, 3], -1.0, 1.0);
        let ids: Vec<usize> = (0..5).map(|_| rng.random_range(0..6)).collect();
        check("embedding", vec![table], s, move |_, v| v[0].embedding(&ids));
    });
}

#[test]
fn causal_attention() {
    each_seed(|s, rng| {
        let q = random(rng, &[4, 6], -1.0, 1.0);
        let k = random(rng, &[4, 6], -1.0, 1.0);
        let v = random(rng, &[4, 6], -1.0, 1.0);
        check("attention", vec![q, k, v], s, |_, x| x[0].causal_attention(&x[1], &x[2], 2));
    });
}

#[test]
fn row_operations() {
    each_seed(|s, rng| {
        let a = random(rng, &[5, 3], -1.0, 1.0);
        let b = random(rng, &[2, 3], -1.0, 1.0);
        let fixed: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        check("rows", vec![a.clone()], s, |_, v| v[0].rows(1, 3));
        check("add_rows", vec![a.clone(), b.clone()], s, |_, v| v[0].add_rows(&v[1], 2));
        check("concat_rows", vec![a.clone(), b], s, |_, v| Var::concat_rows(&[v[0], v[1]]));
        let fixed = fixed.clone();
        check("splice_rows", vec![a], s, move |_, v| v[0].splice_rows(&[(3, fixed.clone())]));
    });
}

#[test]
fn composed_block() {
    each_seed(|s, rng| {
        let x = random(rng, &[4, 4], -1.0, 1.0);
        let w = random(rng, &[4, 4], -1.0, 1.0);
        let g = random(rng, &[4], 0.5, 1.5);
        let b = random(rng, &[4], -0.5, 0.5);
        check("block", vec![x, w, g, b], s, |_, v| {
            let y = v[0].layer_norm(&v[2], &v[3])?;
            let q = y.matmul(&v[1])?;
            let a = q.causal_attention(&y, &y, 2)?;
            Ok(v[0].add(&a.gelu())?.softmax().log())
        });
    });
}

#[test]
fn log_below_floor_passes_no_gradient() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::vector(vec![1e-20, 0.5]));
    let g = tape.backward(x.log().sum()).unwrap();
    let g = g.get_or_zeros(x);
    assert_eq!(g.data()[0], 0.0);
    assert!((g.data()[1] - 2.0).abs() < 1e-15);
}
