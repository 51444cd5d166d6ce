//! Central finite differences against the tape's reverse-mode gradients.

use adapterseg::autograd::{Matrix, Tape, Var};
use adapterseg::nn::Parameterized;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;

/// Relative error with a floor so entries that are zero up to rounding do
/// not divide by nothing.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-1.0..1.0))
}

fn objective(out: &Matrix, weights: &Matrix) -> f64 {
    (out * weights).sum()
}

/// Checks every trainable parameter of `module` and every entry of `input`
/// under the scalar objective `sum(weights * forward(..))`. Returns the
/// largest relative error and the number of entries checked.
pub fn check_module<M: Parameterized + Clone>(
    module: &M,
    input: &Matrix,
    weights: &Matrix,
    forward: impl Fn(&M, &mut Tape, Var) -> Var,
) -> (f64, usize) {
    let mut tape = Tape::new();
    let x = tape.input(input.clone());
    let out = forward(module, &mut tape, x);
    let grads = tape.backward(&[(out, weights.clone())]).expect("backward");
    let named = grads.named(&tape);
    let input_grad = grads
        .get(x)
        .cloned()
        .unwrap_or_else(|| Array2::zeros(input.dim()));

    let eval = |m: &M, inp: &Matrix| {
        let mut t = Tape::new();
        let xv = t.constant(inp.clone());
        let o = forward(m, &mut t, xv);
        objective(t.value(o), weights)
    };

    let mut worst = 0.0f64;
    let mut checked = 0;
    for (name, grad) in &named {
        for idx in 0..grad.len() {
            let shifted = |delta: f64| {
                let mut m = module.clone();
                for (n, p) in m.parameters_mut() {
                    if &n == name {
                        let flat = p.as_slice_mut().expect("contiguous parameter");
                        flat[idx] += delta;
                    }
                }
                eval(&m, input)
            };
            let numeric = (shifted(STEP) - shifted(-STEP)) / (2.0 * STEP);
            let analytic = grad.as_slice().expect("contiguous gradient")[idx];
            worst = worst.max(relative_error(analytic, numeric));
            checked += 1;
        }
    }
    for idx in 0..input.len() {
        let shifted = |delta: f64| {
            let mut inp = input.clone();
            inp.as_slice_mut().expect("contiguous input")[idx] += delta;
            eval(module, &inp)
        };
        let numeric = (shifted(STEP) - shifted(-STEP)) / (2.0 * STEP);
        worst = worst.max(relative_error(input_grad.as_slice().unwrap()[idx], numeric));
        checked += 1;
    }
    (worst, checked)
}

/// Checks a loss gradient `d loss / d p` on random probabilities.
pub fn check_loss(
    seed: u64,
    loss: impl Fn(&[f64], &[f64]) -> f64,
    grad: impl Fn(&[f64], &[f64]) -> Vec<f64>,
) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let n = rng.gen_range(2..=8);
        let p: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..0.95)).collect();
        let y: Vec<f64> = (0..n)
            .map(|_| if rng.gen_bool(0.4) { 1.0 } else { 0.0 })
            .collect();
        let g = grad(&p, &y);
        for i in 0..n {
            let mut a = p.clone();
            a[i] += STEP;
            let mut b = p.clone();
            b[i] -= STEP;
            let numeric = (loss(&a, &y) - loss(&b, &y)) / (2.0 * STEP);
            worst = worst.max(relative_error(g[i], numeric));
        }
    }
    worst
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
