//! Finite-difference verification oracle for the tape ops.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Params, Tape, Tensor, Var};

/// Compare analytic gradients of a scalar-valued tape program against
/// central differences `(f(x+h) - f(x-h)) / 2h` on a random subset of at
/// least `n_coords` coordinates per input. Runs in f64. Returns the max
/// over checked coordinates of `|analytic - numeric| / max(1, |numeric|)`.
pub fn grad_check<F>(inputs: &[Tensor<f64>], h: f64, n_coords: usize, seed: u64, f: F) -> f64
where
    F: Fn(&Tape<f64>, &[Var]) -> Var,
{
    let mut params = Params::new();
    let ids: Vec<_> = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| params.add(format!("x{i}"), t.clone()))
        .collect();

    let eval = |params: &Params<f64>| -> f64 {
        let tape = Tape::new(params).with_finite_checks();
        let vars: Vec<Var> = ids.iter().map(|&id| tape.param(id)).collect();
        let loss = f(&tape, &vars);
        tape.value(loss).item()
    };

    // analytic gradients
    let grads = {
        let tape = Tape::new(&params).with_finite_checks();
        let vars: Vec<Var> = ids.iter().map(|&id| tape.param(id)).collect();
        let loss = f(&tape, &vars);
        tape.backward(loss)
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0_f64;
    for (i, &id) in ids.iter().enumerate() {
        let len = inputs[i].len();
        let count = n_coords.min(len);
        let coords = sample(&mut rng, len, count);
        for c in coords {
            let orig = params.get(id).data()[c];
            params.get_mut(id).data_mut()[c] = orig + h;
            let fp = eval(&params);
            params.get_mut(id).data_mut()[c] = orig - h;
            let fm = eval(&params);
            params.get_mut(id).data_mut()[c] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let analytic = grads.get(id).map(|g| g.data()[c]).unwrap_or(0.0);
            let err = (analytic - numeric).abs() / numeric.abs().max(1.0);
            if err > worst {
                worst = err;
            }
        }
    }
    worst
}

/// Deterministic pseudo-random tensor for tests, values in [-1, 1).
pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::from_vec(shape, data).unwrap()
}
