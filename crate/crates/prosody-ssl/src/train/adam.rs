//! Adam optimizer with bias correction.

use crate::error::{Error, Result};
use crate::grad::{Grads, Params, Real, Tensor};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Per-parameter first/second moment estimates plus the step counter.
#[derive(Debug, Clone)]
pub struct AdamState<T: Real> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &Params<T>) -> Self {
        let m = (0..params.len())
            .map(|i| Tensor::zeros(params.get(crate::grad::ParamId(i)).shape()))
            .collect::<Vec<_>>();
        let v = m.clone();
        AdamState { m, v, step: 0, beta1: ADAM_BETA1, beta2: ADAM_BETA2, eps: ADAM_EPS }
    }
}

/// One bias-corrected Adam update. A missing gradient is treated as zero
/// (moments decay, the bias-corrected update stays exactly zero for
/// never-touched parameters). NaN gradients abort with the parameter name.
pub fn adam_step<T: Real>(
    params: &mut Params<T>,
    grads: &Grads<T>,
    state: &mut AdamState<T>,
    lr: f64,
    grad_clip: Option<f64>,
) -> Result<()> {
    state.step += 1;
    let b1 = T::of_f64(state.beta1);
    let b2 = T::of_f64(state.beta2);
    let one = T::one();
    let corr1 = T::of_f64(1.0 - state.beta1.powi(state.step as i32));
    let corr2 = T::of_f64(1.0 - state.beta2.powi(state.step as i32));
    let lr_t = T::of_f64(lr);
    let eps = T::of_f64(state.eps);
    let clip = grad_clip.map(T::of_f64);

    for i in 0..params.len() {
        let id = crate::grad::ParamId(i);
        let g = grads.get(id);
        if let Some(g) = g {
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of {}", params.name(id))));
            }
        }
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        let p = params.get_mut(id);
        for j in 0..p.len() {
            let mut gj = g.map(|g| g.data()[j]).unwrap_or_else(T::zero);
            if let Some(c) = clip {
                if gj > c {
                    gj = c;
                } else if gj < -c {
                    gj = -c;
                }
            }
            let mj = b1 * m.data()[j] + (one - b1) * gj;
            let vj = b2 * v.data()[j] + (one - b2) * gj * gj;
            m.data_mut()[j] = mj;
            v.data_mut()[j] = vj;
            let m_hat = mj / corr1;
            let v_hat = vj / corr2;
            p.data_mut()[j] = p.data()[j] - lr_t * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grad::Params;

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut params = Params::<f64>::new();
        let id = params.add("w", Tensor::from_vec(&[2], vec![1.5, -0.5]).unwrap());
        let before = params.get(id).clone();
        let mut state = AdamState::new(&params);
        // backward over a graph that never touches w -> no gradient entry
        let tape = crate::grad::Tape::new(&params);
        let x = tape.input(Tensor::scalar(3.0));
        let loss = tape.mean_all(x);
        let grads = tape.backward(loss);
        adam_step(&mut params, &grads, &mut state, 0.001, None).unwrap();
        assert_eq!(params.get(id), &before);
    }

    #[test]
    fn first_step_matches_closed_form() {
        // single scalar, g = 1, fresh state, lr = 0.001:
        // m_hat = 1, v_hat = 1 -> delta = -lr / (1 + eps)
        let mut params = Params::<f64>::new();
        let id = params.add("w", Tensor::scalar(0.0));
        let mut state = AdamState::new(&params);
        let tape = crate::grad::Tape::new(&params);
        let w = tape.param(id);
        let loss = tape.mean_all(w); // d loss / d w = 1
        let grads = tape.backward(loss);
        adam_step(&mut params, &grads, &mut state, 0.001, None).unwrap();
        let got = params.get(id).item();
        let want = -0.001 * (1.0 / (1.0 + 1e-8));
        assert!((got - want).abs() < 1e-15, "got {got} want {want}");
        assert!((got - (-0.000999999990)).abs() < 1e-12);
    }

    #[test]
    fn identical_runs_are_bit_identical() {
        let run = || {
            let mut params = Params::<f32>::new();
            let id = params.add("w", Tensor::from_vec(&[3], vec![0.3, -0.7, 1.1]).unwrap());
            let mut state = AdamState::new(&params);
            for _ in 0..5 {
                let tape = crate::grad::Tape::new(&params);
                let w = tape.param(id);
                let loss = tape.mse_loss(w, tape.input(Tensor::zeros(&[3])));
                let grads = tape.backward(loss);
                adam_step(&mut params, &grads, &mut state, 0.01, None).unwrap();
            }
            params.get(id).data().to_vec()
        };
        let a = run();
        let b = run();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn nan_gradient_aborts_with_name() {
        let mut params = Params::<f64>::new();
        let id = params.add("enc.w", Tensor::scalar(1.0));
        let mut state = AdamState::new(&params);
        let tape = crate::grad::Tape::new(&params);
        let w = tape.param(id);
        // ln of a negative number -> NaN loss and gradient
        let bad = tape.input(Tensor::scalar(f64::NAN));
        let loss = tape.mean_all(tape.mul(w, bad));
        let grads = tape.backward(loss);
        let err = adam_step(&mut params, &grads, &mut state, 0.001, None).unwrap_err();
        assert!(err.to_string().contains("enc.w"), "{err}");
    }
}
