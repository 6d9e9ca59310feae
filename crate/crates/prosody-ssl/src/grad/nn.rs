//! Thin layer wrappers binding parameters to tape ops.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::tape::PadMode;
use super::{ParamId, Params, Real, Tape, Tensor, Var};

/// Uniform fan-in initialization: U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
fn fan_in_tensor<T: Real>(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<T> = (0..n)
        .map(|_| T::of_f64(rng.random_range(-bound..bound)))
        .collect();
    Tensor::from_vec(shape, data).unwrap()
}

/// Affine map `[N, in] -> [N, out]`.
#[derive(Debug, Clone)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Dense {
    pub fn new<T: Real>(
        params: &mut Params<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let w = params.add(format!("{name}.w"), fan_in_tensor(&[in_dim, out_dim], in_dim, rng));
        let b = params.add(format!("{name}.b"), Tensor::zeros(&[out_dim]));
        Dense { w, b, in_dim, out_dim }
    }

    pub fn forward<T: Real>(&self, tape: &Tape<T>, x: Var) -> Var {
        let y = tape.matmul(x, tape.param(self.w));
        tape.add_bias(y, tape.param(self.b))
    }
}

/// 1-D convolution over `[B, T, Cin] -> [B, T_out, Cout]`.
#[derive(Debug, Clone)]
pub struct Conv1d {
    pub w: ParamId,
    pub b: ParamId,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub mode: PadMode,
    pub cin: usize,
    pub cout: usize,
}

impl Conv1d {
    pub fn new<T: Real>(
        params: &mut Params<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        mode: PadMode,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = kernel * cin;
        let w = params.add(format!("{name}.w"), fan_in_tensor(&[fan_in, cout], fan_in, rng));
        let b = params.add(format!("{name}.b"), Tensor::zeros(&[cout]));
        Conv1d { w, b, kernel, stride, pad, mode, cin, cout }
    }

    pub fn forward<T: Real>(&self, tape: &Tape<T>, x: Var) -> Var {
        tape.conv1d(
            x,
            tape.param(self.w),
            tape.param(self.b),
            self.kernel,
            self.stride,
            self.pad,
            self.mode,
        )
    }
}

/// Single-layer LSTM over `[B, T, Cin] -> [B, T, H]`.
#[derive(Debug, Clone)]
pub struct Lstm {
    pub wx: ParamId,
    pub wh: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub hidden: usize,
}

impl Lstm {
    pub fn new<T: Real>(
        params: &mut Params<T>,
        name: &str,
        in_dim: usize,
        hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let wx = params.add(
            format!("{name}.wx"),
            fan_in_tensor(&[in_dim, 4 * hidden], in_dim, rng),
        );
        let wh = params.add(
            format!("{name}.wh"),
            fan_in_tensor(&[hidden, 4 * hidden], hidden, rng),
        );
        let b = params.add(format!("{name}.b"), Tensor::zeros(&[4 * hidden]));
        Lstm { wx, wh, b, in_dim, hidden }
    }

    pub fn forward<T: Real>(&self, tape: &Tape<T>, x: Var) -> Var {
        tape.lstm_seq(x, tape.param(self.wx), tape.param(self.wh), tape.param(self.b))
    }
}
