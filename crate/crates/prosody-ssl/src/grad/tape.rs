use std::cell::RefCell;

use super::tensor::{matmul_into, matmul_nt_into, matmul_tn_into};
use super::{ParamId, Params, Real, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Boundary handling for [`Tape::conv1d`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PadMode {
    /// Out-of-range taps read zero.
    Zero,
    /// Out-of-range taps wrap around the time axis.
    Circular,
}

type BackwardFn<T> =
    Box<dyn FnOnce(&Tensor<T>, &[&Tensor<T>], &Tensor<T>) -> Vec<Tensor<T>>>;

enum GradFn<T> {
    Leaf,
    Op(BackwardFn<T>),
}

struct Node<T: Real> {
    value: Tensor<T>,
    parents: Vec<usize>,
    grad_fn: GradFn<T>,
}

/// Recorded op graph for one forward pass. Ops append nodes; `backward`
/// traverses in reverse insertion order (a valid reverse topological order
/// since parents always precede children).
pub struct Tape<'p, T: Real> {
    params: &'p Params<T>,
    nodes: RefCell<Vec<Node<T>>>,
    param_leaves: RefCell<Vec<(usize, usize)>>, // (param index, node id)
    check_finite: bool,
}

/// Per-parameter gradients produced by [`Tape::backward`]. Parameters that
/// did not contribute to the loss have no entry and read as zero.
pub struct Grads<T: Real> {
    by_param: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Grads<T> {
    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.by_param[id.0].as_ref()
    }

    pub fn iter(&self) -> impl Iterator<Item = Option<&Tensor<T>>> {
        self.by_param.iter().map(|g| g.as_ref())
    }
}

impl<'p, T: Real> Tape<'p, T> {
    pub fn new(params: &'p Params<T>) -> Self {
        Tape {
            params,
            nodes: RefCell::new(Vec::new()),
            param_leaves: RefCell::new(Vec::new()),
            check_finite: false,
        }
    }

    /// Scan every op output for NaN/Inf and panic immediately. Slow; meant
    /// for verification runs and tests.
    pub fn with_finite_checks(mut self) -> Self {
        self.check_finite = true;
        self
    }

    fn push(&self, value: Tensor<T>, parents: Vec<usize>, grad_fn: GradFn<T>) -> Var {
        if self.check_finite {
            assert!(value.is_finite(), "non-finite value produced on tape");
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, parents, grad_fn });
        Var(nodes.len() - 1)
    }

    /// Constant leaf; no gradient is tracked for it.
    pub fn input(&self, value: Tensor<T>) -> Var {
        self.push(value, vec![], GradFn::Leaf)
    }

    /// Leaf bound to a parameter; its gradient is collected by `backward`.
    pub fn param(&self, id: ParamId) -> Var {
        let v = self.push(self.params.get(id).clone(), vec![], GradFn::Leaf);
        self.param_leaves.borrow_mut().push((id.0, v.0));
        v
    }

    /// Copy of a recorded value (detached from the graph).
    pub fn value(&self, v: Var) -> Tensor<T> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    /// Stop-gradient: re-enter the value as a constant leaf.
    pub fn detach(&self, v: Var) -> Var {
        let value = self.value(v);
        self.input(value)
    }

    // ---- elementwise ----------------------------------------------------

    fn binary_same_shape(
        &self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        back: impl FnOnce(&Tensor<T>, &Tensor<T>, &Tensor<T>) -> (Tensor<T>, Tensor<T>) + 'static,
    ) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
            assert_eq!(
                va.shape(),
                vb.shape(),
                "{op}: shape mismatch {:?} vs {:?}",
                va.shape(),
                vb.shape()
            );
            let data = va
                .data()
                .iter()
                .zip(vb.data().iter())
                .map(|(&x, &y)| f(x, y))
                .collect();
            Tensor::from_vec(va.shape(), data).unwrap()
        };
        self.push(
            value,
            vec![a.0, b.0],
            GradFn::Op(Box::new(move |g, parents, _| {
                let (ga, gb) = back(g, parents[0], parents[1]);
                vec![ga, gb]
            })),
        )
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        self.binary_same_shape("add", a, b, |x, y| x + y, |g, _, _| (g.clone(), g.clone()))
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        self.binary_same_shape(
            "sub",
            a,
            b,
            |x, y| x - y,
            |g, _, _| (g.clone(), g.map(|v| -v)),
        )
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        self.binary_same_shape(
            "mul",
            a,
            b,
            |x, y| x * y,
            |g, pa, pb| {
                let ga = Tensor::from_vec(
                    g.shape(),
                    g.data().iter().zip(pb.data()).map(|(&gv, &y)| gv * y).collect(),
                )
                .unwrap();
                let gb = Tensor::from_vec(
                    g.shape(),
                    g.data().iter().zip(pa.data()).map(|(&gv, &x)| gv * x).collect(),
                )
                .unwrap();
                (ga, gb)
            },
        )
    }

    pub fn scale(&self, a: Var, c: T) -> Var {
        let value = self.nodes.borrow()[a.0].value.map(|v| v * c);
        self.push(
            value,
            vec![a.0],
            GradFn::Op(Box::new(move |g, _, _| vec![g.map(|v| v * c)])),
        )
    }

    pub fn relu(&self, a: Var) -> Var {
        let value = self.nodes.borrow()[a.0].value.map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(
            value,
            vec![a.0],
            GradFn::Op(Box::new(|g, parents, _| {
                let gx = Tensor::from_vec(
                    g.shape(),
                    g.data()
                        .iter()
                        .zip(parents[0].data())
                        .map(|(&gv, &x)| if x > T::zero() { gv } else { T::zero() })
                        .collect(),
                )
                .unwrap();
                vec![gx]
            })),
        )
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        let value = self.nodes.borrow()[a.0].value.map(sigmoid_scalar);
        self.push(
            value,
            vec![a.0],
            GradFn::Op(Box::new(|g, _, out| {
                let gx = Tensor::from_vec(
                    g.shape(),
                    g.data()
                        .iter()
                        .zip(out.data())
                        .map(|(&gv, &y)| gv * y * (T::one() - y))
                        .collect(),
                )
                .unwrap();
                vec![gx]
            })),
        )
    }

    pub fn tanh(&self, a: Var) -> Var {
        let value = self.nodes.borrow()[a.0].value.map(|v| v.tanh());
        self.push(
            value,
            vec![a.0],
            GradFn::Op(Box::new(|g, _, out| {
                let gx = Tensor::from_vec(
                    g.shape(),
                    g.data()
                        .iter()
                        .zip(out.data())
                        .map(|(&gv, &y)| gv * (T::one() - y * y))
                        .collect(),
                )
                .unwrap();
                vec![gx]
            })),
        )
    }

    // ---- linear algebra --------------------------------------------------

    /// `a[m,k] * b[k,n] -> [m,n]`.
    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let (m, k, n, value) = {
            let nodes = self.nodes.borrow();
            let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
            assert_eq!(va.shape().len(), 2, "matmul: lhs must be rank 2");
            assert_eq!(vb.shape().len(), 2, "matmul: rhs must be rank 2");
            let (m, k) = (va.shape()[0], va.shape()[1]);
            let (k2, n) = (vb.shape()[0], vb.shape()[1]);
            assert_eq!(k, k2, "matmul: inner dims {k} vs {k2}");
            let mut c = Tensor::zeros(&[m, n]);
            matmul_into(va.data(), vb.data(), c.data_mut(), m, k, n);
            (m, k, n, c)
        };
        self.push(
            value,
            vec![a.0, b.0],
            GradFn::Op(Box::new(move |g, parents, _| {
                let (va, vb) = (parents[0], parents[1]);
                let mut ga = Tensor::zeros(&[m, k]);
                matmul_nt_into(g.data(), vb.data(), ga.data_mut(), m, n, k);
                let mut gb = Tensor::zeros(&[k, n]);
                matmul_tn_into(va.data(), g.data(), gb.data_mut(), k, m, n);
                vec![ga, gb]
            })),
        )
    }

    /// Broadcast-add a bias vector over the last axis.
    pub fn add_bias(&self, a: Var, bias: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let (va, vb) = (&nodes[a.0].value, &nodes[bias.0].value);
            let n = *va.shape().last().expect("add_bias: scalar input");
            assert_eq!(vb.shape(), &[n], "add_bias: bias shape {:?} vs last dim {n}", vb.shape());
            let mut out = va.clone();
            for row in out.data_mut().chunks_mut(n) {
                for (x, &bv) in row.iter_mut().zip(vb.data()) {
                    *x += bv;
                }
            }
            out
        };
        self.push(
            value,
            vec![a.0, bias.0],
            GradFn::Op(Box::new(move |g, parents, _| {
                let n = *parents[1].shape().last().unwrap();
                let mut gb = Tensor::zeros(&[n]);
                for row in g.data().chunks(n) {
                    for (acc, &gv) in gb.data_mut().iter_mut().zip(row) {
                        *acc += gv;
                    }
                }
                vec![g.clone(), gb]
            })),
        )
    }

    /// 1-D convolution over `[B, T, Cin]` with weights `[k*Cin, Cout]` and
    /// bias `[Cout]`, padded by `pad` frames on both ends.
    pub fn conv1d(
        &self,
        x: Var,
        w: Var,
        b: Var,
        kernel: usize,
        stride: usize,
        pad: usize,
        mode: PadMode,
    ) -> Var {
        assert!(stride >= 1);
        let (bsz, t_in, cin, cout, t_out, cols, value) = {
            let nodes = self.nodes.borrow();
            let vx = &nodes[x.0].value;
            let vw = &nodes[w.0].value;
            let vb = &nodes[b.0].value;
            assert_eq!(vx.shape().len(), 3, "conv1d: input must be [B,T,C]");
            let (bsz, t_in, cin) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
            assert_eq!(
                vw.shape(),
                &[kernel * cin, vw.shape()[1]],
                "conv1d: weight shape {:?} vs kernel*cin {}",
                vw.shape(),
                kernel * cin
            );
            let cout = vw.shape()[1];
            assert_eq!(vb.shape(), &[cout], "conv1d: bias shape");
            assert!(t_in + 2 * pad >= kernel, "conv1d: input too short for kernel");
            let t_out = (t_in + 2 * pad - kernel) / stride + 1;
            let mut cols = vec![T::zero(); bsz * t_out * kernel * cin];
            im2col(vx.data(), &mut cols, bsz, t_in, cin, kernel, stride, pad, t_out, mode);
            let mut y = Tensor::zeros(&[bsz, t_out, cout]);
            matmul_into(&cols, vw.data(), y.data_mut(), bsz * t_out, kernel * cin, cout);
            for row in y.data_mut().chunks_mut(cout) {
                for (v, &bv) in row.iter_mut().zip(vb.data()) {
                    *v += bv;
                }
            }
            (bsz, t_in, cin, cout, t_out, cols, y)
        };
        self.push(
            value,
            vec![x.0, w.0, b.0],
            GradFn::Op(Box::new(move |g, parents, _| {
                let vw = parents[1];
                let rows = bsz * t_out;
                let kc = kernel * cin;
                // dW = cols^T * g
                let mut gw = Tensor::zeros(&[kc, cout]);
                matmul_tn_into(&cols, g.data(), gw.data_mut(), kc, rows, cout);
                // db = column sum of g
                let mut gb = Tensor::zeros(&[cout]);
                for row in g.data().chunks(cout) {
                    for (acc, &gv) in gb.data_mut().iter_mut().zip(row) {
                        *acc += gv;
                    }
                }
                // dcols = g * W^T, then scatter back to dx
                let mut dcols = vec![T::zero(); rows * kc];
                matmul_nt_into(g.data(), vw.data(), &mut dcols, rows, cout, kc);
                let mut gx = Tensor::zeros(&[bsz, t_in, cin]);
                col2im(&dcols, gx.data_mut(), bsz, t_in, cin, kernel, stride, pad, t_out, mode);
                vec![gx, gw, gb]
            })),
        )
    }

    /// Per-channel standardization over the time axis of `[B, T, C]`:
    /// `(x - mean) / (sigma + eps)`, no learned affine. Requires `T >= 2`.
    pub fn instance_norm(&self, x: Var, eps: T) -> Var {
        let (bsz, t, c, sigmas, value) = {
            let nodes = self.nodes.borrow();
            let vx = &nodes[x.0].value;
            assert_eq!(vx.shape().len(), 3, "instance_norm: input must be [B,T,C]");
            let (bsz, t, c) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
            assert!(t >= 2, "instance_norm: variance undefined for T={t}");
            let data = vx.data();
            let mut out = Tensor::zeros(&[bsz, t, c]);
            let mut sigmas = vec![T::zero(); bsz * c];
            let tn = T::from_usize(t).unwrap();
            for bi in 0..bsz {
                for ci in 0..c {
                    let mut mean = T::zero();
                    for ti in 0..t {
                        mean += data[(bi * t + ti) * c + ci];
                    }
                    mean = mean / tn;
                    let mut var = T::zero();
                    for ti in 0..t {
                        let d = data[(bi * t + ti) * c + ci] - mean;
                        var += d * d;
                    }
                    let sigma = (var / tn).sqrt();
                    sigmas[bi * c + ci] = sigma;
                    let denom = sigma + eps;
                    for ti in 0..t {
                        out.data_mut()[(bi * t + ti) * c + ci] =
                            (data[(bi * t + ti) * c + ci] - mean) / denom;
                    }
                }
            }
            (bsz, t, c, sigmas, out)
        };
        self.push(
            value,
            vec![x.0],
            GradFn::Op(Box::new(move |g, _, out| {
                // y = (x - mu)/s with s = sigma + eps:
                // dx = (g - mean(g))/s - y * mean(g .* y) / sigma
                let tn = T::from_usize(t).unwrap();
                let mut gx = Tensor::zeros(&[bsz, t, c]);
                for bi in 0..bsz {
                    for ci in 0..c {
                        let sigma = sigmas[bi * c + ci];
                        let s = sigma + eps;
                        let mut gmean = T::zero();
                        let mut proj = T::zero();
                        for ti in 0..t {
                            let idx = (bi * t + ti) * c + ci;
                            gmean += g.data()[idx];
                            proj += g.data()[idx] * out.data()[idx];
                        }
                        gmean = gmean / tn;
                        proj = proj / tn;
                        let corr = if sigma > T::zero() { proj / sigma } else { T::zero() };
                        for ti in 0..t {
                            let idx = (bi * t + ti) * c + ci;
                            gx.data_mut()[idx] =
                                (g.data()[idx] - gmean) / s - out.data()[idx] * corr;
                        }
                    }
                }
                vec![gx]
            })),
        )
    }

    // ---- shape plumbing --------------------------------------------------

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Var {
        let value = self.value(a).reshaped(shape).expect("reshape: size mismatch");
        let old_shape = self.shape(a);
        self.push(
            value,
            vec![a.0],
            GradFn::Op(Box::new(move |g, _, _| {
                vec![g.clone().reshaped(&old_shape).unwrap()]
            })),
        )
    }

    /// Mean over the time axis: `[B, T, C] -> [B, C]`.
    pub fn mean_time(&self, a: Var) -> Var {
        let (bsz, t, c, value) = {
            let nodes = self.nodes.borrow();
            let vx = &nodes[a.0].value;
            assert_eq!(vx.shape().len(), 3, "mean_time: input must be [B,T,C]");
            let (bsz, t, c) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
            let tn = T::from_usize(t).unwrap();
            let mut out = Tensor::zeros(&[bsz, c]);
            for bi in 0..bsz {
                for ti in 0..t {
                    let row = &vx.data()[(bi * t + ti) * c..(bi * t + ti + 1) * c];
                    for (acc, &v) in out.data_mut()[bi * c..(bi + 1) * c].iter_mut().zip(row) {
                        *acc += v;
                    }
                }
            }
            out.data_mut().iter_mut().for_each(|v| *v = *v / tn);
            (bsz, t, c, out)
        };
        self.push(
            value,
            vec![a.0],
            GradFn::Op(Box::new(move |g, _, _| {
                let tn = T::from_usize(t).unwrap();
                let mut gx = Tensor::zeros(&[bsz, t, c]);
                for bi in 0..bsz {
                    for ti in 0..t {
                        let dst = &mut gx.data_mut()[(bi * t + ti) * c..(bi * t + ti + 1) * c];
                        for (d, &gv) in dst.iter_mut().zip(&g.data()[bi * c..(bi + 1) * c]) {
                            *d = gv / tn;
                        }
                    }
                }
                vec![gx]
            })),
        )
    }

    /// Repeat `[B, C]` along a new time axis: `-> [B, T, C]`.
    pub fn tile_time(&self, a: Var, t: usize) -> Var {
        let (bsz, c, value) = {
            let nodes = self.nodes.borrow();
            let vx = &nodes[a.0].value;
            assert_eq!(vx.shape().len(), 2, "tile_time: input must be [B,C]");
            let (bsz, c) = (vx.shape()[0], vx.shape()[1]);
            let mut out = Tensor::zeros(&[bsz, t, c]);
            for bi in 0..bsz {
                let src = &vx.data()[bi * c..(bi + 1) * c];
                for ti in 0..t {
                    out.data_mut()[(bi * t + ti) * c..(bi * t + ti + 1) * c].copy_from_slice(src);
                }
            }
            (bsz, c, out)
        };
        self.push(
            value,
            vec![a.0],
            GradFn::Op(Box::new(move |g, _, _| {
                let mut gx = Tensor::zeros(&[bsz, c]);
                for bi in 0..bsz {
                    for ti in 0..t {
                        let src = &g.data()[(bi * t + ti) * c..(bi * t + ti + 1) * c];
                        for (acc, &gv) in gx.data_mut()[bi * c..(bi + 1) * c].iter_mut().zip(src) {
                            *acc += gv;
                        }
                    }
                }
                vec![gx]
            })),
        )
    }

    /// Concatenate along the last axis; all leading dims must agree.
    pub fn concat_last(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let (rows, widths, value) = {
            let nodes = self.nodes.borrow();
            let lead: Vec<usize> = {
                let s = nodes[parts[0].0].value.shape();
                s[..s.len() - 1].to_vec()
            };
            let rows: usize = lead.iter().product();
            let mut widths = Vec::with_capacity(parts.len());
            for p in parts {
                let s = nodes[p.0].value.shape();
                assert_eq!(&s[..s.len() - 1], &lead[..], "concat_last: leading dims differ");
                widths.push(s[s.len() - 1]);
            }
            let total: usize = widths.iter().sum();
            let mut shape = lead.clone();
            shape.push(total);
            let mut out = Tensor::zeros(&shape);
            let mut offset = 0;
            for (p, &w) in parts.iter().zip(&widths) {
                let src = nodes[p.0].value.data();
                for r in 0..rows {
                    out.data_mut()[r * total + offset..r * total + offset + w]
                        .copy_from_slice(&src[r * w..(r + 1) * w]);
                }
                offset += w;
            }
            (rows, widths, out)
        };
        self.push(
            value,
            parts.iter().map(|p| p.0).collect(),
            GradFn::Op(Box::new(move |g, parents, _| {
                let total: usize = widths.iter().sum();
                let mut out = Vec::with_capacity(widths.len());
                let mut offset = 0;
                for (pi, &w) in widths.iter().enumerate() {
                    let mut gp = Tensor::zeros(parents[pi].shape());
                    for r in 0..rows {
                        gp.data_mut()[r * w..(r + 1) * w]
                            .copy_from_slice(&g.data()[r * total + offset..r * total + offset + w]);
                    }
                    out.push(gp);
                    offset += w;
                }
                out
            })),
        )
    }

    /// Concatenate along the first axis; trailing dims must agree.
    pub fn concat_rows(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let (trail, counts, value) = {
            let nodes = self.nodes.borrow();
            let trail: Vec<usize> = {
                let s = nodes[parts[0].0].value.shape();
                s[1..].to_vec()
            };
            let mut counts = Vec::with_capacity(parts.len());
            let mut data = Vec::new();
            for p in parts {
                let s = nodes[p.0].value.shape();
                assert_eq!(&s[1..], &trail[..], "concat_rows: trailing dims differ");
                counts.push(s[0]);
                data.extend_from_slice(nodes[p.0].value.data());
            }
            let mut shape = vec![counts.iter().sum::<usize>()];
            shape.extend_from_slice(&trail);
            (trail, counts, Tensor::from_vec(&shape, data).unwrap())
        };
        self.push(
            value,
            parts.iter().map(|p| p.0).collect(),
            GradFn::Op(Box::new(move |g, _, _| {
                let row: usize = trail.iter().product();
                let mut out = Vec::with_capacity(counts.len());
                let mut offset = 0;
                for &cnt in &counts {
                    let mut shape = vec![cnt];
                    shape.extend_from_slice(&trail);
                    let gp = Tensor::from_vec(
                        &shape,
                        g.data()[offset * row..(offset + cnt) * row].to_vec(),
                    )
                    .unwrap();
                    out.push(gp);
                    offset += cnt;
                }
                out
            })),
        )
    }

    /// Rows `[from, to)` along the first axis.
    pub fn slice_rows(&self, a: Var, from: usize, to: usize) -> Var {
        let (shape0, row, value) = {
            let nodes = self.nodes.borrow();
            let vx = &nodes[a.0].value;
            let shape0 = vx.shape().to_vec();
            assert!(from <= to && to <= shape0[0], "slice_rows: [{from},{to}) of {}", shape0[0]);
            let row: usize = shape0[1..].iter().product();
            let mut shape = shape0.clone();
            shape[0] = to - from;
            let value =
                Tensor::from_vec(&shape, vx.data()[from * row..to * row].to_vec()).unwrap();
            (shape0, row, value)
        };
        self.push(
            value,
            vec![a.0],
            GradFn::Op(Box::new(move |g, _, _| {
                let mut gx = Tensor::zeros(&shape0);
                gx.data_mut()[from * row..to * row].copy_from_slice(g.data());
                vec![gx]
            })),
        )
    }

    /// Frames `[from, to)` along the time axis of `[B, T, C]`.
    pub fn slice_time(&self, a: Var, from: usize, to: usize) -> Var {
        let (bsz, t, c, value) = {
            let nodes = self.nodes.borrow();
            let vx = &nodes[a.0].value;
            assert_eq!(vx.shape().len(), 3, "slice_time: input must be [B,T,C]");
            let (bsz, t, c) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
            assert!(from <= to && to <= t, "slice_time: [{from},{to}) of {t}");
            let mut out = Tensor::zeros(&[bsz, to - from, c]);
            for bi in 0..bsz {
                let src = &vx.data()[(bi * t + from) * c..(bi * t + to) * c];
                out.data_mut()[bi * (to - from) * c..(bi + 1) * (to - from) * c]
                    .copy_from_slice(src);
            }
            (bsz, t, c, out)
        };
        self.push(
            value,
            vec![a.0],
            GradFn::Op(Box::new(move |g, _, _| {
                let span = to - from;
                let mut gx = Tensor::zeros(&[bsz, t, c]);
                for bi in 0..bsz {
                    gx.data_mut()[(bi * t + from) * c..(bi * t + to) * c]
                        .copy_from_slice(&g.data()[bi * span * c..(bi + 1) * span * c]);
                }
                vec![gx]
            })),
        )
    }

    // ---- reductions and losses -------------------------------------------

    /// Mean over all elements, producing a scalar.
    pub fn mean_all(&self, a: Var) -> Var {
        let (n, value) = {
            let nodes = self.nodes.borrow();
            let vx = &nodes[a.0].value;
            let n = vx.len();
            let s: T = vx.data().iter().copied().sum();
            (n, Tensor::scalar(s / T::from_usize(n).unwrap()))
        };
        let shape = self.shape(a);
        self.push(
            value,
            vec![a.0],
            GradFn::Op(Box::new(move |g, _, _| {
                let gv = g.item() / T::from_usize(n).unwrap();
                vec![Tensor::filled(&shape, gv)]
            })),
        )
    }

    /// Mean absolute difference: `mean |a - b|`.
    pub fn l1_loss(&self, a: Var, b: Var) -> Var {
        let (n, value) = {
            let nodes = self.nodes.borrow();
            let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
            assert_eq!(va.shape(), vb.shape(), "l1_loss: shape mismatch");
            let n = va.len();
            let s: T = va
                .data()
                .iter()
                .zip(vb.data())
                .map(|(&x, &y)| (x - y).abs())
                .sum();
            (n, Tensor::scalar(s / T::from_usize(n).unwrap()))
        };
        self.push(
            value,
            vec![a.0, b.0],
            GradFn::Op(Box::new(move |g, parents, _| {
                let gv = g.item() / T::from_usize(n).unwrap();
                let (va, vb) = (parents[0], parents[1]);
                let ga: Vec<T> = va
                    .data()
                    .iter()
                    .zip(vb.data())
                    .map(|(&x, &y)| {
                        if x > y {
                            gv
                        } else if x < y {
                            -gv
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                let gb: Vec<T> = ga.iter().map(|&v| -v).collect();
                vec![
                    Tensor::from_vec(va.shape(), ga).unwrap(),
                    Tensor::from_vec(vb.shape(), gb).unwrap(),
                ]
            })),
        )
    }

    /// Mean squared difference: `mean (a - b)^2`.
    pub fn mse_loss(&self, a: Var, b: Var) -> Var {
        let (n, value) = {
            let nodes = self.nodes.borrow();
            let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
            assert_eq!(va.shape(), vb.shape(), "mse_loss: shape mismatch");
            let n = va.len();
            let s: T = va
                .data()
                .iter()
                .zip(vb.data())
                .map(|(&x, &y)| (x - y) * (x - y))
                .sum();
            (n, Tensor::scalar(s / T::from_usize(n).unwrap()))
        };
        self.push(
            value,
            vec![a.0, b.0],
            GradFn::Op(Box::new(move |g, parents, _| {
                let two = T::of_f64(2.0);
                let gv = g.item() / T::from_usize(n).unwrap();
                let (va, vb) = (parents[0], parents[1]);
                let ga: Vec<T> = va
                    .data()
                    .iter()
                    .zip(vb.data())
                    .map(|(&x, &y)| two * (x - y) * gv)
                    .collect();
                let gb: Vec<T> = ga.iter().map(|&v| -v).collect();
                vec![
                    Tensor::from_vec(va.shape(), ga).unwrap(),
                    Tensor::from_vec(vb.shape(), gb).unwrap(),
                ]
            })),
        )
    }

    /// Mean softmax cross-entropy over rows of `[M, C]` with the positive
    /// score in column 0. Computed via a stable log-sum-exp.
    pub fn softmax_ce_rows(&self, scores: Var) -> Var {
        let (m, c, value) = {
            let nodes = self.nodes.borrow();
            let vs = &nodes[scores.0].value;
            assert_eq!(vs.shape().len(), 2, "softmax_ce_rows: input must be [M,C]");
            let (m, c) = (vs.shape()[0], vs.shape()[1]);
            let mut total = T::zero();
            for row in vs.data().chunks(c) {
                total += log_sum_exp(row) - row[0];
            }
            (m, c, Tensor::scalar(total / T::from_usize(m).unwrap()))
        };
        self.push(
            value,
            vec![scores.0],
            GradFn::Op(Box::new(move |g, parents, _| {
                let gv = g.item() / T::from_usize(m).unwrap();
                let vs = parents[0];
                let mut gx = Tensor::zeros(&[m, c]);
                for (row, grow) in vs.data().chunks(c).zip(gx.data_mut().chunks_mut(c)) {
                    let lse = log_sum_exp(row);
                    for (j, (&s, gslot)) in row.iter().zip(grow.iter_mut()).enumerate() {
                        let p = (s - lse).exp();
                        let target = if j == 0 { T::one() } else { T::zero() };
                        *gslot = (p - target) * gv;
                    }
                }
                vec![gx]
            })),
        )
    }

    /// Pairwise rank cross-entropy from score differences, mean-reduced:
    /// `L_i = (1 - tau_i) * d_i + softplus(-d_i)`, which equals
    /// `-tau log(sigmoid(d)) - (1-tau) log(1 - sigmoid(d))` without ever
    /// forming a saturated probability.
    pub fn rank_bce(&self, delta: Var, tau: &[T]) -> Var {
        let (n, taus, value) = {
            let nodes = self.nodes.borrow();
            let vd = &nodes[delta.0].value;
            assert_eq!(vd.len(), tau.len(), "rank_bce: {} deltas vs {} taus", vd.len(), tau.len());
            let n = vd.len();
            let mut total = T::zero();
            for (&d, &t) in vd.data().iter().zip(tau) {
                total += (T::one() - t) * d + softplus_neg(d);
            }
            (n, tau.to_vec(), Tensor::scalar(total / T::from_usize(n).unwrap()))
        };
        self.push(
            value,
            vec![delta.0],
            GradFn::Op(Box::new(move |g, parents, _| {
                let gv = g.item() / T::from_usize(n).unwrap();
                let vd = parents[0];
                let gd: Vec<T> = vd
                    .data()
                    .iter()
                    .zip(&taus)
                    .map(|(&d, &t)| (sigmoid_scalar(d) - t) * gv)
                    .collect();
                vec![Tensor::from_vec(vd.shape(), gd).unwrap()]
            })),
        )
    }

    // ---- gathering and quantization --------------------------------------

    /// Select rows of `[N, d]` by index, output `[M, d]`. Backward
    /// scatter-adds into the source.
    pub fn gather_rows(&self, a: Var, idx: &[usize]) -> Var {
        let (n, d, indices, value) = {
            let nodes = self.nodes.borrow();
            let vx = &nodes[a.0].value;
            assert_eq!(vx.shape().len(), 2, "gather_rows: input must be [N,d]");
            let (n, d) = (vx.shape()[0], vx.shape()[1]);
            let mut out = Tensor::zeros(&[idx.len(), d]);
            for (r, &i) in idx.iter().enumerate() {
                assert!(i < n, "gather_rows: index {i} out of range {n}");
                out.data_mut()[r * d..(r + 1) * d].copy_from_slice(&vx.data()[i * d..(i + 1) * d]);
            }
            (n, d, idx.to_vec(), out)
        };
        self.push(
            value,
            vec![a.0],
            GradFn::Op(Box::new(move |g, _, _| {
                let mut gx = Tensor::zeros(&[n, d]);
                for (r, &i) in indices.iter().enumerate() {
                    let src = &g.data()[r * d..(r + 1) * d];
                    for (acc, &gv) in gx.data_mut()[i * d..(i + 1) * d].iter_mut().zip(src) {
                        *acc += gv;
                    }
                }
                vec![gx]
            })),
        )
    }

    /// Straight-through codebook lookup: forward replaces each row of the
    /// encoder output (viewed as `[M, d]`) by `book[idx]`; backward copies
    /// the upstream gradient to the encoder input unchanged. The codebook
    /// receives no gradient through this path.
    pub fn straight_through(&self, enc: Var, book: &Tensor<T>, idx: &[usize]) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let ve = &nodes[enc.0].value;
            let d = *ve.shape().last().expect("straight_through: scalar input");
            assert_eq!(book.shape().len(), 2, "straight_through: book must be [V,d]");
            assert_eq!(book.shape()[1], d, "straight_through: dim mismatch");
            let rows = ve.len() / d;
            assert_eq!(rows, idx.len(), "straight_through: {rows} rows vs {} indices", idx.len());
            let v = book.shape()[0];
            let mut out = ve.clone();
            for (r, &i) in idx.iter().enumerate() {
                assert!(i < v, "straight_through: index {i} out of range {v}");
                out.data_mut()[r * d..(r + 1) * d]
                    .copy_from_slice(&book.data()[i * d..(i + 1) * d]);
            }
            out
        };
        self.push(
            value,
            vec![enc.0],
            GradFn::Op(Box::new(|g, _, _| vec![g.clone()])),
        )
    }

    /// Row-wise dot products against per-row candidate sets:
    /// `z [M, d]`, `cands [M*C, d]` -> scores `[M, C]` with
    /// `scores[i][j] = dot(z[i], cands[i*C + j])`.
    pub fn nce_scores(&self, z: Var, cands: Var, c: usize) -> Var {
        let (m, d, value) = {
            let nodes = self.nodes.borrow();
            let vz = &nodes[z.0].value;
            let vc = &nodes[cands.0].value;
            assert_eq!(vz.shape().len(), 2, "nce_scores: z must be [M,d]");
            let (m, d) = (vz.shape()[0], vz.shape()[1]);
            assert_eq!(vc.shape(), &[m * c, d], "nce_scores: cands shape");
            let mut out = Tensor::zeros(&[m, c]);
            for i in 0..m {
                let zi = &vz.data()[i * d..(i + 1) * d];
                for j in 0..c {
                    let cj = &vc.data()[(i * c + j) * d..(i * c + j + 1) * d];
                    let mut acc = T::zero();
                    for (&a, &b) in zi.iter().zip(cj) {
                        acc += a * b;
                    }
                    out.data_mut()[i * c + j] = acc;
                }
            }
            (m, d, out)
        };
        self.push(
            value,
            vec![z.0, cands.0],
            GradFn::Op(Box::new(move |g, parents, _| {
                let (vz, vc) = (parents[0], parents[1]);
                let mut gz = Tensor::zeros(&[m, d]);
                let mut gc = Tensor::zeros(&[m * c, d]);
                for i in 0..m {
                    let zi = &vz.data()[i * d..(i + 1) * d];
                    for j in 0..c {
                        let gij = g.data()[i * c + j];
                        let cj = &vc.data()[(i * c + j) * d..(i * c + j + 1) * d];
                        for k in 0..d {
                            gz.data_mut()[i * d + k] += gij * cj[k];
                            gc.data_mut()[(i * c + j) * d + k] = gij * zi[k];
                        }
                    }
                }
                vec![gz, gc]
            })),
        )
    }

    /// LSTM unrolled over `[B, T, Cin]` with weights `wx [Cin, 4H]`,
    /// `wh [H, 4H]`, bias `[4H]` (gate order i, f, g, o). Initial hidden
    /// and cell state are zero. Output is the hidden sequence `[B, T, H]`.
    pub fn lstm_seq(&self, x: Var, wx: Var, wh: Var, b: Var) -> Var {
        let (bsz, t, cin, h, caches, value) = {
            let nodes = self.nodes.borrow();
            let vx = &nodes[x.0].value;
            let vwx = &nodes[wx.0].value;
            let vwh = &nodes[wh.0].value;
            let vb = &nodes[b.0].value;
            assert_eq!(vx.shape().len(), 3, "lstm_seq: input must be [B,T,C]");
            let (bsz, t, cin) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
            assert_eq!(vwx.shape()[0], cin, "lstm_seq: wx rows");
            let h4 = vwx.shape()[1];
            assert_eq!(h4 % 4, 0, "lstm_seq: wx cols must be 4H");
            let h = h4 / 4;
            assert_eq!(vwh.shape(), &[h, 4 * h], "lstm_seq: wh shape");
            assert_eq!(vb.shape(), &[4 * h], "lstm_seq: bias shape");

            let mut out = Tensor::zeros(&[bsz, t, h]);
            let mut caches = LstmCaches::new(bsz, t, cin, h);
            let mut h_prev = vec![T::zero(); bsz * h];
            let mut c_prev = vec![T::zero(); bsz * h];
            let mut xt = vec![T::zero(); bsz * cin];
            let mut z = vec![T::zero(); bsz * h4];
            let mut zh = vec![T::zero(); bsz * h4];
            for ti in 0..t {
                for bi in 0..bsz {
                    xt[bi * cin..(bi + 1) * cin]
                        .copy_from_slice(&vx.data()[(bi * t + ti) * cin..(bi * t + ti + 1) * cin]);
                }
                matmul_into(&xt, vwx.data(), &mut z, bsz, cin, h4);
                matmul_into(&h_prev, vwh.data(), &mut zh, bsz, h, h4);
                for (zi, (&zhi, &bi)) in z
                    .iter_mut()
                    .zip(zh.iter().zip(vb.data().iter().cycle()))
                {
                    *zi += zhi + bi;
                }
                caches.h_prev[ti].copy_from_slice(&h_prev);
                caches.c_prev[ti].copy_from_slice(&c_prev);
                caches.xt[ti].copy_from_slice(&xt);
                for bi in 0..bsz {
                    for u in 0..h {
                        let zi = sigmoid_scalar(z[bi * h4 + u]);
                        let zf = sigmoid_scalar(z[bi * h4 + h + u]);
                        let zg = z[bi * h4 + 2 * h + u].tanh();
                        let zo = sigmoid_scalar(z[bi * h4 + 3 * h + u]);
                        let cc = zf * c_prev[bi * h + u] + zi * zg;
                        let tc = cc.tanh();
                        let hh = zo * tc;
                        caches.i[ti][bi * h + u] = zi;
                        caches.f[ti][bi * h + u] = zf;
                        caches.g[ti][bi * h + u] = zg;
                        caches.o[ti][bi * h + u] = zo;
                        caches.tanh_c[ti][bi * h + u] = tc;
                        c_prev[bi * h + u] = cc;
                        h_prev[bi * h + u] = hh;
                        out.data_mut()[(bi * t + ti) * h + u] = hh;
                    }
                }
            }
            (bsz, t, cin, h, caches, out)
        };
        self.push(
            value,
            vec![x.0, wx.0, wh.0, b.0],
            GradFn::Op(Box::new(move |g, parents, _| {
                let (_vx, vwx, vwh, _vb) = (parents[0], parents[1], parents[2], parents[3]);
                let h4 = 4 * h;
                let mut gx = Tensor::zeros(&[bsz, t, cin]);
                let mut gwx = Tensor::zeros(&[cin, h4]);
                let mut gwh = Tensor::zeros(&[h, h4]);
                let mut gb = Tensor::zeros(&[h4]);
                let mut dh = vec![T::zero(); bsz * h];
                let mut dc = vec![T::zero(); bsz * h];
                let mut dz = vec![T::zero(); bsz * h4];
                let mut buf = vec![T::zero(); bsz * cin.max(h)];
                let mut acc = Tensor::zeros(&[cin.max(h), h4]);
                for ti in (0..t).rev() {
                    for bi in 0..bsz {
                        for u in 0..h {
                            // upstream grad on h_t plus carry from t+1
                            let mut dhv = dh[bi * h + u] + g.data()[(bi * t + ti) * h + u];
                            let zo = caches.o[ti][bi * h + u];
                            let tc = caches.tanh_c[ti][bi * h + u];
                            let dcv = dc[bi * h + u] + dhv * zo * (T::one() - tc * tc);
                            let zi = caches.i[ti][bi * h + u];
                            let zf = caches.f[ti][bi * h + u];
                            let zg = caches.g[ti][bi * h + u];
                            let cp = caches.c_prev[ti][bi * h + u];
                            let d_o = dhv * tc;
                            let d_i = dcv * zg;
                            let d_g = dcv * zi;
                            let d_f = dcv * cp;
                            dz[bi * h4 + u] = d_i * zi * (T::one() - zi);
                            dz[bi * h4 + h + u] = d_f * zf * (T::one() - zf);
                            dz[bi * h4 + 2 * h + u] = d_g * (T::one() - zg * zg);
                            dz[bi * h4 + 3 * h + u] = d_o * zo * (T::one() - zo);
                            dc[bi * h + u] = dcv * zf;
                            dhv = T::zero();
                            dh[bi * h + u] = dhv;
                        }
                    }
                    // parameter grads
                    {
                        let a = &mut acc.data_mut()[..cin * h4];
                        matmul_tn_into(&caches.xt[ti], &dz, a, cin, bsz, h4);
                        for (dst, &s) in gwx.data_mut().iter_mut().zip(a.iter()) {
                            *dst += s;
                        }
                    }
                    {
                        let a = &mut acc.data_mut()[..h * h4];
                        matmul_tn_into(&caches.h_prev[ti], &dz, a, h, bsz, h4);
                        for (dst, &s) in gwh.data_mut().iter_mut().zip(a.iter()) {
                            *dst += s;
                        }
                    }
                    for row in dz.chunks(h4) {
                        for (dst, &s) in gb.data_mut().iter_mut().zip(row) {
                            *dst += s;
                        }
                    }
                    // input grad and hidden carry
                    {
                        let bx = &mut buf[..bsz * cin];
                        matmul_nt_into(&dz, vwx.data(), bx, bsz, h4, cin);
                        for bi in 0..bsz {
                            gx.data_mut()[(bi * t + ti) * cin..(bi * t + ti + 1) * cin]
                                .copy_from_slice(&bx[bi * cin..(bi + 1) * cin]);
                        }
                    }
                    {
                        let bh = &mut buf[..bsz * h];
                        matmul_nt_into(&dz, vwh.data(), bh, bsz, h4, h);
                        dh.copy_from_slice(bh);
                    }
                }
                vec![gx, gwx, gwh, gb]
            })),
        )
    }

    // ---- backward ---------------------------------------------------------

    /// Reverse-mode sweep from a scalar loss node. Consumes the recorded
    /// backward closures; call once per tape.
    pub fn backward(&self, loss: Var) -> Grads<T> {
        let mut nodes = self.nodes.borrow_mut();
        assert_eq!(nodes[loss.0].value.len(), 1, "backward: loss must be scalar");
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let grad_fn = std::mem::replace(&mut nodes[i].grad_fn, GradFn::Leaf);
            match grad_fn {
                GradFn::Leaf => {
                    grads[i] = Some(g); // keep for param collection
                }
                GradFn::Op(f) => {
                    let parents = nodes[i].parents.clone();
                    let pgrads = {
                        let pvals: Vec<&Tensor<T>> =
                            parents.iter().map(|&p| &nodes[p].value).collect();
                        f(&g, &pvals, &nodes[i].value)
                    };
                    assert_eq!(pgrads.len(), parents.len());
                    for (&p, pg) in parents.iter().zip(pgrads) {
                        match &mut grads[p] {
                            Some(acc) => acc.add_assign(&pg),
                            slot => *slot = Some(pg),
                        }
                    }
                }
            }
        }
        let mut by_param: Vec<Option<Tensor<T>>> = (0..self.params.len()).map(|_| None).collect();
        for &(pidx, nid) in self.param_leaves.borrow().iter() {
            if let Some(g) = grads[nid].take() {
                match &mut by_param[pidx] {
                    Some(acc) => acc.add_assign(&g),
                    slot => *slot = Some(g),
                }
            }
        }
        Grads { by_param }
    }
}

struct LstmCaches<T> {
    xt: Vec<Vec<T>>,
    h_prev: Vec<Vec<T>>,
    c_prev: Vec<Vec<T>>,
    i: Vec<Vec<T>>,
    f: Vec<Vec<T>>,
    g: Vec<Vec<T>>,
    o: Vec<Vec<T>>,
    tanh_c: Vec<Vec<T>>,
}

impl<T: Real> LstmCaches<T> {
    fn new(bsz: usize, t: usize, cin: usize, h: usize) -> Self {
        let per_h = || vec![vec![T::zero(); bsz * h]; t];
        LstmCaches {
            xt: vec![vec![T::zero(); bsz * cin]; t],
            h_prev: per_h(),
            c_prev: per_h(),
            i: per_h(),
            f: per_h(),
            g: per_h(),
            o: per_h(),
            tanh_c: per_h(),
        }
    }
}

fn sigmoid_scalar<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `softplus(-d) = ln(1 + exp(-d))`, stable for both signs of `d`.
fn softplus_neg<T: Real>(d: T) -> T {
    if d >= T::zero() {
        (-d).exp().ln_1p()
    } else {
        -d + d.exp().ln_1p()
    }
}

fn log_sum_exp<T: Real>(row: &[T]) -> T {
    let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
    let s: T = row.iter().map(|&v| (v - mx).exp()).sum();
    mx + s.ln()
}

fn resolve_tap(src_t: isize, t_in: usize, mode: PadMode) -> Option<usize> {
    if src_t >= 0 && (src_t as usize) < t_in {
        return Some(src_t as usize);
    }
    match mode {
        PadMode::Zero => None,
        PadMode::Circular => Some(src_t.rem_euclid(t_in as isize) as usize),
    }
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Real>(
    x: &[T],
    cols: &mut [T],
    bsz: usize,
    t_in: usize,
    cin: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    t_out: usize,
    mode: PadMode,
) {
    let kc = kernel * cin;
    for bi in 0..bsz {
        for to in 0..t_out {
            let row = (bi * t_out + to) * kc;
            for j in 0..kernel {
                let src_t = (to * stride + j) as isize - pad as isize;
                if let Some(src) = resolve_tap(src_t, t_in, mode) {
                    let s = (bi * t_in + src) * cin;
                    cols[row + j * cin..row + (j + 1) * cin].copy_from_slice(&x[s..s + cin]);
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Real>(
    dcols: &[T],
    dx: &mut [T],
    bsz: usize,
    t_in: usize,
    cin: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    t_out: usize,
    mode: PadMode,
) {
    let kc = kernel * cin;
    for bi in 0..bsz {
        for to in 0..t_out {
            let row = (bi * t_out + to) * kc;
            for j in 0..kernel {
                let src_t = (to * stride + j) as isize - pad as isize;
                if let Some(src) = resolve_tap(src_t, t_in, mode) {
                    let d = (bi * t_in + src) * cin;
                    for u in 0..cin {
                        dx[d + u] += dcols[row + j * cin + u];
                    }
                }
            }
        }
    }
}
