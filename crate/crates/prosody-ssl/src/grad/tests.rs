use super::check::{grad_check, random_tensor};
use super::nn::{Conv1d, Dense, Lstm};
use super::{PadMode, Params, Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-4;
const TOL_RECURRENT: f64 = 1e-3;
const H: f64 = 1e-5;

#[test]
fn relu_derivative_by_definition() {
    let x = Tensor::from_vec(&[2], vec![2.0, -2.0]).unwrap();
    let params = Params::new();
    let tape = Tape::new(&params);
    let v = tape.input(x);
    let y = tape.relu(v);
    assert_eq!(tape.value(y).data(), &[2.0, 0.0]);
    // d relu / dx at 2 is 1, at -2 is 0
    let err = grad_check(
        &[Tensor::from_vec(&[2], vec![2.0, -2.0]).unwrap()],
        H,
        2,
        0,
        |t, vs| t.mean_all(t.relu(vs[0])),
    );
    assert!(err <= TOL, "relu grad err {err}");
}

#[test]
fn sigmoid_at_zero_is_half() {
    let params = Params::<f64>::new();
    let tape = Tape::new(&params);
    let v = tape.input(Tensor::scalar(0.0));
    assert_eq!(tape.value(tape.sigmoid(v)).item(), 0.5);
}

#[test]
fn conv1d_identity_kernel_passes_input_through() {
    // single-tap kernel with weight 1: output equals input
    let params = Params::<f64>::new();
    let tape = Tape::new(&params);
    let x = random_tensor(&[2, 7, 3], 1);
    let xv = tape.input(x.clone());
    // kernel 1, cin 3, cout 3, identity weight matrix
    let mut w = Tensor::zeros(&[3, 3]);
    for i in 0..3 {
        w.data_mut()[i * 3 + i] = 1.0;
    }
    let wv = tape.input(w);
    let bv = tape.input(Tensor::zeros(&[3]));
    let y = tape.conv1d(xv, wv, bv, 1, 1, 0, PadMode::Zero);
    assert_eq!(tape.value(y), x);
}

#[test]
fn elementwise_ops_pass_grad_check() {
    let a = random_tensor(&[4, 5], 10);
    let b = random_tensor(&[4, 5], 11);
    for (name, f) in [
        ("add", 0usize),
        ("sub", 1),
        ("mul", 2),
        ("relu", 3),
        ("sigmoid", 4),
        ("tanh", 5),
        ("scale", 6),
    ] {
        let err = grad_check(&[a.clone(), b.clone()], H, 20, 42, |t, vs| {
            let y = match f {
                0 => t.add(vs[0], vs[1]),
                1 => t.sub(vs[0], vs[1]),
                2 => t.mul(vs[0], vs[1]),
                3 => t.relu(vs[0]),
                4 => t.sigmoid(vs[0]),
                5 => t.tanh(vs[0]),
                _ => t.scale(vs[0], -1.7),
            };
            // square so the loss depends nontrivially on y
            t.mse_loss(y, t.input(Tensor::zeros(&t.shape(y))))
        });
        assert!(err <= TOL, "{name} grad err {err}");
    }
}

#[test]
fn linear_layer_passes_grad_check() {
    let x = random_tensor(&[8, 8], 2);
    let w = random_tensor(&[8, 6], 3);
    let b = random_tensor(&[6], 4);
    let err = grad_check(&[x, w, b], H, 50, 7, |t, vs| {
        let y = t.add_bias(t.matmul(vs[0], vs[1]), vs[2]);
        t.mean_all(t.mul(y, y))
    });
    assert!(err <= TOL, "linear grad err {err}");
}

#[test]
fn conv1d_passes_grad_check() {
    // kernel width 5, stride 1, same padding
    let x = random_tensor(&[2, 9, 3], 5);
    let w = random_tensor(&[5 * 3, 4], 6);
    let b = random_tensor(&[4], 7);
    let err = grad_check(&[x, w, b], H, 50, 8, |t, vs| {
        let y = t.conv1d(vs[0], vs[1], vs[2], 5, 1, 2, PadMode::Zero);
        t.mean_all(t.mul(y, y))
    });
    assert!(err <= TOL, "conv1d grad err {err}");
}

#[test]
fn conv1d_strided_passes_grad_check() {
    let x = random_tensor(&[2, 16, 3], 15);
    let w = random_tensor(&[5 * 3, 4], 16);
    let b = random_tensor(&[4], 17);
    let err = grad_check(&[x, w, b], H, 50, 18, |t, vs| {
        let y = t.conv1d(vs[0], vs[1], vs[2], 5, 2, 2, PadMode::Zero);
        t.mean_all(t.mul(y, y))
    });
    assert!(err <= TOL, "strided conv1d grad err {err}");
}

#[test]
fn instance_norm_properties_and_grad() {
    let eps = 1e-5;
    // constant channel -> all zeros for that channel
    let params = Params::<f64>::new();
    let tape = Tape::new(&params);
    let x = Tensor::from_vec(&[1, 4, 2], vec![3.0, 1.0, 3.0, 2.0, 3.0, 3.0, 3.0, 4.0]).unwrap();
    let y = tape.value(tape.instance_norm(tape.input(x), eps));
    for t in 0..4 {
        assert!(y.data()[t * 2].abs() < 1e-12, "constant channel must map to 0");
    }

    // per-channel mean of output ~ 0, variance ~ 1 for random input
    let x = random_tensor(&[2, 50, 3], 20);
    let tape = Tape::new(&params);
    let y = tape.value(tape.instance_norm(tape.input(x.clone()), eps));
    for bi in 0..2 {
        for ci in 0..3 {
            let vals: Vec<f64> = (0..50).map(|t| y.data()[(bi * 50 + t) * 3 + ci]).collect();
            let mean: f64 = vals.iter().sum::<f64>() / 50.0;
            let var: f64 = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 50.0;
            assert!(mean.abs() < 1e-6, "IN mean {mean}");
            assert!((var - 1.0).abs() < 1e-2, "IN var {var}");
        }
    }

    // shift invariance: adding a per-channel constant leaves output unchanged
    let mut shifted = x.clone();
    for t in 0..50 {
        for (bi, delta) in [(0usize, 5.0), (1usize, -2.0)] {
            for ci in 0..3 {
                shifted.data_mut()[(bi * 50 + t) * 3 + ci] += delta * (ci as f64 + 1.0);
            }
        }
    }
    let tape = Tape::new(&params);
    let y2 = tape.value(tape.instance_norm(tape.input(shifted), eps));
    for (a, b) in y.data().iter().zip(y2.data()) {
        assert!((a - b).abs() < 1e-6, "IN must reject per-channel shifts");
    }

    // positive per-channel scaling: output preserved when sigma >> eps
    let scaled = x.map(|v| v * 37.0);
    let tape = Tape::new(&params);
    let y3 = tape.value(tape.instance_norm(tape.input(scaled), eps));
    for (a, b) in y.data().iter().zip(y3.data()) {
        assert!((a - b).abs() < 1e-4, "IN must normalize positive scaling");
    }

    let err = grad_check(&[random_tensor(&[2, 6, 3], 21)], H, 36, 22, |t, vs| {
        let y = t.instance_norm(vs[0], eps);
        let w = t.input(random_tensor(&[2, 6, 3], 23));
        t.mean_all(t.mul(y, w))
    });
    assert!(err <= TOL, "instance_norm grad err {err}");
}

#[test]
#[should_panic(expected = "variance undefined")]
fn instance_norm_rejects_single_frame() {
    let params = Params::<f64>::new();
    let tape = Tape::new(&params);
    let x = tape.input(Tensor::zeros(&[1, 1, 4]));
    let _ = tape.instance_norm(x, 1e-5);
}

#[test]
fn reductions_pass_grad_check() {
    let a = random_tensor(&[3, 7], 30);
    let b = random_tensor(&[3, 7], 31);
    let err = grad_check(&[a.clone(), b.clone()], H, 21, 32, |t, vs| t.l1_loss(vs[0], vs[1]));
    assert!(err <= TOL, "l1 grad err {err}");
    let err = grad_check(&[a.clone(), b.clone()], H, 21, 33, |t, vs| t.mse_loss(vs[0], vs[1]));
    assert!(err <= TOL, "mse grad err {err}");
    let err = grad_check(&[a, b], H, 21, 34, |t, vs| {
        t.mean_all(t.mul(vs[0], vs[1]))
    });
    assert!(err <= TOL, "mean_all grad err {err}");
}

#[test]
fn shape_ops_pass_grad_check() {
    let x = random_tensor(&[2, 6, 4], 40);
    let w = random_tensor(&[2, 4], 41);
    let err = grad_check(&[x.clone(), w.clone()], H, 30, 42, |t, vs| {
        let pooled = t.mean_time(vs[0]); // [2,4]
        t.mean_all(t.mul(pooled, vs[1]))
    });
    assert!(err <= TOL, "mean_time grad err {err}");

    let err = grad_check(&[w.clone()], H, 8, 43, |t, vs| {
        let tiled = t.tile_time(vs[0], 5); // [2,5,4]
        let probe = t.input(random_tensor(&[2, 5, 4], 44));
        t.mean_all(t.mul(tiled, probe))
    });
    assert!(err <= TOL, "tile_time grad err {err}");

    let err = grad_check(&[x.clone()], H, 30, 45, |t, vs| {
        let s = t.slice_time(vs[0], 1, 4);
        t.mean_all(t.mul(s, s))
    });
    assert!(err <= TOL, "slice_time grad err {err}");

    let err = grad_check(&[x.clone()], H, 30, 46, |t, vs| {
        let s = t.slice_rows(vs[0], 0, 1);
        t.mean_all(t.mul(s, s))
    });
    assert!(err <= TOL, "slice_rows grad err {err}");

    let a = random_tensor(&[2, 3, 2], 47);
    let b = random_tensor(&[2, 3, 5], 48);
    let err = grad_check(&[a.clone(), b.clone()], H, 20, 49, |t, vs| {
        let c = t.concat_last(&[vs[0], vs[1]]);
        t.mean_all(t.mul(c, c))
    });
    assert!(err <= TOL, "concat_last grad err {err}");

    let err = grad_check(&[a.clone(), a], H, 20, 50, |t, vs| {
        let c = t.concat_rows(&[vs[0], vs[1]]);
        t.mean_all(t.mul(c, c))
    });
    assert!(err <= TOL, "concat_rows grad err {err}");

    let err = grad_check(&[b], H, 20, 51, |t, vs| {
        let r = t.reshape(vs[0], &[6, 5]);
        t.mean_all(t.mul(r, r))
    });
    assert!(err <= TOL, "reshape grad err {err}");
}

#[test]
fn losses_pass_grad_check() {
    let scores = random_tensor(&[6, 5], 60);
    let err = grad_check(&[scores], H, 30, 61, |t, vs| t.softmax_ce_rows(vs[0]));
    assert!(err <= TOL, "softmax_ce grad err {err}");

    let delta = random_tensor(&[10], 62);
    let tau: Vec<f64> = (0..10).map(|i| 0.05 + 0.09 * i as f64).collect();
    let err = grad_check(&[delta], H, 10, 63, |t, vs| t.rank_bce(vs[0], &tau));
    assert!(err <= TOL, "rank_bce grad err {err}");
}

#[test]
fn gather_and_nce_pass_grad_check() {
    let book = random_tensor(&[8, 4], 70);
    let idx = vec![3usize, 0, 7, 3, 5];
    let err = grad_check(&[book], H, 32, 71, |t, vs| {
        let rows = t.gather_rows(vs[0], &idx);
        t.mean_all(t.mul(rows, rows))
    });
    assert!(err <= TOL, "gather_rows grad err {err}");

    let z = random_tensor(&[4, 3], 72);
    let cands = random_tensor(&[4 * 5, 3], 73);
    let err = grad_check(&[z, cands], H, 40, 74, |t, vs| {
        let s = t.nce_scores(vs[0], vs[1], 5);
        t.softmax_ce_rows(s)
    });
    assert!(err <= TOL, "nce_scores grad err {err}");
}

#[test]
fn lstm_unrolled_passes_grad_check() {
    let x = random_tensor(&[2, 10, 3], 80);
    let wx = random_tensor(&[3, 16], 81);
    let wh = random_tensor(&[4, 16], 82);
    let b = random_tensor(&[16], 83);
    let err = grad_check(&[x, wx, wh, b], H, 40, 84, |t, vs| {
        let h = t.lstm_seq(vs[0], vs[1], vs[2], vs[3]);
        t.mean_all(t.mul(h, h))
    });
    assert!(err <= TOL_RECURRENT, "lstm grad err {err}");
}

#[test]
fn straight_through_contracts() {
    // forward returns the selected codebook rows exactly; backward copies
    // the upstream gradient to the encoder input; codebook gets nothing.
    let mut params = Params::<f64>::new();
    let book = Tensor::from_vec(&[3, 2], vec![1.0, 0.0, 0.0, 1.0, 2.0, 2.0]).unwrap();
    let book_id = params.add("book", book.clone());
    let enc = Tensor::from_vec(&[1, 2, 2], vec![0.9, 0.1, -0.2, 1.3]).unwrap();
    let enc_id = params.add("enc", enc);

    let tape = Tape::new(&params);
    let e = tape.param(enc_id);
    let _book_var = tape.param(book_id); // on tape but unused by the ST path
    let q = tape.straight_through(e, &book, &[0, 1]);
    let out = tape.value(q);
    assert_eq!(out.data(), &[1.0, 0.0, 0.0, 1.0]);

    // gradient of sum(q) w.r.t. encoder input is all ones
    let loss = tape.scale(tape.mean_all(q), 4.0); // sum = mean * n
    let grads = tape.backward(loss);
    let ge = grads.get(enc_id).expect("encoder grad");
    for &g in ge.data() {
        assert!((g - 1.0).abs() < 1e-12);
    }
    // codebook gradient through this path is zero (absent)
    assert!(grads.get(book_id).is_none());
}

#[test]
fn zero_upstream_gives_zero_param_grads() {
    let mut params = Params::<f64>::new();
    let w = params.add("w", random_tensor(&[3, 3], 90));
    let tape = Tape::new(&params);
    let _unused = tape.param(w);
    let x = tape.input(random_tensor(&[2, 3], 91));
    let loss = tape.mean_all(x);
    let grads = tape.backward(loss);
    assert!(grads.get(w).is_none(), "untouched param must have no gradient");
}

#[test]
fn forward_and_backward_are_deterministic() {
    let run = || {
        let mut params = Params::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let layer = Dense::new(&mut params, "d", 6, 4, &mut rng);
        let tape = Tape::new(&params);
        let x = tape.input(random_tensor(&[5, 6], 92));
        let y = layer.forward(&tape, x);
        let loss = tape.mean_all(tape.mul(y, y));
        let v = tape.value(loss).item();
        let g = tape.backward(loss);
        (v, g.get(layer.w).unwrap().data().to_vec())
    };
    let (v1, g1) = run();
    let (v2, g2) = run();
    assert_eq!(v1.to_bits(), v2.to_bits());
    assert_eq!(g1.len(), g2.len());
    for (a, b) in g1.iter().zip(g2.iter()) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
}

#[test]
fn layer_wrappers_wire_params_correctly() {
    let mut params = Params::<f32>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let conv = Conv1d::new(&mut params, "c0", 8, 16, 5, 2, 2, PadMode::Circular, &mut rng);
    let dense = Dense::new(&mut params, "head", 16, 4, &mut rng);
    let lstm = Lstm::new(&mut params, "ctx", 4, 4, &mut rng);
    assert_eq!(params.len(), 7);
    assert_eq!(params.get(conv.w).shape(), &[40, 16]);

    let tape = Tape::new(&params);
    let x = tape.input(Tensor::zeros(&[3, 12, 8]));
    let y = conv.forward(&tape, x);
    assert_eq!(tape.shape(y), vec![3, 6, 16]);
    let pooled = tape.mean_time(y);
    let scores = dense.forward(&tape, pooled);
    assert_eq!(tape.shape(scores), vec![3, 4]);
    let seq = tape.reshape(scores, &[3, 1, 4]);
    let ctx = lstm.forward(&tape, seq);
    assert_eq!(tape.shape(ctx), vec![3, 1, 4]);
}

#[test]
fn circular_conv_passes_grad_check_and_wraps() {
    let x = random_tensor(&[2, 8, 3], 95);
    let w = random_tensor(&[5 * 3, 4], 96);
    let b = random_tensor(&[4], 97);
    let err = grad_check(&[x, w, b], H, 50, 98, |t, vs| {
        let y = t.conv1d(vs[0], vs[1], vs[2], 5, 1, 2, PadMode::Circular);
        t.mean_all(t.mul(y, y))
    });
    assert!(err <= TOL, "circular conv grad err {err}");

    let err = grad_check(
        &[random_tensor(&[1, 8, 2], 99), random_tensor(&[5 * 2, 3], 100), random_tensor(&[3], 101)],
        H,
        50,
        102,
        |t, vs| {
            let y = t.conv1d(vs[0], vs[1], vs[2], 5, 2, 2, PadMode::Circular);
            t.mean_all(t.mul(y, y))
        },
    );
    assert!(err <= TOL, "strided circular conv grad err {err}");

    // with circular padding, duplicating the input along time duplicates the
    // output exactly (stride-aligned even length)
    let params = Params::<f64>::new();
    let tape = Tape::new(&params);
    let x = random_tensor(&[1, 8, 2], 103);
    let mut xx = Tensor::zeros(&[1, 16, 2]);
    xx.data_mut()[..16].copy_from_slice(x.data());
    xx.data_mut()[16..].copy_from_slice(x.data());
    let w = tape.input(random_tensor(&[5 * 2, 3], 104));
    let b = tape.input(random_tensor(&[3], 105));
    let y1 = tape.conv1d(tape.input(x), w, b, 5, 2, 2, PadMode::Circular);
    let y2 = tape.conv1d(tape.input(xx), w, b, 5, 2, 2, PadMode::Circular);
    let v1 = tape.value(y1);
    let v2 = tape.value(y2);
    for (i, chunk) in v2.data().chunks(v1.len()).enumerate() {
        for (a, b) in chunk.iter().zip(v1.data()) {
            assert!((a - b).abs() < 1e-12, "copy {i} diverged");
        }
    }
}
