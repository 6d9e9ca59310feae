//! Voice-conversion autoencoder: content encoder with instance
//! normalization, vector quantization with a straight-through estimator,
//! contrastive predictive coding over the codes, a residual speaker
//! embedding, and a decoder conditioned on content, speaker, and frozen
//! prosody representations.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{mel_to_tensor, tensor_to_mel};
use crate::grad::nn::{Conv1d, Dense, Lstm};
use crate::grad::{PadMode, ParamId, Params, Real, Tape, Tensor, Var};
use crate::prosody::{encode_prosody, ProsodyModel, MIN_FRAMES};
use crate::signal::{MelSpectrogram, N_MELS};

const IN_EPS: f64 = 1e-5;

/// Which prosody representations condition the decoder. `Both` is the full
/// model; the others exist for the ablation studies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProsodyMode {
    Both,
    PitchOnly,
    VolumeOnly,
    None,
}

impl ProsodyMode {
    pub fn uses_pitch(self) -> bool {
        matches!(self, ProsodyMode::Both | ProsodyMode::PitchOnly)
    }

    pub fn uses_volume(self) -> bool {
        matches!(self, ProsodyMode::Both | ProsodyMode::VolumeOnly)
    }

    fn n_psi(self) -> usize {
        self.uses_pitch() as usize + self.uses_volume() as usize
    }
}

/// Quantized content sequence: codebook rows per frame plus their indices.
#[derive(Debug, Clone)]
pub struct ContentCodes<T> {
    pub q: Tensor<T>,
    pub indices: Vec<usize>,
}

/// Model topology; tensors live in a [`Params`] set.
#[derive(Debug, Clone)]
pub struct VcModel {
    enc: Vec<Conv1d>,
    pub codebook: ParamId,
    lstm: Lstm,
    preds: Vec<Dense>,
    dec: Vec<Conv1d>,
    dec_out: Dense,
    pub d: usize,
    pub d_psi: usize,
    pub codebook_size: usize,
    pub cpc_k: usize,
    pub mode: ProsodyMode,
}

impl VcModel {
    pub fn new<T: Real>(
        params: &mut Params<T>,
        d: usize,
        d_psi: usize,
        codebook_size: usize,
        cpc_k: usize,
        mode: ProsodyMode,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        assert!(codebook_size >= 2, "codebook needs at least two rows");
        let mut enc = Vec::with_capacity(5);
        let mut cin = N_MELS;
        for i in 0..5 {
            enc.push(Conv1d::new(
                params,
                &format!("enc.conv{i}"),
                cin,
                d,
                5,
                1,
                2,
                PadMode::Circular,
                rng,
            ));
            cin = d;
        }
        // codebook rows ~ N(0, 1/sqrt(d))
        let std = 1.0 / (d as f64).sqrt();
        let book: Vec<T> = (0..codebook_size * d)
            .map(|_| {
                let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
                let u2: f64 = rng.random_range(0.0..1.0);
                let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
                T::of_f64(std * z)
            })
            .collect();
        let codebook = params.add(
            "codebook",
            Tensor::from_vec(&[codebook_size, d], book).unwrap(),
        );
        let lstm = Lstm::new(params, "cpc.lstm", d, d, rng);
        let preds = (0..cpc_k)
            .map(|k| Dense::new(params, &format!("cpc.pred{}", k + 1), d, d, rng))
            .collect();
        let dec_in = d + d + mode.n_psi() * d_psi;
        let mut dec = Vec::with_capacity(4);
        let mut cin = dec_in;
        for i in 0..4 {
            dec.push(Conv1d::new(
                params,
                &format!("dec.conv{i}"),
                cin,
                d,
                5,
                1,
                2,
                PadMode::Circular,
                rng,
            ));
            cin = d;
        }
        let dec_out = Dense::new(params, "dec.out", d, N_MELS, rng);
        VcModel { enc, codebook, lstm, preds, dec, dec_out, d, d_psi, codebook_size, cpc_k, mode }
    }

    /// Content encoder: 5 same-length conv layers with instance norm after
    /// every convolution and ReLU between layers. Normalizing before the
    /// nonlinearity lets IN cancel constant input shifts exactly; the final
    /// layer ends at IN so E keeps a zero per-channel time-mean.
    /// `[B, T, 80] -> [B, T, d]`.
    pub fn encode_content_tape<T: Real>(&self, tape: &Tape<T>, x: Var) -> Var {
        let mut h = x;
        let last = self.enc.len() - 1;
        for (i, conv) in self.enc.iter().enumerate() {
            h = tape.instance_norm(conv.forward(tape, h), T::of_f64(IN_EPS));
            if i < last {
                h = tape.relu(h);
            }
        }
        h
    }

    /// Decoder: tile speaker and prosody vectors across time, concatenate
    /// with the codes, run 4 conv layers with ReLU, and project to mel bins.
    pub fn decode_tape<T: Real>(
        &self,
        tape: &Tape<T>,
        q: Var,
        s: Var,
        psi_p: Option<Var>,
        psi_v: Option<Var>,
    ) -> Var {
        let (b, t) = {
            let shape = tape.shape(q);
            (shape[0], shape[1])
        };
        let mut parts = vec![q, tape.tile_time(s, t)];
        if self.mode.uses_pitch() {
            parts.push(tape.tile_time(psi_p.expect("pitch conditioning required"), t));
        }
        if self.mode.uses_volume() {
            parts.push(tape.tile_time(psi_v.expect("volume conditioning required"), t));
        }
        let mut h = tape.concat_last(&parts);
        for conv in &self.dec {
            h = tape.relu(conv.forward(tape, h));
        }
        let flat = tape.reshape(h, &[b * t, self.d]);
        let out = self.dec_out.forward(tape, flat);
        tape.reshape(out, &[b, t, N_MELS])
    }

    /// CPC loss on the tape over straight-through codes `q_st [B, T, d]`:
    /// an LSTM produces context, per-step linear predictors score the true
    /// future code against `n_neg` codes drawn from other positions of the
    /// batch, and the InfoNCE cross-entropy is averaged over every valid
    /// (t, k).
    pub fn cpc_loss_tape<T: Real>(
        &self,
        tape: &Tape<T>,
        q_st: Var,
        n_neg: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Var> {
        let shape = tape.shape(q_st);
        let (b, t, d) = (shape[0], shape[1], shape[2]);
        let kmax = self.cpc_k.min(t.saturating_sub(1));
        if kmax == 0 {
            return Err(Error::Eval(format!("no valid CPC predictions for T={t}")));
        }
        let qflat = tape.reshape(q_st, &[b * t, d]);
        let ctx = self.lstm.forward(tape, q_st);
        let bt = b * t;
        let mut per_k = Vec::with_capacity(kmax);
        for k in 1..=kmax {
            let m = b * (t - k);
            let ctx_k = tape.reshape(tape.slice_time(ctx, 0, t - k), &[m, d]);
            let z = self.preds[k - 1].forward(tape, ctx_k);
            let mut cand_idx = Vec::with_capacity(m * (n_neg + 1));
            for bi in 0..b {
                for ti in 0..t - k {
                    let pos = bi * t + ti + k;
                    cand_idx.push(pos);
                    for _ in 0..n_neg {
                        // uniform over all other (item, time) positions
                        let r = rng.random_range(0..bt - 1);
                        cand_idx.push(if r >= pos { r + 1 } else { r });
                    }
                }
            }
            let cands = tape.gather_rows(qflat, &cand_idx);
            per_k.push(tape.nce_scores(z, cands, n_neg + 1));
        }
        let all = if per_k.len() == 1 { per_k[0] } else { tape.concat_rows(&per_k) };
        Ok(tape.softmax_ce_rows(all))
    }

    /// Full training loss `L_rec + L_vq + L_cpc` for a batch of normalized
    /// mel crops. Prosody representations come precomputed from the frozen
    /// encoder (no gradient can reach it). Returns the loss node and the
    /// detached part values.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_loss<T: Real>(
        &self,
        tape: &Tape<T>,
        params: &Params<T>,
        x: Var,
        psi_p: Option<Tensor<T>>,
        psi_v: Option<Tensor<T>>,
        beta: f64,
        n_neg: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Var, VcParts)> {
        let shape = tape.shape(x);
        let (b, t) = (shape[0], shape[1]);
        if t < 2 {
            return Err(Error::InputTooShort { got: t, need: 2 });
        }
        if self.mode.uses_pitch() && psi_p.is_none() {
            return Err(Error::Config("pitch conditioning required but missing".into()));
        }
        if self.mode.uses_volume() && psi_v.is_none() {
            return Err(Error::Config("volume conditioning required but missing".into()));
        }

        let e = self.encode_content_tape(tape, x);
        let e_val = tape.value(e);
        let book_val = params.get(self.codebook).clone();
        let indices = nearest_indices(&e_val, &book_val);

        // straight-through codes feed the decoder and CPC
        let q_st = tape.straight_through(e, &book_val, &indices);

        // VQ loss: first term moves the codebook, second term the encoder
        let q_book = tape.reshape(
            tape.gather_rows(tape.param(self.codebook), &indices),
            &[b, t, self.d],
        );
        let sg_e = tape.detach(e);
        let term1 = tape.mse_loss(sg_e, q_book);
        let sg_q = tape.detach(q_book);
        let term2 = tape.mse_loss(e, sg_q);
        let l_vq = tape.add(term1, tape.scale(term2, T::of_f64(beta)));

        // speaker characteristic: time-mean residual, codes detached so the
        // codebook only learns from the VQ loss
        let s = tape.mean_time(tape.sub(e, sg_q));

        let l_cpc = self.cpc_loss_tape(tape, q_st, n_neg, rng)?;

        let psi_p_var = psi_p.map(|p| tape.input(p));
        let psi_v_var = psi_v.map(|p| tape.input(p));
        let x_hat = self.decode_tape(tape, q_st, s, psi_p_var, psi_v_var);
        let l_rec = tape.add(tape.l1_loss(x_hat, x), tape.mse_loss(x_hat, x));

        let total = tape.add(tape.add(l_rec, l_vq), l_cpc);
        let parts = VcParts {
            rec: tape.value(l_rec).item().into_f64(),
            vq: tape.value(l_vq).item().into_f64(),
            cpc: tape.value(l_cpc).item().into_f64(),
        };
        Ok((total, parts))
    }
}

/// Detached loss components of one VC forward pass.
#[derive(Debug, Clone, Copy)]
pub struct VcParts {
    pub rec: f64,
    pub vq: f64,
    pub cpc: f64,
}

impl VcParts {
    pub fn total(&self) -> f64 {
        self.rec + self.vq + self.cpc
    }
}

/// Nearest codebook row per frame by squared Euclidean distance, ties broken
/// by the lowest index. `e` is `[.., d]` viewed as rows.
pub fn nearest_indices<T: Real>(e: &Tensor<T>, book: &Tensor<T>) -> Vec<usize> {
    let d = *book.shape().last().unwrap();
    assert_eq!(book.shape().len(), 2);
    assert_eq!(e.len() % d, 0, "encoder output width must match codebook dim");
    let v = book.shape()[0];
    let rows = e.len() / d;
    let mut out = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &e.data()[r * d..(r + 1) * d];
        let mut best = 0usize;
        let mut best_dist = T::infinity();
        for c in 0..v {
            let code = &book.data()[c * d..(c + 1) * d];
            let mut dist = T::zero();
            for (&a, &b) in row.iter().zip(code) {
                let diff = a - b;
                dist += diff * diff;
            }
            if dist < best_dist {
                best_dist = dist;
                best = c;
            }
        }
        out.push(best);
    }
    out
}

/// Value-level vector quantization of `[.., d]` rows against a codebook.
pub fn quantize<T: Real>(e: &Tensor<T>, book: &Tensor<T>) -> ContentCodes<T> {
    let d = *book.shape().last().unwrap();
    let indices = nearest_indices(e, book);
    let mut q = Tensor::zeros(e.shape());
    for (r, &i) in indices.iter().enumerate() {
        q.data_mut()[r * d..(r + 1) * d].copy_from_slice(&book.data()[i * d..(i + 1) * d]);
    }
    ContentCodes { q, indices }
}

/// `||sg[E] - Q||^2 + beta ||E - sg[Q]||^2`, both terms mean-reduced per
/// element (value form; gradient routing is exercised on the tape).
pub fn vq_loss_value<T: Real>(e: &Tensor<T>, q: &Tensor<T>, beta: f64) -> Result<f64> {
    if e.shape() != q.shape() {
        return Err(Error::ShapeMismatch {
            op: "vq_loss",
            details: format!("{:?} vs {:?}", e.shape(), q.shape()),
        });
    }
    let n = e.len() as f64;
    let mse: f64 = e
        .data()
        .iter()
        .zip(q.data())
        .map(|(&a, &b)| {
            let d = a.into_f64() - b.into_f64();
            d * d
        })
        .sum::<f64>()
        / n;
    Ok(mse + beta * mse)
}

/// `mean |I - I_hat| + mean (I - I_hat)^2`.
pub fn recon_loss_value<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op: "recon_loss",
            details: format!("{:?} vs {:?}", a.shape(), b.shape()),
        });
    }
    let n = a.len() as f64;
    let (mut l1, mut l2) = (0.0, 0.0);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let d = x.into_f64() - y.into_f64();
        l1 += d.abs();
        l2 += d * d;
    }
    Ok(l1 / n + l2 / n)
}

/// `S = (1/T) sum_t (e_t - q_t)` over `[T, d]` rows.
pub fn speaker_embedding_value<T: Real>(e: &Tensor<T>, q: &Tensor<T>) -> Result<Vec<f64>> {
    if e.shape() != q.shape() {
        return Err(Error::ShapeMismatch {
            op: "speaker_embedding",
            details: format!("{:?} vs {:?}", e.shape(), q.shape()),
        });
    }
    let d = *e.shape().last().unwrap();
    let rows = e.len() / d;
    let mut s = vec![0.0; d];
    for r in 0..rows {
        for j in 0..d {
            s[j] += e.data()[r * d + j].into_f64() - q.data()[r * d + j].into_f64();
        }
    }
    s.iter_mut().for_each(|v| *v /= rows as f64);
    Ok(s)
}

/// Cosine similarity; zero-norm inputs give None.
pub fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    assert_eq!(a.len(), b.len());
    let na: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Some(dot / (na * nb))
}

/// Value-level content encoding of one mel: `[T, d]`.
pub fn encode_content<T: Real>(
    params: &Params<T>,
    model: &VcModel,
    mel: &MelSpectrogram,
) -> Result<Tensor<T>> {
    if mel.n_frames() < 2 {
        return Err(Error::InputTooShort { got: mel.n_frames(), need: 2 });
    }
    let tape = Tape::new(params);
    let x = tape.input(mel_to_tensor(mel));
    let e = model.encode_content_tape(&tape, x);
    let t = mel.n_frames();
    tape.value(e).reshaped(&[t, model.d])
}

/// Everything the conversion path extracts from a target utterance.
pub struct TargetConditioning<T> {
    pub s: Tensor<T>,
    pub psi_p: Option<Tensor<T>>,
    pub psi_v: Option<Tensor<T>>,
}

/// Extract `(S, psi_p, psi_v)` from a target mel with the frozen prosody
/// encoder and the VC content pathway.
pub fn target_conditioning<T: Real>(
    vc_params: &Params<T>,
    vc_model: &VcModel,
    prosody_params: &Params<T>,
    prosody_model: &ProsodyModel,
    target_mel: &MelSpectrogram,
) -> Result<TargetConditioning<T>> {
    if target_mel.n_frames() < MIN_FRAMES {
        return Err(Error::InputTooShort { got: target_mel.n_frames(), need: MIN_FRAMES });
    }
    let e = encode_content(vc_params, vc_model, target_mel)?;
    let codes = quantize(&e, vc_params.get(vc_model.codebook));
    let s64 = speaker_embedding_value(&e, &codes.q)?;
    let s = Tensor::from_vec(&[1, vc_model.d], s64.iter().map(|&v| T::of_f64(v)).collect())?;
    let (psi_p, psi_v) = if vc_model.mode == ProsodyMode::None {
        (None, None)
    } else {
        let (p, v) = encode_prosody(prosody_params, prosody_model, target_mel)?;
        let to_tensor = |vals: Vec<f64>| {
            Tensor::from_vec(
                &[1, vc_model.d_psi],
                vals.iter().map(|&v| T::of_f64(v)).collect(),
            )
            .unwrap()
        };
        (
            vc_model.mode.uses_pitch().then(|| to_tensor(p)),
            vc_model.mode.uses_volume().then(|| to_tensor(v)),
        )
    };
    Ok(TargetConditioning { s, psi_p, psi_v })
}

/// Zero-shot conversion: content codes from the source, speaker and prosody
/// conditioning from the target. Output length equals the source length.
/// With `target == source` this is exactly the reconstruction path.
pub fn convert<T: Real>(
    vc_params: &Params<T>,
    vc_model: &VcModel,
    prosody_params: &Params<T>,
    prosody_model: &ProsodyModel,
    source_mel: &MelSpectrogram,
    target_mel: &MelSpectrogram,
) -> Result<MelSpectrogram> {
    let t = source_mel.n_frames();
    if t < 2 {
        return Err(Error::InputTooShort { got: t, need: 2 });
    }
    let cond = target_conditioning(vc_params, vc_model, prosody_params, prosody_model, target_mel)?;
    let e_src = encode_content(vc_params, vc_model, source_mel)?;
    let codes = quantize(&e_src, vc_params.get(vc_model.codebook));

    let tape = Tape::new(vc_params);
    let q = tape.input(codes.q.clone().reshaped(&[1, t, vc_model.d])?);
    let s = tape.input(cond.s);
    let psi_p = cond.psi_p.map(|p| tape.input(p));
    let psi_v = cond.psi_v.map(|p| tape.input(p));
    let out = vc_model.decode_tape(&tape, q, s, psi_p, psi_v);
    Ok(tensor_to_mel(&tape.value(out)))
}

/// Reconstruction is self-conversion.
pub fn reconstruct<T: Real>(
    vc_params: &Params<T>,
    vc_model: &VcModel,
    prosody_params: &Params<T>,
    prosody_model: &ProsodyModel,
    mel: &MelSpectrogram,
) -> Result<MelSpectrogram> {
    convert(vc_params, vc_model, prosody_params, prosody_model, mel, mel)
}
