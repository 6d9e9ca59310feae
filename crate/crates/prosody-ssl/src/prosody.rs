//! Self-supervised prosody encoder and Rank modules.
//!
//! The encoder maps a mel spectrogram to a pitch representation `psi_p` and
//! a volume representation `psi_v`; one affine Rank module per prosody turns
//! a representation into a scalar intensity score. Training compares the
//! scores of an (original, augmented) pair through a sigmoid of their
//! difference and cross-entropy against the augmentation intensity `tau`.

use rand_chacha::ChaCha8Rng;

use crate::corpus::PairBatch;
use crate::error::{Error, Result};
use crate::features::{batch_to_tensor, mel_to_tensor};
use crate::grad::nn::{Conv1d, Dense};
use crate::grad::{PadMode, Params, Real, Tape, Var};
use crate::signal::MelSpectrogram;
use crate::train::adam::{adam_step, AdamState};

/// Minimum input length in frames (four stride-2 layers).
pub const MIN_FRAMES: usize = 16;

/// Conv trunk (4 layers, kernel 5, stride 2), temporal mean pool, and two
/// affine heads producing `psi_p` and `psi_v`.
#[derive(Debug, Clone)]
pub struct ProsodyEncoder {
    convs: Vec<Conv1d>,
    head_p: Dense,
    head_v: Dense,
    pub hidden: usize,
    pub d_psi: usize,
}

impl ProsodyEncoder {
    pub fn new<T: Real>(
        params: &mut Params<T>,
        prefix: &str,
        hidden: usize,
        d_psi: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut convs = Vec::with_capacity(4);
        let mut cin = crate::signal::N_MELS;
        for i in 0..4 {
            convs.push(Conv1d::new(
                params,
                &format!("{prefix}.conv{i}"),
                cin,
                hidden,
                5,
                2,
                2,
                PadMode::Circular,
                rng,
            ));
            cin = hidden;
        }
        let head_p = Dense::new(params, &format!("{prefix}.head_p"), hidden, d_psi, rng);
        let head_v = Dense::new(params, &format!("{prefix}.head_v"), hidden, d_psi, rng);
        ProsodyEncoder { convs, head_p, head_v, hidden, d_psi }
    }

    /// `[B, T, 80] -> (psi_p [B, d], psi_v [B, d])`. Panics if `T < 16`;
    /// public entry points validate first.
    pub fn forward<T: Real>(&self, tape: &Tape<T>, x: Var) -> (Var, Var) {
        let t_in = tape.shape(x)[1];
        assert!(t_in >= MIN_FRAMES, "prosody encoder needs T >= {MIN_FRAMES}, got {t_in}");
        let mut h = x;
        for conv in &self.convs {
            h = tape.relu(conv.forward(tape, h));
        }
        let pooled = tape.mean_time(h);
        (self.head_p.forward(tape, pooled), self.head_v.forward(tape, pooled))
    }
}

/// Two affine maps from prosody representations to scalar rank scores.
#[derive(Debug, Clone)]
pub struct RankModule {
    pitch: Dense,
    volume: Dense,
}

impl RankModule {
    pub fn new<T: Real>(
        params: &mut Params<T>,
        prefix: &str,
        d_psi: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        RankModule {
            pitch: Dense::new(params, &format!("{prefix}.pitch"), d_psi, 1, rng),
            volume: Dense::new(params, &format!("{prefix}.volume"), d_psi, 1, rng),
        }
    }

    /// `(psi_p, psi_v) [B, d] -> (r_p, r_v) [B]`.
    pub fn scores<T: Real>(&self, tape: &Tape<T>, psi_p: Var, psi_v: Var) -> (Var, Var) {
        let b = tape.shape(psi_p)[0];
        let rp = tape.reshape(self.pitch.forward(tape, psi_p), &[b]);
        let rv = tape.reshape(self.volume.forward(tape, psi_v), &[b]);
        (rp, rv)
    }
}

/// Encoder plus rank heads, registered in one parameter set.
#[derive(Debug, Clone)]
pub struct ProsodyModel {
    pub enc: ProsodyEncoder,
    pub rank: RankModule,
}

impl ProsodyModel {
    pub fn new<T: Real>(
        params: &mut Params<T>,
        hidden: usize,
        d_psi: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        ProsodyModel {
            enc: ProsodyEncoder::new(params, "enc", hidden, d_psi, rng),
            rank: RankModule::new(params, "rank", d_psi, rng),
        }
    }
}

/// Value-level prosody representations of one mel spectrogram.
pub fn encode_prosody<T: Real>(
    params: &Params<T>,
    model: &ProsodyModel,
    mel: &MelSpectrogram,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if mel.n_frames() < MIN_FRAMES {
        return Err(Error::InputTooShort { got: mel.n_frames(), need: MIN_FRAMES });
    }
    let tape = Tape::new(params);
    let x = tape.input(mel_to_tensor(mel));
    let (psi_p, psi_v) = model.enc.forward(&tape, x);
    let to_vec = |v: Var| tape.value(v).data().iter().map(|x| x.into_f64()).collect();
    Ok((to_vec(psi_p), to_vec(psi_v)))
}

/// Value-level rank scores of one mel spectrogram.
pub fn rank_scores<T: Real>(
    params: &Params<T>,
    model: &ProsodyModel,
    mel: &MelSpectrogram,
) -> Result<(f64, f64)> {
    if mel.n_frames() < MIN_FRAMES {
        return Err(Error::InputTooShort { got: mel.n_frames(), need: MIN_FRAMES });
    }
    let tape = Tape::new(params);
    let x = tape.input(mel_to_tensor(mel));
    let (psi_p, psi_v) = model.enc.forward(&tape, x);
    let (rp, rv) = model.rank.scores(&tape, psi_p, psi_v);
    Ok((tape.value(rp).item().into_f64(), tape.value(rv).item().into_f64()))
}

/// Probability that the first input ranks higher than the second:
/// `1 / (1 + exp(-(r_i - r_j)))`, evaluated in a saturation-safe form.
pub fn pair_probability(r_i: f64, r_j: f64) -> f64 {
    let d = r_i - r_j;
    if d >= 0.0 {
        1.0 / (1.0 + (-d).exp())
    } else {
        let e = d.exp();
        e / (1.0 + e)
    }
}

/// Rank cross-entropy `-tau ln(p) - (1-tau) ln(1-p)`. Minimized over `p` at
/// `p = tau`, where it equals the binary entropy of `tau`.
pub fn rank_loss(p: f64, tau: f64) -> f64 {
    -tau * p.ln() - (1.0 - tau) * (1.0 - p).ln()
}

/// The same loss evaluated directly from the score difference (never through
/// a saturated probability): `(1 - tau) * d + softplus(-d)`.
pub fn rank_loss_from_scores(r_i: f64, r_j: f64, tau: f64) -> f64 {
    let d = r_i - r_j;
    let softplus_neg = if d >= 0.0 { (-d).exp().ln_1p() } else { -d + d.exp().ln_1p() };
    (1.0 - tau) * d + softplus_neg
}

/// Per-pair losses of one augmentation pair: `(L_total, L_p, L_v)` with
/// `L_total = L_p + L_v`.
pub fn prosody_loss<T: Real>(
    params: &Params<T>,
    model: &ProsodyModel,
    pair: &crate::corpus::ProsodyPair,
) -> Result<(f64, f64, f64)> {
    let (rp_i, rv_i) = rank_scores(params, model, &pair.mel_i)?;
    let (rp_j, rv_j) = rank_scores(params, model, &pair.mel_j)?;
    let l_p = rank_loss_from_scores(rp_i, rp_j, pair.tau_p);
    let l_v = rank_loss_from_scores(rv_i, rv_j, pair.tau_v);
    Ok((l_p + l_v, l_p, l_v))
}

/// Batch losses on the tape: encodes originals and augmented members in one
/// pass, scores both heads, and applies the rank cross-entropy to each score
/// difference. Returns `(loss_var, l_p, l_v)`.
pub fn batch_loss<T: Real>(
    tape: &Tape<T>,
    model: &ProsodyModel,
    batch: &PairBatch,
) -> (Var, f64, f64) {
    let b = batch.batch;
    let xi = batch_to_tensor::<T>(&batch.mel_i, b, batch.crop);
    let xj = batch_to_tensor::<T>(&batch.mel_j, b, batch.crop);
    let x = {
        let vi = tape.input(xi);
        let vj = tape.input(xj);
        tape.concat_rows(&[vi, vj])
    };
    let (psi_p, psi_v) = model.enc.forward(tape, x);
    let (rp, rv) = model.rank.scores(tape, psi_p, psi_v);
    let delta_p = tape.sub(tape.slice_rows(rp, 0, b), tape.slice_rows(rp, b, 2 * b));
    let delta_v = tape.sub(tape.slice_rows(rv, 0, b), tape.slice_rows(rv, b, 2 * b));
    let tau_p: Vec<T> = batch.tau_p.iter().map(|&t| T::of_f64(t)).collect();
    let tau_v: Vec<T> = batch.tau_v.iter().map(|&t| T::of_f64(t)).collect();
    let l_p = tape.rank_bce(delta_p, &tau_p);
    let l_v = tape.rank_bce(delta_v, &tau_v);
    let total = tape.add(l_p, l_v);
    (total, tape.value(l_p).item().into_f64(), tape.value(l_v).item().into_f64())
}

/// One training step: mean pair loss over the batch, one Adam update.
/// Returns the pre-update `(loss, l_p, l_v)`.
pub fn train_step_prosody(
    params: &mut Params<f32>,
    model: &ProsodyModel,
    batch: &PairBatch,
    opt: &mut AdamState<f32>,
    lr: f64,
    grad_clip: Option<f64>,
) -> Result<(f64, f64, f64)> {
    let (loss_var, l_p, l_v, grads) = {
        let tape = Tape::new(params);
        let (loss_var, l_p, l_v) = batch_loss(&tape, model, batch);
        let loss = tape.value(loss_var).item() as f64;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("prosody loss at lr {lr}")));
        }
        let grads = tape.backward(loss_var);
        (loss, l_p, l_v, grads)
    };
    adam_step(params, &grads, opt, lr, grad_clip)?;
    Ok((loss_var, l_p, l_v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{make_prosody_pair, render_utterance, PitchGroup, SyntheticSpeaker};
    use rand::SeedableRng;

    fn speaker() -> SyntheticSpeaker {
        SyntheticSpeaker {
            id: "t".into(),
            base_f0: 150.0,
            f0_spread: 0.05,
            base_gain_db: -6.0,
            group: PitchGroup::LowPitch,
            formants: [500.0, 1500.0, 2600.0],
        }
    }

    fn small_model(seed: u64) -> (Params<f64>, ProsodyModel) {
        let mut params = Params::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = ProsodyModel::new(&mut params, 16, 8, &mut rng);
        (params, model)
    }

    #[test]
    fn pair_probability_examples() {
        assert_eq!(pair_probability(1.0, 1.0), 0.5);
        let p = pair_probability(3.0_f64.ln(), 0.0);
        assert!((p - 0.75).abs() < 1e-12, "{p}");
        // numerically stable at large differences
        let p = pair_probability(30.0, 0.0);
        assert!(p >= 1.0 - 1e-13 && p <= 1.0);
        let p = pair_probability(0.0, 30.0);
        assert!(p > 0.0 && p <= 1e-13);
        let p = pair_probability(0.0, 800.0);
        assert!(p >= 0.0 && p.is_finite());
    }

    #[test]
    fn pair_probability_antisymmetry() {
        for (a, b) in [(0.3, -1.2), (5.0, 4.0), (-2.0, 7.5), (0.0, 0.0)] {
            let s = pair_probability(a, b) + pair_probability(b, a);
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn pair_probability_shift_invariance() {
        // dyadic scores and shifts keep the additions exact, making the
        // dependence on the difference alone visible bit for bit
        for c in [-128.0, -1.0, 0.0, 4.5, 256.0] {
            let p = pair_probability(1.25, 0.5);
            let q = pair_probability(1.25 + c, 0.5 + c);
            assert_eq!(p, q, "shift {c} changed p");
        }
    }

    #[test]
    fn rank_loss_examples() {
        let l = rank_loss(0.5, 0.5);
        assert!((l - 2.0_f64.ln()).abs() < 1e-12, "{l}");
        let l = rank_loss(0.8, 0.8);
        let entropy = -0.8 * 0.8_f64.ln() - 0.2 * 0.2_f64.ln();
        assert!((l - entropy).abs() < 1e-12);
        assert!((l - 0.500402).abs() < 1e-6);
    }

    #[test]
    fn rank_loss_gradient_vanishes_at_p_equals_tau() {
        // dL/dp at p = tau is 0 by finite differences
        let tau = 0.37;
        let h = 1e-6;
        let d = (rank_loss(tau + h, tau) - rank_loss(tau - h, tau)) / (2.0 * h);
        assert!(d.abs() < 1e-6, "dL/dp at p=tau was {d}");
    }

    #[test]
    fn rank_loss_floor_is_binary_entropy() {
        // minimize over the score difference at 20 deterministic tau values;
        // the minimum must match the binary entropy of tau at p = tau
        for i in 1..=20 {
            let tau = i as f64 / 21.0;
            let entropy = -tau * tau.ln() - (1.0 - tau) * (1.0 - tau).ln();
            let mut best = f64::INFINITY;
            let mut best_d = 0.0;
            for j in -4000..=4000 {
                let d = j as f64 * 0.005;
                let l = rank_loss_from_scores(d, 0.0, tau);
                if l < best {
                    best = l;
                    best_d = d;
                }
            }
            assert!(best + 1e-9 >= entropy, "tau {tau}: floor violated");
            assert!((best - entropy).abs() < 1e-4, "tau {tau}: min {best} vs entropy {entropy}");
            // minimizing d satisfies sigmoid(d) = tau
            let p = pair_probability(best_d, 0.0);
            assert!((p - tau).abs() < 0.01, "tau {tau}: argmin p {p}");
        }
    }

    #[test]
    fn stable_and_probability_forms_agree() {
        for (d, tau) in [(0.0, 0.5), (1.7, 0.3), (-2.2, 0.8), (4.0, 0.05)] {
            let p = pair_probability(d, 0.0);
            let a = rank_loss(p, tau);
            let b = rank_loss_from_scores(d, 0.0, tau);
            assert!((a - b).abs() < 1e-10, "d {d} tau {tau}: {a} vs {b}");
        }
    }

    #[test]
    fn encoder_dimension_echo_and_determinism() {
        let (params, model) = small_model(3);
        assert_eq!(model.enc.d_psi, 8);
        let utt = render_utterance(&speaker(), &[0, 1, 2, 3], 5).unwrap();
        let mel = crate::signal::mel_spectrogram(&utt.waveform).unwrap();
        let (p1, v1) = encode_prosody(&params, &model, &mel).unwrap();
        let (p2, v2) = encode_prosody(&params, &model, &mel).unwrap();
        assert_eq!(p1.len(), 8);
        assert_eq!(v1.len(), 8);
        assert_eq!(p1, p2);
        assert_eq!(v1, v2);
    }

    #[test]
    fn encoder_rejects_short_input() {
        let (params, model) = small_model(3);
        let mel = MelSpectrogram::from_frames(vec![0.0; 15 * 80], 80, 128, 1024);
        assert!(encode_prosody(&params, &model, &mel).is_err());
    }

    #[test]
    fn duplicated_input_preserves_psi() {
        let (params, model) = small_model(4);
        let utt = render_utterance(&speaker(), &[0, 1, 2, 3], 6).unwrap();
        let mel = crate::signal::mel_spectrogram(&utt.waveform).unwrap();
        let even = mel.crop(0, mel.n_frames() & !15); // multiple of 16
        let doubled = even.concat(&even);
        let (p1, v1) = encode_prosody(&params, &model, &even).unwrap();
        let (p2, v2) = encode_prosody(&params, &model, &doubled).unwrap();
        for (a, b) in p1.iter().zip(&p2).chain(v1.iter().zip(&v2)) {
            assert!((a - b).abs() < 1e-4, "{a} vs {b}");
        }
    }

    #[test]
    fn identity_pair_loss_is_two_ln_two() {
        let (params, model) = small_model(5);
        let utt = render_utterance(&speaker(), &[2, 4, 6, 8], 7).unwrap();
        let mel = crate::signal::mel_spectrogram(&utt.waveform).unwrap();
        let pair = crate::corpus::ProsodyPair {
            mel_i: mel.clone(),
            mel_j: mel,
            tau_p: 0.5,
            tau_v: 0.5,
        };
        let (total, l_p, l_v) = prosody_loss(&params, &model, &pair).unwrap();
        assert_eq!(l_p, 2.0_f64.ln());
        assert_eq!(l_v, 2.0_f64.ln());
        assert_eq!(total, 2.0 * 2.0_f64.ln());
    }

    #[test]
    fn swapping_members_and_reflecting_tau_preserves_loss() {
        let (params, model) = small_model(6);
        let utt = render_utterance(&speaker(), &[1, 3, 5, 7], 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let pair = make_prosody_pair(&utt.waveform, &mut rng).unwrap();
        let (_, l_p, l_v) = prosody_loss(&params, &model, &pair).unwrap();
        let swapped = crate::corpus::ProsodyPair {
            mel_i: pair.mel_j.clone(),
            mel_j: pair.mel_i.clone(),
            tau_p: 1.0 - pair.tau_p,
            tau_v: 1.0 - pair.tau_v,
        };
        let (_, s_p, s_v) = prosody_loss(&params, &model, &swapped).unwrap();
        assert!((l_p - s_p).abs() < 1e-6, "{l_p} vs {s_p}");
        assert!((l_v - s_v).abs() < 1e-6, "{l_v} vs {s_v}");
    }

    #[test]
    fn untouched_head_gradient_vanishes_at_equal_scores() {
        // on a pitch-augmented pair with identical mel members, the volume
        // deltas are zero, so dL_v/d(delta_v) = sigmoid(0) - 0.5 = 0
        let mut params = Params::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let model = ProsodyModel::new(&mut params, 16, 8, &mut rng);
        let utt = render_utterance(&speaker(), &[0, 2, 4, 6], 9).unwrap();
        let mel = crate::signal::mel_spectrogram(&utt.waveform).unwrap();
        let crop: Vec<f32> = (0..128 * 80).map(|i| mel.data()[i] as f32).collect();
        let batch = PairBatch {
            mel_i: crop.clone(),
            mel_j: crop,
            tau_p: vec![0.3],
            tau_v: vec![0.5],
            batch: 1,
            crop: 128,
        };
        let tape = Tape::new(&params);
        let (_, _, _) = batch_loss(&tape, &model, &batch);
        // recompute L_v alone and check its gradient w.r.t. the volume head
        let tape = Tape::new(&params);
        let xi = tape.input(batch_to_tensor::<f64>(&batch.mel_i, 1, 128));
        let xj = tape.input(batch_to_tensor::<f64>(&batch.mel_j, 1, 128));
        let x = tape.concat_rows(&[xi, xj]);
        let (_psi_p, psi_v) = model.enc.forward(&tape, x);
        let (_, rv) = model.rank.scores(&tape, _psi_p, psi_v);
        let delta_v = tape.sub(tape.slice_rows(rv, 0, 1), tape.slice_rows(rv, 1, 2));
        let l_v = tape.rank_bce(delta_v, &[0.5]);
        let grads = tape.backward(l_v);
        let gw = grads.get(model.rank.volume.w).expect("volume head gradient");
        for &g in gw.data() {
            assert!(g.abs() < 1e-12, "volume head grad should vanish, got {g}");
        }
    }

    #[test]
    fn zero_learning_rate_leaves_params_unchanged() {
        let mut params = Params::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let model = ProsodyModel::new(&mut params, 16, 8, &mut rng);
        let utt = render_utterance(&speaker(), &[0, 1, 2, 3], 10).unwrap();
        let mel = crate::signal::mel_spectrogram(&utt.waveform).unwrap();
        let crop: Vec<f32> = (0..64 * 80).map(|i| mel.data()[i] as f32).collect();
        let aug: Vec<f32> = crop.iter().map(|v| v + 0.1).collect();
        let batch = PairBatch {
            mel_i: crop,
            mel_j: aug,
            tau_p: vec![0.5],
            tau_v: vec![0.8],
            batch: 1,
            crop: 64,
        };
        let before: Vec<Vec<f32>> = (0..params.len())
            .map(|i| params.get(crate::grad::ParamId(i)).data().to_vec())
            .collect();
        let mut opt = AdamState::new(&params);
        train_step_prosody(&mut params, &model, &batch, &mut opt, 0.0, None).unwrap();
        for i in 0..params.len() {
            assert_eq!(params.get(crate::grad::ParamId(i)).data(), &before[i][..]);
        }
    }
}
