use super::*;
use crate::signal::estimate_f0;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn test_speaker(base_f0: f64, gain_db: f64) -> SyntheticSpeaker {
    SyntheticSpeaker {
        id: "test".into(),
        base_f0,
        f0_spread: 0.0,
        base_gain_db: gain_db,
        group: if base_f0 < GROUP_SPLIT_HZ { PitchGroup::LowPitch } else { PitchGroup::HighPitch },
        formants: [500.0, 1500.0, 2600.0],
    }
}

#[test]
fn rendered_f0_matches_ground_truth() {
    let spk = test_speaker(120.0, -6.0);
    let utt = render_utterance(&spk, &[0, 3, 7, 11], 42).unwrap();
    let est = estimate_f0(&utt.waveform).voiced_median().unwrap();
    assert!(
        (est - utt.f0_mean_hz).abs() / utt.f0_mean_hz < 0.02,
        "est {est} vs stored {}",
        utt.f0_mean_hz
    );
    // with zero spread the utterance F0 stays near the speaker base
    assert!((utt.f0_mean_hz - 120.0).abs() / 120.0 < 0.05);
}

#[test]
fn rendered_gain_follows_speaker_gain() {
    let loud = test_speaker(140.0, -6.0);
    let quiet = test_speaker(140.0, -12.0);
    let a = render_utterance(&loud, &[1, 2, 3, 4], 9).unwrap();
    let b = render_utterance(&quiet, &[1, 2, 3, 4], 9).unwrap();
    let want = 10.0_f64.powf(6.0 / 20.0);
    let ratio = a.rms / b.rms;
    assert!((ratio - want).abs() / want < 0.02, "ratio {ratio} want {want}");
}

#[test]
fn render_is_deterministic() {
    let spk = test_speaker(200.0, -3.0);
    let a = render_utterance(&spk, &[5, 5, 9, 2], 7).unwrap();
    let b = render_utterance(&spk, &[5, 5, 9, 2], 7).unwrap();
    assert_eq!(a.waveform.samples, b.waveform.samples);
    assert_eq!(a.f0_mean_hz, b.f0_mean_hz);
}

#[test]
fn render_rejects_unknown_token() {
    let spk = test_speaker(150.0, -6.0);
    assert!(render_utterance(&spk, &[0, VOCAB_SIZE], 1).is_err());
}

#[test]
fn rendered_length_is_token_count_plus_fade() {
    let spk = test_speaker(150.0, -6.0);
    let utt = render_utterance(&spk, &[0, 1, 2, 3, 4, 5], 3).unwrap();
    assert_eq!(utt.waveform.len(), 6 * TOKEN_SAMPLES + FADE_SAMPLES);
}

#[test]
fn gen_corpus_counts_and_split() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = gen_corpus(dir.path(), 6, 2, 11).unwrap();
    assert_eq!(manifest.entries.len(), 12);
    let seen = manifest.split_speakers(Split::Seen);
    let unseen = manifest.split_speakers(Split::Unseen);
    assert_eq!(seen.len(), 4); // 6 - ceil(6/5) = 4... ceil(1.2) = 2
    assert_eq!(unseen.len(), 2);
    // split hygiene: disjoint speaker sets
    for s in &seen {
        assert!(!unseen.contains(s));
    }
    // group separation by construction
    let speakers = load_speakers(dir.path()).unwrap();
    for s in &speakers {
        match s.group {
            PitchGroup::LowPitch => assert!(s.base_f0 < GROUP_SPLIT_HZ),
            PitchGroup::HighPitch => assert!(s.base_f0 >= GROUP_SPLIT_HZ),
        }
    }
    // files exist and manifest round-trips
    for e in &manifest.entries {
        assert!(e.path.exists(), "{:?}", e.path);
    }
    let back = Manifest::load(&dir.path().join("manifest.jsonl")).unwrap();
    assert_eq!(back.entries.len(), manifest.entries.len());
}

#[test]
fn two_speaker_corpus_splits_one_and_one() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = gen_corpus(dir.path(), 2, 1, 5).unwrap();
    assert_eq!(manifest.split_speakers(Split::Seen).len(), 1);
    assert_eq!(manifest.split_speakers(Split::Unseen).len(), 1);
}

#[test]
fn gen_corpus_is_byte_identical_across_runs() {
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    gen_corpus(d1.path(), 2, 2, 123).unwrap();
    gen_corpus(d2.path(), 2, 2, 123).unwrap();
    let m1 = std::fs::read(d1.path().join("manifest.jsonl")).unwrap();
    let m2 = std::fs::read(d2.path().join("manifest.jsonl")).unwrap();
    // manifests embed absolute paths; compare per-line with paths stripped
    let strip = |b: &[u8]| {
        String::from_utf8_lossy(b)
            .lines()
            .map(|l| l.split("\"speaker\"").nth(1).unwrap().to_string())
            .collect::<Vec<_>>()
    };
    assert_eq!(strip(&m1), strip(&m2));
    let w1 = std::fs::read(d1.path().join("wav/spk000/utt0000.wav")).unwrap();
    let w2 = std::fs::read(d2.path().join("wav/spk000/utt0000.wav")).unwrap();
    assert_eq!(w1, w2, "audio bytes differ across identical seeds");
}

#[test]
fn ground_truth_consistency_over_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = gen_corpus(dir.path(), 4, 3, 77).unwrap();
    let corpus = LoadedCorpus::load(&manifest).unwrap();
    for u in &corpus.utterances {
        let est = estimate_f0(&u.waveform).voiced_median().unwrap();
        let rel = (est - u.entry.f0_mean_hz).abs() / u.entry.f0_mean_hz;
        assert!(rel <= 0.02, "{}: est {est} vs gt {} ({rel})", u.entry.speaker, u.entry.f0_mean_hz);
    }
}

#[test]
fn pair_labels_are_exclusive() {
    let spk = test_speaker(160.0, -6.0);
    let utt = render_utterance(&spk, &[0, 1, 2, 3], 21).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(500);
    let mut saw_pitch = false;
    let mut saw_volume = false;
    for _ in 0..40 {
        let pair = make_prosody_pair(&utt.waveform, &mut rng).unwrap();
        let p_moved = pair.tau_p != 0.5;
        let v_moved = pair.tau_v != 0.5;
        assert!(p_moved ^ v_moved, "exactly one label must move: {:?}", (pair.tau_p, pair.tau_v));
        assert_eq!(pair.mel_i.n_frames(), pair.mel_j.n_frames());
        saw_pitch |= p_moved;
        saw_volume |= v_moved;
    }
    assert!(saw_pitch && saw_volume);
}

#[test]
fn mel_batches_have_declared_shape_and_are_seeded() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = gen_corpus(dir.path(), 2, 2, 3).unwrap();
    let corpus = LoadedCorpus::load(&manifest).unwrap();
    let pool: Vec<usize> = (0..corpus.utterances.len()).collect();
    let mut a = MelBatcher::new(&corpus, pool.clone(), 4, 128, 99);
    let mut b = MelBatcher::new(&corpus, pool, 4, 128, 99);
    let ba = a.next_batch();
    let bb = b.next_batch();
    assert_eq!(ba.data.len(), 4 * 128 * 80);
    assert_eq!(ba.data, bb.data, "same seed must give the same batch");
    assert_eq!(ba.item_indices, bb.item_indices);
}

#[test]
fn short_utterance_is_padded_with_flag() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = gen_corpus(dir.path(), 2, 1, 8).unwrap();
    let corpus = LoadedCorpus::load(&manifest).unwrap();
    let t = corpus.utterances[0].mel.n_frames();
    let crop = t + 40; // force padding
    let pool = vec![0usize];
    let mut batcher = MelBatcher::new(&corpus, pool, 1, crop, 1);
    let batch = batcher.next_batch();
    assert!(batch.any_padded);
    // padded region repeats the last frame
    let last_real = &batch.data[(t - 1) * 80..t * 80];
    let padded = &batch.data[t * 80..(t + 1) * 80];
    assert_eq!(last_real, padded);
}

#[test]
fn pair_batches_are_deterministic_and_labeled() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = gen_corpus(dir.path(), 2, 2, 4).unwrap();
    let corpus = LoadedCorpus::load(&manifest).unwrap();
    let pool: Vec<usize> = (0..corpus.utterances.len()).collect();
    let mut a = PairBatcher::new(&corpus, pool.clone(), 3, 64, 7);
    let mut b = PairBatcher::new(&corpus, pool, 3, 64, 7);
    let ba = a.next_batch().unwrap();
    let bb = b.next_batch().unwrap();
    assert_eq!(ba.mel_i, bb.mel_i);
    assert_eq!(ba.mel_j, bb.mel_j);
    assert_eq!(ba.tau_p, bb.tau_p);
    for i in 0..3 {
        assert!((ba.tau_p[i] == 0.5) ^ (ba.tau_v[i] == 0.5));
    }
}

#[test]
fn ingest_empty_dir_errors() {
    let dir = tempfile::tempdir().unwrap();
    let err = ingest_wav_dir(dir.path(), None).unwrap_err();
    assert!(err.to_string().contains("no usable audio"), "{err}");
}

#[test]
fn ingest_counts_speakers_and_files() {
    let dir = tempfile::tempdir().unwrap();
    for (spk, f0) in [("alice", 210.0), ("bob", 110.0)] {
        let sdir = dir.path().join(spk);
        std::fs::create_dir_all(&sdir).unwrap();
        let speaker = test_speaker(f0, -6.0);
        for i in 0..3 {
            let utt = render_utterance(&speaker, &[0, 1, 2, 3], i).unwrap();
            crate::signal::write_wav(&sdir.join(format!("u{i}.wav")), &utt.waveform).unwrap();
        }
    }
    let manifest = ingest_wav_dir(dir.path(), None).unwrap();
    assert_eq!(manifest.entries.len(), 6);
    assert_eq!(manifest.speakers().len(), 2);
    // group inferred from measured F0
    for e in &manifest.entries {
        match e.speaker.as_str() {
            "alice" => assert_eq!(e.group, PitchGroup::HighPitch),
            "bob" => assert_eq!(e.group, PitchGroup::LowPitch),
            other => panic!("unexpected speaker {other}"),
        }
    }
}

#[test]
fn ingest_resamples_foreign_rates() {
    let dir = tempfile::tempdir().unwrap();
    let sdir = dir.path().join("carol");
    std::fs::create_dir_all(&sdir).unwrap();
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: 48000,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(sdir.join("x.wav"), spec).unwrap();
    for i in 0..48000 {
        let v = 0.3 * (2.0 * std::f64::consts::PI * 180.0 * i as f64 / 48000.0).sin();
        writer.write_sample((v * 32767.0) as i16).unwrap();
    }
    writer.finalize().unwrap();
    let manifest = ingest_wav_dir(dir.path(), None).unwrap();
    assert_eq!(manifest.entries.len(), 1);
    // stats were measured after resampling to 22050
    let w = read_wav(&manifest.entries[0].path).unwrap();
    assert_eq!(w.sample_rate, 22050);
    assert!((manifest.entries[0].f0_mean_hz - 180.0).abs() < 5.0);
}
