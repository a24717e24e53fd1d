//! Speaker encoder and autoregressive model behavior.

use chorale::ar::{build_target_layout, ArModel, CloneMode, Utterance};
use chorale::config::{ArConfig, SamplingConfig, SpeakerEncoderConfig};
use chorale::data::mel::MelSpectrogram;
use chorale::speaker::{ConditionSource, SpeakerCondition, SpeakerEncoder};
use chorale::tokenizer::TokenSequence;
use chorale_autograd::{rng, Tensor};
use ndarray::Array2;

fn mel_of(frames: usize, seed: u64) -> MelSpectrogram {
    let mut r = rng::seeded(seed);
    MelSpectrogram {
        frames: rng::uniform(&[frames, 80], -8.0, 1.0, &mut r)
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap(),
        frame_rate: 100.0,
    }
}

#[test]
fn speaker_embedding_dim_is_constant_over_lengths() {
    let enc = SpeakerEncoder::new(SpeakerEncoderConfig::small(), 1);
    for (i, frames) in [50usize, 77, 100, 333, 1000, 2000].iter().enumerate() {
        let cond = enc.encode(&mel_of(*frames, i as u64)).unwrap();
        assert_eq!(cond.dim(), 64);
        let norm = cond.vector.dot(&cond.vector).sqrt();
        assert!((norm - 1.0).abs() < 1e-5, "unit norm violated: {norm}");
    }
}

#[test]
fn speaker_encoding_is_deterministic() {
    let enc = SpeakerEncoder::new(SpeakerEncoderConfig::small(), 2);
    let mel = mel_of(120, 9);
    let a = enc.encode(&mel).unwrap();
    let b = enc.encode(&mel).unwrap();
    assert_eq!(a.vector, b.vector);
    assert_eq!(a.source, ConditionSource::Encoder);
}

#[test]
fn short_reference_is_rejected() {
    let enc = SpeakerEncoder::new(SpeakerEncoderConfig::small(), 3);
    assert!(enc.encode(&mel_of(49, 0)).is_err());
    assert!(enc.encode(&mel_of(50, 0)).is_ok());
}

fn toy_utts(n_tokens: usize) -> (Utterance, Utterance) {
    (
        Utterance {
            utterance_id: "u1".into(),
            speaker_id: "s".into(),
            text: "abc".into(),
            tokens: (0..n_tokens).map(|i| i % 16).collect(),
        },
        Utterance {
            utterance_id: "u2".into(),
            speaker_id: "s".into(),
            text: "de".into(),
            tokens: vec![3, 1, 4],
        },
    )
}

#[test]
fn ar_initial_loss_is_log_vocab() {
    let model = ArModel::new(ArConfig::small(), 4);
    let (target, _) = toy_utts(10);
    let layout = build_target_layout(&target, &model.vocab);
    let cond = Tensor::constant(ndarray::Array1::from_elem(64, 0.1).into_dyn());
    let loss = model.batch_loss(&[(&layout, cond)], None).value();
    let expect = (model.vocab.size() as f64).ln();
    assert!(
        (loss - expect).abs() / expect < 0.10,
        "init loss {loss} vs ln(V) {expect}"
    );
}

#[test]
fn causality_logits_ignore_future_positions() {
    let model = ArModel::new(ArConfig::small(), 5);
    let (target, _) = toy_utts(12);
    let layout = build_target_layout(&target, &model.vocab);
    let cond = Tensor::constant(ndarray::Array1::from_elem(64, 0.1).into_dyn());
    let h1 = model.forward_hidden(&layout.input_ids, &cond, None);
    let probe = 5usize;
    let l1 = model.logits(&h1);
    // Perturb every position after `probe`.
    let mut ids2 = layout.input_ids.clone();
    for p in (probe + 1)..ids2.len() {
        ids2[p] = model.vocab.audio_id((p * 7) % 16);
    }
    let h2 = model.forward_hidden(&ids2, &cond, None);
    let l2 = model.logits(&h2);
    let a = l1.data();
    let b = l2.data();
    for p in 0..=probe {
        for v in 0..model.vocab.size() {
            let (x, y) = (a[[p, v]], b[[p, v]]);
            assert!(
                (x - y).abs() < 1e-9,
                "position {p} logit {v} changed: {x} vs {y}"
            );
        }
    }
}

#[test]
fn greedy_generation_is_reproducible() {
    let model = ArModel::new(ArConfig::small(), 6);
    let cond = SpeakerCondition {
        vector: ndarray::Array1::from_elem(64, 0.05),
        source: ConditionSource::Encoder,
    };
    let sampling = SamplingConfig {
        temperature: 0.0,
        max_tokens: 12,
        ..Default::default()
    };
    let a = model
        .generate("hello", &cond, CloneMode::ZeroShot, None, &sampling, None)
        .unwrap();
    let b = model
        .generate("hello", &cond, CloneMode::ZeroShot, None, &sampling, None)
        .unwrap();
    assert_eq!(a.tokens, b.tokens);
    assert_eq!(a.condition_stream.frames, b.condition_stream.frames);
}

#[test]
fn seeded_sampling_is_reproducible_and_seed_sensitive() {
    let model = ArModel::new(ArConfig::small(), 7);
    let cond = SpeakerCondition {
        vector: ndarray::Array1::from_elem(64, 0.05),
        source: ConditionSource::Encoder,
    };
    let mk = |seed| SamplingConfig {
        temperature: 1.2,
        max_tokens: 16,
        seed,
        ..Default::default()
    };
    let a = model
        .generate("hi", &cond, CloneMode::ZeroShot, None, &mk(1), None)
        .unwrap();
    let b = model
        .generate("hi", &cond, CloneMode::ZeroShot, None, &mk(1), None)
        .unwrap();
    assert_eq!(a.tokens, b.tokens);
    let c = model
        .generate("hi", &cond, CloneMode::ZeroShot, None, &mk(2), None)
        .unwrap();
    // Different seeds should diverge on an untrained model (uniform-ish
    // distribution over 129 ids); identical streams would be a seed bug.
    assert!(a.tokens != c.tokens || a.tokens.tokens.is_empty());
}

#[test]
fn condition_stream_length_matches_generated_tokens() {
    let model = ArModel::new(ArConfig::small(), 8);
    let cond = SpeakerCondition {
        vector: ndarray::Array1::from_elem(64, 0.02),
        source: ConditionSource::Encoder,
    };
    let sampling = SamplingConfig {
        temperature: 0.8,
        max_tokens: 9,
        seed: 3,
        ..Default::default()
    };
    let out = model
        .generate("abc", &cond, CloneMode::ZeroShot, None, &sampling, None)
        .unwrap();
    assert_eq!(out.condition_stream.frames.nrows(), out.tokens.tokens.len());
    if out.tokens.tokens.len() == sampling.max_tokens {
        assert!(out.truncated);
    }
}

#[test]
fn one_shot_never_reemits_prompt_tokens_in_result() {
    let model = ArModel::new(ArConfig::small(), 9);
    let cond = SpeakerCondition {
        vector: ndarray::Array1::from_elem(64, 0.02),
        source: ConditionSource::Encoder,
    };
    let prompt_seq = TokenSequence {
        tokens: vec![1, 2, 3, 4],
        rate: 25.0,
    };
    let sampling = SamplingConfig {
        temperature: 0.7,
        max_tokens: 8,
        seed: 5,
        ..Default::default()
    };
    let out = model
        .generate(
            "xy",
            &cond,
            CloneMode::OneShot,
            Some(("pq", &prompt_seq)),
            &sampling,
            None,
        )
        .unwrap();
    // The prompt hidden stream covers exactly the prompt tokens; the
    // returned tokens are the generated continuation only.
    assert_eq!(out.prompt_hidden.as_ref().unwrap().nrows(), 4);
    assert!(out.tokens.tokens.len() <= sampling.max_tokens);
    // Prefix tags contain the prompt segments; generated tokens sit after.
    let n_prompt_tags = out
        .prefix_tags
        .iter()
        .filter(|t| matches!(t, chorale::ar::SegmentTag::PromptAudio))
        .count();
    assert_eq!(n_prompt_tags, 4);
}

#[test]
fn joint_training_reaches_the_speaker_encoder() {
    // Gradient flows end-to-end: the AR loss must move speaker-encoder
    // weights (non-zero gradient norm).
    let model = ArModel::new(ArConfig::small(), 10);
    let spk = SpeakerEncoder::new(SpeakerEncoderConfig::small(), 10);
    let (target, _) = toy_utts(8);
    let layout = build_target_layout(&target, &model.vocab);
    let mel: Array2<f64> = mel_of(80, 11).frames;
    let cond = spk.forward(&Tensor::constant(mel.into_dyn()));
    let loss = model.batch_loss(&[(&layout, cond)], None);
    loss.backward();
    let g: f64 = spk
        .params()
        .tensors()
        .filter_map(|t| t.grad())
        .map(|g| g.iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    assert!(g > 0.0, "speaker encoder gradient is zero");
    // Finite-difference cross-check on one weight.
    let ps = spk.params();
    let (_, w) = ps.iter().next().map(|(n, t)| (n.to_string(), t.clone())).unwrap();
    let loss_fn = || {
        let mel: Array2<f64> = mel_of(80, 11).frames;
        let cond = spk.forward(&Tensor::constant(mel.into_dyn()));
        model.batch_loss(&[(&layout, cond)], None).value()
    };
    let orig = { *w.data().iter().next().unwrap() };
    let h = 1e-4;
    {
        *w.data_mut().iter_mut().next().unwrap() = orig + h;
    }
    let fp = loss_fn();
    {
        *w.data_mut().iter_mut().next().unwrap() = orig - h;
    }
    let fm = loss_fn();
    {
        *w.data_mut().iter_mut().next().unwrap() = orig;
    }
    assert!(
        (fp - fm).abs() > 0.0,
        "loss insensitive to speaker-encoder weight"
    );
}

#[test]
fn layout_roundtrip_property() {
    use proptest::prelude::*;
    let mut runner = proptest::test_runner::TestRunner::new(proptest::test_runner::Config {
        cases: 32,
        ..Default::default()
    });
    runner
        .run(
            &(1usize..20, 1usize..15, 1usize..10, 1usize..12, proptest::bool::ANY),
            |(t_text, t_tokens, r_text, r_tokens, one_shot)| {
                let vocab = chorale::ar::ArVocab { audio_vocab: 32 };
                let target = Utterance {
                    utterance_id: "t".into(),
                    speaker_id: "s".into(),
                    text: "x".repeat(t_text),
                    tokens: (0..t_tokens).map(|i| i % 32).collect(),
                };
                let reference = Utterance {
                    utterance_id: "r".into(),
                    speaker_id: "s".into(),
                    text: "y".repeat(r_text),
                    tokens: (0..r_tokens).map(|i| (i + 3) % 32).collect(),
                };
                let mode = if one_shot {
                    CloneMode::OneShot
                } else {
                    CloneMode::ZeroShot
                };
                let layout =
                    chorale::ar::build_training_sequence(&target, &reference, mode, &vocab)
                        .unwrap();
                // Partition reconstruction: counting tags reproduces the
                // construction exactly.
                use chorale::ar::SegmentTag as S;
                let count = |tag: S| layout.segment_tags.iter().filter(|&&t| t == tag).count();
                prop_assert_eq!(count(S::Spk), 1);
                if one_shot {
                    prop_assert_eq!(count(S::PromptText), r_text);
                    prop_assert_eq!(count(S::PromptAudio), r_tokens);
                } else {
                    prop_assert_eq!(count(S::PromptText), 0);
                    prop_assert_eq!(count(S::PromptAudio), 0);
                }
                prop_assert_eq!(count(S::Text), t_text + 1); // + SEP
                prop_assert_eq!(count(S::Audio), t_tokens + 2); // BOS + EOS
                let masked = layout.loss_mask.iter().filter(|&&m| m).count();
                prop_assert_eq!(masked, t_tokens + 1);
                Ok(())
            },
        )
        .unwrap();
}
