//! LoRA adapter, PVC, and T2V behavior against a small base model.

use chorale::ar::{build_target_layout, ArModel, Utterance};
use chorale::config::{ArConfig, SamplingConfig, SpeakerEncoderConfig};
use chorale::ext::lora::{lora_train, LoraAdapter};
use chorale::ext::pvc::pvc_finetune;
use chorale::speaker::{ConditionSource, SpeakerCondition, SpeakerEncoder};
use chorale_autograd::{checkpoint, rng, Adam, Tensor};
use ndarray::Array2;

fn small_ar(seed: u64) -> ArModel {
    ArModel::new(
        ArConfig {
            layers: 2,
            d_model: 64,
            heads: 4,
            ff_mult: 2,
            max_context: 256,
            audio_vocab: 32,
            spk_dim: 16,
        },
        seed,
    )
}

fn utt(id: &str, text: &str, tokens: &[usize]) -> Utterance {
    Utterance {
        utterance_id: id.into(),
        speaker_id: "s".into(),
        text: text.into(),
        tokens: tokens.to_vec(),
    }
}

fn cond16(v: f64) -> Tensor {
    Tensor::constant(ndarray::Array1::from_elem(16, v).into_dyn())
}

#[test]
fn fresh_adapter_is_an_exact_no_op() {
    let model = small_ar(1);
    let adapter = LoraAdapter::new("bright", 4, 8.0, model.num_layers(), model.cfg.d_model, 2);
    let layout = build_target_layout(&utt("u", "ab", &[1, 2, 3]), &model.vocab);
    let deltas = adapter.deltas_for(&model).unwrap();
    let base = model.batch_loss(&[(&layout, cond16(0.1))], None).value();
    let adapted = model
        .batch_loss(&[(&layout, cond16(0.1))], Some(&deltas))
        .value();
    // B is zero-initialized, so the delta is exactly zero.
    assert_eq!(base.to_bits(), adapted.to_bits());
}

#[test]
fn apply_then_remove_restores_bitwise_behavior() {
    let model = small_ar(3);
    let layout = build_target_layout(&utt("u", "xy", &[4, 5]), &model.vocab);
    let before = model.batch_loss(&[(&layout, cond16(0.2))], None).value();
    // Train an adapter a little, use it, then drop it.
    let items = vec![(layout.clone(), ref_mel(7))];
    let spk = SpeakerEncoder::new(spk_cfg16(), 4);
    let adapter = lora_train(&items, &model, &spk, "bright", 4, 8.0, 5, 1e-3, 5).unwrap();
    let deltas = adapter.deltas_for(&model).unwrap();
    let with = model
        .batch_loss(&[(&layout, cond16(0.2))], Some(&deltas))
        .value();
    assert_ne!(before.to_bits(), with.to_bits(), "trained adapter must act");
    let after = model.batch_loss(&[(&layout, cond16(0.2))], None).value();
    assert_eq!(before.to_bits(), after.to_bits(), "removal must restore base");
}

fn spk_cfg16() -> SpeakerEncoderConfig {
    SpeakerEncoderConfig {
        n_mels: 80,
        hidden: 24,
        embed_dim: 16,
        min_frames: 50,
    }
}

fn ref_mel(seed: u64) -> Array2<f64> {
    let mut r = rng::seeded(seed);
    chorale_autograd::rng::uniform(&[60, 80], -8.0, 1.0, &mut r)
        .into_dimensionality::<ndarray::Ix2>()
        .unwrap()
}

#[test]
fn lora_keeps_the_base_checkpoint_fingerprint() {
    let model = small_ar(5);
    let spk = SpeakerEncoder::new(spk_cfg16(), 6);
    let before = checkpoint::fingerprint(&model.params());
    let layout = build_target_layout(&utt("u", "ab", &[1, 2, 3, 4]), &model.vocab);
    let items = vec![(layout, ref_mel(8))];
    let _ = lora_train(&items, &model, &spk, "dark", 4, 8.0, 30, 1e-3, 7).unwrap();
    let after = checkpoint::fingerprint(&model.params());
    assert_eq!(before, after, "base weights must stay frozen");
}

#[test]
fn delta_rank_is_bounded_by_r() {
    let model = small_ar(9);
    let spk = SpeakerEncoder::new(spk_cfg16(), 10);
    let layout = build_target_layout(&utt("u", "cd", &[7, 8, 9]), &model.vocab);
    let items = vec![(layout, ref_mel(11))];
    let rank = 4;
    let adapter = lora_train(&items, &model, &spk, "soft", rank, 8.0, 40, 2e-3, 12).unwrap();
    for layer in 0..model.num_layers() {
        for target in 0..4 {
            let delta = adapter.delta_matrix(layer, target);
            let m = nalgebra::DMatrix::from_fn(delta.nrows(), delta.ncols(), |i, j| delta[[i, j]]);
            let svd = m.svd(false, false);
            let mut svs: Vec<f64> = svd.singular_values.iter().copied().collect();
            svs.sort_by(|a, b| b.partial_cmp(a).unwrap());
            for &s in svs.iter().skip(rank) {
                assert!(s < 1e-5, "singular value {s} beyond rank {rank}");
            }
        }
    }
}

#[test]
fn adapter_checkpoint_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let model = small_ar(13);
    let adapter = LoraAdapter::new("calm", 4, 8.0, model.num_layers(), model.cfg.d_model, 14);
    // Make it non-trivial before saving.
    for (_, t) in adapter.params().iter() {
        let shape = t.shape();
        let mut r = rng::seeded(15);
        *t.data_mut() = chorale_autograd::rng::randn_scaled(&shape, 0.05, &mut r);
    }
    let ckpt = adapter.save(dir.path()).unwrap();
    assert!(ckpt.ends_with("emotion_calm.ckpt"));
    assert!(dir.path().join("emotion_calm.json").exists());
    let loaded = LoraAdapter::load(&ckpt).unwrap();
    assert_eq!(loaded.emotion, "calm");
    assert_eq!(loaded.rank, 4);
    // f32 storage: values round-trip to float precision.
    let a = adapter.delta_matrix(0, 0);
    let b = loaded.delta_matrix(0, 0);
    for (x, y) in a.iter().zip(b.iter()) {
        assert!((x - y).abs() < 1e-6);
    }
}

#[test]
fn architecture_mismatch_is_rejected() {
    let model = small_ar(16);
    let adapter = LoraAdapter::new("x", 4, 8.0, model.num_layers() + 1, model.cfg.d_model, 17);
    assert!(adapter.deltas_for(&model).is_err());
}

/// Overfit fixture shared by the adapter-behavior tests: a base model
/// trained on four texts whose renditions cover every token pattern, then
/// per-emotion adapters that remap two of those texts onto other known
/// patterns. Identical texts appear under different emotions, so adapter
/// selection — not the text — decides the rendition.
fn emotion_fixture() -> (ArModel, SpeakerEncoder, Vec<Utterance>, Vec<Utterance>, Vec<Utterance>) {
    let model = small_ar(20);
    let spk = SpeakerEncoder::new(spk_cfg16(), 21);
    let neutral = vec![
        utt("n0", "abba", &[1, 2, 3, 4]),
        utt("n1", "cddc", &[5, 6, 7, 8]),
        utt("n2", "effe", &[20, 21, 22, 23]),
        utt("n3", "gaag", &[25, 26, 27, 28]),
    ];
    let bright = vec![
        utt("b0", "abba", &[20, 21, 22, 23]),
        utt("b1", "cddc", &[25, 26, 27, 28]),
    ];
    let dark = vec![
        utt("d0", "abba", &[5, 6, 7, 8]),
        utt("d1", "cddc", &[1, 2, 3, 4]),
    ];

    // Overfit the base on the neutral renditions.
    let mut params = model.params().prefixed("ar");
    params.extend(spk.params().prefixed("spk"));
    let mut opt = Adam::new(3e-3);
    for step in 0..250 {
        let batch: Vec<_> = neutral
            .iter()
            .map(|u| (build_target_layout(u, &model.vocab), ref_mel(30)))
            .collect();
        model
            .train_step_joint(&batch, &spk, &params, &mut opt, step)
            .unwrap();
    }
    (model, spk, neutral, bright, dark)
}

#[test]
fn adapters_learn_emotions_and_selection_controls_output() {
    let (model, spk, neutral, bright, dark) = emotion_fixture();
    let layouts_bright: Vec<_> = bright
        .iter()
        .map(|u| (build_target_layout(u, &model.vocab), ref_mel(30)))
        .collect();
    let layouts_dark: Vec<_> = dark
        .iter()
        .map(|u| (build_target_layout(u, &model.vocab), ref_mel(30)))
        .collect();

    let base_loss_on_bright = {
        let items: Vec<_> = layouts_bright
            .iter()
            .map(|(l, m)| (l, spk.forward(&Tensor::constant(m.clone().into_dyn()))))
            .collect();
        model.batch_loss(&items, None).value()
    };

    let a_bright = lora_train(&layouts_bright, &model, &spk, "bright", 8, 16.0, 800, 3e-3, 31).unwrap();
    let a_dark = lora_train(&layouts_dark, &model, &spk, "dark", 8, 16.0, 800, 3e-3, 32).unwrap();

    // Adapted model fits the emotive targets better than the base.
    let deltas_b = a_bright.deltas_for(&model).unwrap();
    let adapted_loss_on_bright = {
        let items: Vec<_> = layouts_bright
            .iter()
            .map(|(l, m)| (l, spk.forward(&Tensor::constant(m.clone().into_dyn()))))
            .collect();
        model.batch_loss(&items, Some(&deltas_b)).value()
    };
    assert!(
        adapted_loss_on_bright < base_loss_on_bright,
        "adapter {adapted_loss_on_bright} vs base {base_loss_on_bright}"
    );

    // Two adapters on the same input produce different logits, and greedy
    // generation reproduces the adapter's own targets: emotion selection —
    // not the text — picks the rendition.
    let cond = {
        let mel = ref_mel(30);
        let e = spk.forward(&Tensor::constant(mel.into_dyn()));
        let vector = e.data().iter().copied().collect();
        SpeakerCondition {
            vector,
            source: ConditionSource::Encoder,
        }
    };
    let sampling = SamplingConfig {
        temperature: 0.0,
        max_tokens: 8,
        ..Default::default()
    };
    let deltas_d = a_dark.deltas_for(&model).unwrap();
    let text = &neutral[0].text;
    let out_b = model
        .generate(text, &cond, chorale::ar::CloneMode::ZeroShot, None, &sampling, Some(&deltas_b))
        .unwrap();
    let out_d = model
        .generate(text, &cond, chorale::ar::CloneMode::ZeroShot, None, &sampling, Some(&deltas_d))
        .unwrap();
    assert_eq!(out_b.tokens.tokens, bright[0].tokens, "bright adapter rendition");
    assert_eq!(out_d.tokens.tokens, dark[0].tokens, "dark adapter rendition");
    assert_ne!(out_b.tokens.tokens, out_d.tokens.tokens);
}

#[test]
fn pvc_zero_steps_returns_the_init() {
    let model = small_ar(40);
    let utts = vec![utt("a", "ab", &[1, 2, 3]), utt("b", "cd", &[4, 5, 6])];
    let init = SpeakerCondition {
        vector: ndarray::Array1::from_elem(16, 0.25),
        source: ConditionSource::Encoder,
    };
    let out = pvc_finetune(&utts, &model, &init, "s", 0, 1e-2).unwrap();
    // Renormalized copy of the init.
    let norm = init.vector.dot(&init.vector).sqrt();
    for (a, b) in out.vector.iter().zip(init.vector.iter()) {
        assert!((a - b / norm).abs() < 1e-12);
    }
    assert_eq!(out.steps, 0);
}

#[test]
fn pvc_optimizes_only_the_embedding_and_reduces_loss() {
    let model = small_ar(41);
    // Give the model some structure first so the loss landscape is not
    // flat: brief training on the target utterances with a random cond.
    let utts: Vec<Utterance> = (0..5)
        .map(|i| utt(&format!("u{i}"), &format!("t{i}"), &[(3 * i) % 32, (3 * i + 1) % 32, (3 * i + 2) % 32]))
        .collect();
    {
        let params = model.params();
        let mut opt = Adam::new(3e-3);
        let cond = cond16(0.3);
        for _ in 0..60 {
            let layouts: Vec<_> = utts.iter().map(|u| build_target_layout(u, &model.vocab)).collect();
            let items: Vec<_> = layouts.iter().map(|l| (l, cond.clone())).collect();
            let loss = model.batch_loss(&items, None);
            loss.backward();
            opt.step(&params);
        }
    }
    let before_fp = checkpoint::fingerprint(&model.params());
    let init = SpeakerCondition {
        vector: ndarray::Array1::from_elem(16, -0.2),
        source: ConditionSource::Encoder,
    };
    let out = pvc_finetune(&utts, &model, &init, "s", 200, 1e-2).unwrap();
    assert_eq!(checkpoint::fingerprint(&model.params()), before_fp);
    assert!(
        out.final_loss < out.loss_trace[0],
        "final {} vs initial {}",
        out.final_loss,
        out.loss_trace[0]
    );
    // Frozen model params accumulate no gradient at all.
    for (name, t) in model.params().iter() {
        assert!(t.grad().is_none(), "{name} received a gradient");
    }
    assert_eq!(out.vector.len(), 16);
    let norm = out.vector.dot(&out.vector).sqrt();
    assert!((norm - 1.0).abs() < 1e-9);
    assert_eq!(out.as_condition().source, ConditionSource::PvcOptimized);
}

#[test]
fn pvc_needs_at_least_two_utterances() {
    let model = small_ar(42);
    let utts = vec![utt("a", "ab", &[1, 2])];
    let init = SpeakerCondition {
        vector: ndarray::Array1::from_elem(16, 0.5),
        source: ConditionSource::Encoder,
    };
    assert!(pvc_finetune(&utts, &model, &init, "s", 5, 1e-2).is_err());
}

#[test]
fn t2v_roundtrips_training_speakers_within_truncation_error() {
    use chorale::ext::t2v::pca_fit_project;
    // Conditions for 6 "speakers" across AR (dim 5) and FM (dim 3) sides.
    let mut r = rng::seeded(50);
    use rand::Rng;
    let d = 8;
    let data = Array2::from_shape_fn((6, d), |_| r.gen_range(-1.0..1.0));
    let k = 4;
    let (pca, proj) = pca_fit_project(&data, k).unwrap();
    for i in 0..6 {
        let rec = pca.reconstruct(&proj.row(i).to_owned());
        // Truncation error bound: distance to the k-dim subspace.
        let err: f64 = rec
            .iter()
            .zip(data.row(i).iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let centered: f64 = data
            .row(i)
            .iter()
            .zip(pca.mean.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        assert!(err <= centered + 1e-9);
        // Residual is orthogonal to the basis: projecting it back is ~0.
        let resid: ndarray::Array1<f64> = &rec - &data.row(i).to_owned();
        let back = pca.basis.dot(&resid);
        for v in back.iter() {
            assert!(v.abs() < 1e-8);
        }
    }
}

#[test]
fn t2v_overfits_description_to_projection_pairs() {
    use chorale::ext::t2v::{pca_fit_project, TimbreAttributes, TimbreBinning, TimbreModel};
    let mut r = rng::seeded(51);
    use rand::Rng;
    let data = Array2::from_shape_fn((8, 10), |_| r.gen_range(-1.0..1.0));
    let (pca, proj) = pca_fit_project(&data, 4).unwrap();
    // Distinct word pairs per description, so masking augmentation cannot
    // collide two examples.
    let words = ["alto", "basso", "coral", "dune", "ember", "frost", "gale", "haze"];
    let descs: Vec<String> = (0..8)
        .map(|i| format!("{} {} voice", words[i], words[(i + 3) % 8]))
        .collect();
    let model = TimbreModel::new(pca, TimbreBinning::default(), 5, &descs, 52);
    let mut opt = Adam::new(8e-3);
    let batch: Vec<(String, TimbreAttributes, ndarray::Array1<f64>)> = (0..8)
        .map(|i| (descs[i].clone(), TimbreAttributes::default(), proj.row(i).to_owned()))
        .collect();
    let mut rng_train = rng::seeded(53);
    for step in 0..1600 {
        opt.lr = if step < 800 { 8e-3 } else { 1e-3 };
        let mask = if step < 1200 { 0.15 } else { 0.0 };
        model.train_step(&batch, mask, &mut opt, &mut rng_train).unwrap();
    }
    // Clean-input evaluation after training under masking augmentation.
    let eval_mse: f64 = (0..8)
        .map(|i| {
            let pred = model.predict(
                &chorale::ext::t2v::tokenize_description(&descs[i]),
                &TimbreAttributes::default(),
            );
            pred.mse(&Tensor::constant(proj.row(i).to_owned().into_dyn())).value()
        })
        .sum::<f64>()
        / 8.0;
    assert!(eval_mse < 1e-3, "t2v overfit MSE {eval_mse}");

    // Contrast: different descriptions produce more distant conditions
    // than a repeat of the same description (repeats are identical).
    let (a0, _) = model.generate(&descs[0], &TimbreAttributes::default());
    let (a0b, _) = model.generate(&descs[0], &TimbreAttributes::default());
    let (a1, _) = model.generate(&descs[1], &TimbreAttributes::default());
    let same = chorale::eval::cosine_sim(a0.vector.as_slice().unwrap(), a0b.vector.as_slice().unwrap()).unwrap();
    let cross = chorale::eval::cosine_sim(a0.vector.as_slice().unwrap(), a1.vector.as_slice().unwrap()).unwrap();
    assert!((same - 1.0).abs() < 1e-12);
    assert!(cross < same - 1e-6, "cross {cross} vs same {same}");
}
