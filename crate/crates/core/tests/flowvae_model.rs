//! Flow-VAE model shapes, contracts, and the end-to-end gradient check.

use chorale::config::FlowVaeConfig;
use chorale::data::AudioClip;
use chorale::flowvae::loss::{kl_given_sample, ms_stft_loss};
use chorale::flowvae::{FlowVae, LatentSequence, SAMPLES_PER_LATENT};
use chorale_autograd::{rng, Tensor};
use ndarray::Array1;

fn clip_of(n: usize, seed: u64) -> AudioClip {
    let mut r = rng::seeded(seed);
    let samples: Array1<f64> = rng::uniform(&[n], -0.5, 0.5, &mut r)
        .into_dimensionality::<ndarray::Ix1>()
        .unwrap();
    AudioClip::new(samples, 16_000).unwrap()
}

#[test]
fn one_second_gives_fifty_latent_frames() {
    let model = FlowVae::new(FlowVaeConfig::small(), 1);
    let stats = model.fv_encode(&clip_of(16_000, 1)).unwrap();
    assert_eq!(stats.num_frames(), 50);
    assert_eq!(stats.frame_rate, 50.0);
    assert_eq!(stats.mu.ncols(), 16);
}

#[test]
fn encode_is_deterministic_and_clamps_log_sigma() {
    let model = FlowVae::new(FlowVaeConfig::small(), 2);
    let clip = clip_of(4800, 2);
    let a = model.fv_encode(&clip).unwrap();
    let b = model.fv_encode(&clip).unwrap();
    assert_eq!(a.mu, b.mu);
    for &v in a.log_sigma.iter() {
        assert!((-7.0..=5.0).contains(&v), "log_sigma {v} outside clamp");
    }
}

#[test]
fn too_short_input_is_an_error() {
    let model = FlowVae::new(FlowVaeConfig::small(), 3);
    assert!(model.fv_encode(&clip_of(319, 3)).is_err());
    assert!(model.fv_encode(&clip_of(320, 3)).is_ok());
}

#[test]
fn decode_inverts_stride_arithmetic() {
    let model = FlowVae::new(FlowVaeConfig::small(), 4);
    let mut r = rng::seeded(4);
    for frames in [1usize, 7, 50] {
        let z = LatentSequence {
            z: rng::randn(&[frames, 16], &mut r)
                .into_dimensionality::<ndarray::Ix2>()
                .unwrap(),
        };
        let clip = model.fv_decode(&z).unwrap();
        assert_eq!(clip.len(), SAMPLES_PER_LATENT * frames);
        for &v in clip.samples.iter() {
            assert!((-1.0..=1.0).contains(&v));
        }
    }
}

#[test]
fn decoder_preclamp_output_is_bounded() {
    let model = FlowVae::new(FlowVaeConfig::small(), 5);
    let mut r = rng::seeded(5);
    let z = Tensor::constant(rng::randn(&[10, 16], &mut r) * 3.0);
    let y = model.decode_tensor(&z);
    for &v in y.data().iter() {
        assert!(v.is_finite());
        assert!((-2.0..=2.0).contains(&v), "pre-clamp output {v}");
    }
}

#[test]
fn empty_latent_is_an_error() {
    let model = FlowVae::new(FlowVaeConfig::small(), 6);
    let z = LatentSequence {
        z: ndarray::Array2::zeros((0, 16)),
    };
    assert!(model.fv_decode(&z).is_err());
}

#[test]
fn train_objective_gradient_matches_finite_differences() {
    // d(total)/d(one encoder weight) vs central differences at rel 1e-2.
    let mut cfg = FlowVaeConfig::small();
    cfg.channels = [8, 12, 16, 24];
    cfg.latent_dim = 8;
    cfg.flow_hidden = 16;
    let model = FlowVae::new(cfg.clone(), 7);
    let wave_arr = {
        let mut r = rng::seeded(8);
        rng::uniform(&[960], -0.5, 0.5, &mut r)
    };
    let mut r_eps = rng::seeded(9);
    let eps = Tensor::constant(rng::randn(&[3, cfg.latent_dim], &mut r_eps));

    let loss_value = |model: &FlowVae| -> f64 {
        let x = Tensor::constant(wave_arr.clone());
        let (mu, ls) = model.encode(&x);
        let z = mu.add(&ls.exp().mul(&eps));
        let y = model.decode_tensor(&z);
        let target = x.narrow(0, 0, 960);
        let recon = ms_stft_loss(&target, &y);
        let kl = kl_given_sample(&z, &mu, &ls, &model.flow);
        recon.add(&kl.scale(cfg.kl_weight)).value()
    };

    // Analytic gradient.
    let x = Tensor::constant(wave_arr.clone());
    let (mu, ls) = model.encode(&x);
    let z = mu.add(&ls.exp().mul(&eps));
    let y = model.decode_tensor(&z);
    let target = x.narrow(0, 0, 960);
    let recon = ms_stft_loss(&target, &y);
    let kl = kl_given_sample(&z, &mu, &ls, &model.flow);
    let total = recon.add(&kl.scale(cfg.kl_weight));
    total.backward();

    let ps = model.params();
    let w = ps.get("enc.e1.w").unwrap();
    let g = w.grad().expect("encoder weight got no gradient");
    let h = 1e-5;
    let mut checked = 0;
    for i in [0usize, 3, 11] {
        let orig = *w.data().iter().nth(i).unwrap();
        {
            *w.data_mut().iter_mut().nth(i).unwrap() = orig + h;
        }
        let fp = loss_value(&model);
        {
            *w.data_mut().iter_mut().nth(i).unwrap() = orig - h;
        }
        let fm = loss_value(&model);
        {
            *w.data_mut().iter_mut().nth(i).unwrap() = orig;
        }
        let num = (fp - fm) / (2.0 * h);
        let ana = *g.iter().nth(i).unwrap();
        let denom = ana.abs().max(num.abs()).max(1e-6);
        assert!(
            (ana - num).abs() / denom < 1e-2,
            "weight {i}: analytic {ana} vs numeric {num}"
        );
        checked += 1;
    }
    assert_eq!(checked, 3);
}

#[test]
fn checkpoint_roundtrip_preserves_behavior() {
    let dir = tempfile::tempdir().unwrap();
    let model = FlowVae::new(FlowVaeConfig::small(), 10);
    let clip = clip_of(3200, 11);
    let before = model.fv_encode(&clip).unwrap();
    model.save(dir.path()).unwrap();
    let loaded = FlowVae::load(dir.path()).unwrap();
    let after = loaded.fv_encode(&clip).unwrap();
    // f32 round-trip through the checkpoint keeps values to ~1e-7.
    for (a, b) in before.mu.iter().zip(after.mu.iter()) {
        assert!((a - b).abs() < 1e-5);
    }
}
