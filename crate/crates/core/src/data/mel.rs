//! Log-mel spectrograms.
//!
//! Center-padded framing: `T_mel = floor(len / hop) + 1`. Filterbank uses
//! the HTK mel scale with unit-height triangles, so a pure tone peaks in
//! the channel whose center frequency is nearest the tone.

use crate::config::MelConfig;
use crate::data::audio::AudioClip;
use crate::{Error, Result};
use ndarray::{Array1, Array2};
use rustfft::{num_complex::Complex, FftPlanner};

#[derive(Debug, Clone)]
pub struct MelSpectrogram {
    /// `[T_mel, n_mels]`, natural-log power.
    pub frames: Array2<f64>,
    pub frame_rate: f64,
}

impl MelSpectrogram {
    pub fn num_frames(&self) -> usize {
        self.frames.nrows()
    }

    pub fn n_mels(&self) -> usize {
        self.frames.ncols()
    }
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Center frequencies (Hz) of the `n_mels` triangular filters.
pub fn mel_filter_centers(cfg: &MelConfig) -> Vec<f64> {
    let lo = hz_to_mel(cfg.fmin);
    let hi = hz_to_mel(cfg.fmax);
    (1..=cfg.n_mels)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect()
}

/// Triangular filterbank `[n_mels, n_fft/2 + 1]`.
pub fn mel_filterbank(cfg: &MelConfig) -> Array2<f64> {
    let bins = cfg.n_fft / 2 + 1;
    let lo = hz_to_mel(cfg.fmin);
    let hi = hz_to_mel(cfg.fmax);
    let edges: Vec<f64> = (0..cfg.n_mels + 2)
        .map(|i| lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64)
        .collect();
    let mut fb = Array2::<f64>::zeros((cfg.n_mels, bins));
    for b in 0..bins {
        let freq = b as f64 * cfg.sample_rate as f64 / cfg.n_fft as f64;
        let m = hz_to_mel(freq);
        for ch in 0..cfg.n_mels {
            let (l, c, r) = (edges[ch], edges[ch + 1], edges[ch + 2]);
            let v = if m >= l && m <= c {
                (m - l) / (c - l)
            } else if m > c && m <= r {
                (r - m) / (r - c)
            } else {
                0.0
            };
            fb[[ch, b]] = v.max(0.0);
        }
    }
    fb
}

/// Log-mel spectrogram of a clip. Errors when the clip is shorter than one
/// hop.
pub fn compute_mel(clip: &AudioClip, cfg: &MelConfig) -> Result<MelSpectrogram> {
    let n = clip.len();
    if n < cfg.hop {
        return Err(Error::InvalidInput(format!(
            "clip of {n} samples is shorter than one hop ({})",
            cfg.hop
        )));
    }
    let t_mel = n / cfg.hop + 1;
    let pad = cfg.n_fft / 2;
    let mut padded = Array1::<f64>::zeros(n + 2 * pad);
    padded
        .slice_mut(ndarray::s![pad..pad + n])
        .assign(&clip.samples);

    let window: Vec<f64> = (0..cfg.win)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / cfg.win as f64).cos())
        .collect();
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(cfg.n_fft);
    let bins = cfg.n_fft / 2 + 1;
    let fb = mel_filterbank(cfg);

    let mut out = Array2::<f64>::zeros((t_mel, cfg.n_mels));
    let mut buf = vec![Complex::new(0.0, 0.0); cfg.n_fft];
    let mut power = Array1::<f64>::zeros(bins);
    for t in 0..t_mel {
        let start = t * cfg.hop; // frame center sits at t*hop in the clip
        for i in 0..cfg.n_fft {
            let v = if i < cfg.win { padded[start + i] * window[i] } else { 0.0 };
            buf[i] = Complex::new(v, 0.0);
        }
        fft.process(&mut buf);
        for b in 0..bins {
            power[b] = buf[b].norm_sqr();
        }
        for ch in 0..cfg.n_mels {
            let e: f64 = fb.row(ch).dot(&power);
            out[[t, ch]] = e.max(cfg.log_floor).ln();
        }
    }
    Ok(MelSpectrogram {
        frames: out,
        frame_rate: cfg.frame_rate(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array1;

    fn cfg() -> MelConfig {
        MelConfig::default()
    }

    #[test]
    fn one_second_gives_101_by_80() {
        let clip = AudioClip::new(Array1::zeros(16_000), 16_000).unwrap();
        let mel = compute_mel(&clip, &cfg()).unwrap();
        assert_eq!(mel.num_frames(), 101);
        assert_eq!(mel.n_mels(), 80);
    }

    #[test]
    fn silence_hits_the_log_floor_everywhere() {
        let clip = AudioClip::new(Array1::zeros(3200), 16_000).unwrap();
        let mel = compute_mel(&clip, &cfg()).unwrap();
        let expect = 1e-5f64.ln();
        for &v in mel.frames.iter() {
            assert!((v - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn tone_peaks_in_channel_nearest_1khz() {
        let sr = 16_000u32;
        let samples = Array1::from_shape_fn(16_000, |i| {
            0.5 * (2.0 * std::f64::consts::PI * 1000.0 * i as f64 / sr as f64).sin()
        });
        let clip = AudioClip::new(samples, sr).unwrap();
        let mel = compute_mel(&clip, &cfg()).unwrap();
        // Independent oracle: filter center frequencies.
        let centers = mel_filter_centers(&cfg());
        let expected_ch = centers
            .iter()
            .enumerate()
            .min_by(|a, b| {
                (a.1 - 1000.0).abs().partial_cmp(&(b.1 - 1000.0).abs()).unwrap()
            })
            .unwrap()
            .0;
        let mid = mel.frames.row(mel.num_frames() / 2);
        let argmax = mid
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        assert_eq!(argmax, expected_ch);
    }

    #[test]
    fn shorter_than_hop_is_an_error() {
        let clip = AudioClip::new(Array1::zeros(100), 16_000).unwrap();
        assert!(compute_mel(&clip, &cfg()).is_err());
    }

    #[test]
    fn deterministic_output() {
        let samples = Array1::from_shape_fn(5000, |i| ((i * 37) % 101) as f64 / 101.0 - 0.5);
        let clip = AudioClip::new(samples, 16_000).unwrap();
        let a = compute_mel(&clip, &cfg()).unwrap();
        let b = compute_mel(&clip, &cfg()).unwrap();
        assert_eq!(a.frames, b.frames);
    }

    #[test]
    fn frame_count_tracks_hop_within_one() {
        for n in [160usize, 161, 1599, 1600, 12345] {
            let clip = AudioClip::new(Array1::zeros(n), 16_000).unwrap();
            let mel = compute_mel(&clip, &cfg()).unwrap();
            let t = mel.num_frames();
            assert_eq!(t, n / 160 + 1);
            assert!((t * 160) as i64 - n as i64 <= 160);
        }
    }
}
