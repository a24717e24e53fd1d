//! WAV I/O and resampling.

use crate::{Error, Result};
use ndarray::Array1;
use std::path::Path;

/// Mono waveform in `[-1, 1]`.
#[derive(Debug, Clone)]
pub struct AudioClip {
    pub samples: Array1<f64>,
    pub sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Array1<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::InvalidInput("sample rate must be positive".into()));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::InvalidInput("audio contains non-finite samples".into()));
        }
        Ok(AudioClip {
            samples,
            sample_rate,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.len() as f64 / self.sample_rate as f64
    }
}

/// Read a 16-bit PCM WAV, average channels to mono, resample to
/// `target_sr`, scale by 1/32768.
pub fn load_audio(path: &Path, target_sr: u32) -> Result<AudioClip> {
    let reader = hound::WavReader::open(path).map_err(|e| Error::Audio {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let wspec = reader.spec();
    if wspec.sample_format != hound::SampleFormat::Int || wspec.bits_per_sample != 16 {
        return Err(Error::Audio {
            path: path.to_path_buf(),
            reason: format!(
                "expected 16-bit PCM, found {:?} {} bit",
                wspec.sample_format, wspec.bits_per_sample
            ),
        });
    }
    let channels = wspec.channels as usize;
    let raw: Vec<i16> = reader
        .into_samples::<i16>()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Audio {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
    let frames = raw.len() / channels;
    let mut mono = Array1::<f64>::zeros(frames);
    for (i, chunk) in raw.chunks_exact(channels).enumerate() {
        let sum: f64 = chunk.iter().map(|&s| s as f64).sum();
        mono[i] = sum / channels as f64 / 32768.0;
    }
    let samples = if wspec.sample_rate == target_sr {
        mono
    } else {
        resample(&mono, wspec.sample_rate, target_sr)
    };
    AudioClip::new(samples, target_sr)
}

/// Write a mono 16-bit PCM WAV; samples clamped to `[-1, 1]`.
pub fn save_audio(path: &Path, clip: &AudioClip) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(|e| Error::Audio {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    for &s in clip.samples.iter() {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        writer.write_sample(v).map_err(|e| Error::Audio {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
    }
    writer.finalize().map_err(|e| Error::Audio {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    Ok(())
}

/// Windowed-sinc resampling (Hann-windowed, 16 zero crossings, lowpassed at
/// the lower Nyquist when downsampling).
pub fn resample(x: &Array1<f64>, from_sr: u32, to_sr: u32) -> Array1<f64> {
    if from_sr == to_sr {
        return x.clone();
    }
    let ratio = to_sr as f64 / from_sr as f64;
    let out_len = ((x.len() as u64 * to_sr as u64) / from_sr as u64) as usize;
    // Cutoff scale: 1 for upsampling, `ratio` for downsampling.
    let cutoff = ratio.min(1.0);
    let zeros = 16.0;
    let half_width = zeros / cutoff;
    let mut out = Array1::<f64>::zeros(out_len);
    for n in 0..out_len {
        let t = n as f64 / ratio; // position in input samples
        let lo = (t - half_width).ceil().max(0.0) as usize;
        let hi = ((t + half_width).floor() as usize).min(x.len().saturating_sub(1));
        let mut acc = 0.0;
        for j in lo..=hi {
            let d = t - j as f64;
            acc += x[j] * windowed_sinc(d * cutoff, zeros) * cutoff;
        }
        out[n] = acc.clamp(-1.0, 1.0);
    }
    out
}

fn windowed_sinc(x: f64, zeros: f64) -> f64 {
    if x.abs() >= zeros {
        return 0.0;
    }
    let pi = std::f64::consts::PI;
    let sinc = if x.abs() < 1e-12 {
        1.0
    } else {
        (pi * x).sin() / (pi * x)
    };
    // Hann window over [-zeros, zeros].
    let w = 0.5 + 0.5 * (pi * x / zeros).cos();
    sinc * w
}

#[cfg(test)]
mod tests {
    use super::*;
    use rustfft::{num_complex::Complex, FftPlanner};

    #[test]
    fn same_rate_keeps_sample_count() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.wav");
        let clip = AudioClip::new(Array1::from_elem(16_000, 0.25), 16_000).unwrap();
        save_audio(&path, &clip).unwrap();
        let loaded = load_audio(&path, 16_000).unwrap();
        assert_eq!(loaded.len(), 16_000);
        assert_eq!(loaded.sample_rate, 16_000);
    }

    #[test]
    fn downsample_halves_count_within_one() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t32.wav");
        let clip = AudioClip::new(Array1::zeros(32_000), 32_000).unwrap();
        save_audio(&path, &clip).unwrap();
        let loaded = load_audio(&path, 16_000).unwrap();
        assert!((loaded.len() as i64 - 16_000).abs() <= 1, "{}", loaded.len());
    }

    #[test]
    fn tone_survives_resampling() {
        // 440 Hz at 32 kHz, resampled to 16 kHz: dominant FFT bin stays at
        // 440 Hz within one bin.
        let sr_in = 32_000u32;
        let samples = Array1::from_shape_fn(32_000, |i| {
            0.5 * (2.0 * std::f64::consts::PI * 440.0 * i as f64 / sr_in as f64).sin()
        });
        let out = resample(&samples, sr_in, 16_000);
        let n = 16_384.min(out.len());
        let mut buf: Vec<Complex<f64>> = out
            .iter()
            .take(n)
            .map(|&v| Complex::new(v, 0.0))
            .collect();
        let mut planner = FftPlanner::new();
        planner.plan_fft_forward(n).process(&mut buf);
        let argmax = (1..n / 2)
            .max_by(|&a, &b| buf[a].norm().partial_cmp(&buf[b].norm()).unwrap())
            .unwrap();
        let freq = argmax as f64 * 16_000.0 / n as f64;
        let bin_hz = 16_000.0 / n as f64;
        assert!((freq - 440.0).abs() <= bin_hz + 1e-9, "peak at {freq} Hz");
    }

    #[test]
    fn multichannel_averages_to_mono() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("st.wav");
        let spec = hound::WavSpec {
            channels: 2,
            sample_rate: 16_000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(&path, spec).unwrap();
        for _ in 0..100 {
            w.write_sample(8192i16).unwrap(); // left
            w.write_sample(-8192i16).unwrap(); // right
        }
        w.finalize().unwrap();
        let clip = load_audio(&path, 16_000).unwrap();
        assert_eq!(clip.len(), 100);
        for &v in clip.samples.iter() {
            assert!(v.abs() < 1e-9);
        }
    }

    #[test]
    fn unreadable_file_errors_with_path() {
        let err = load_audio(std::path::Path::new("/nonexistent/x.wav"), 16_000)
            .unwrap_err()
            .to_string();
        assert!(err.contains("x.wav"));
    }
}
