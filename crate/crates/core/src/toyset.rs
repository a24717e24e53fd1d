//! Synthetic toy corpus for overfit fixtures and demos.
//!
//! Each speaker is a harmonic voice with a characteristic f0 and spectral
//! envelope; each character of a text maps to a scale degree, so audio and
//! text are systematically aligned (enough signal for CTC and the
//! autoregressive model to latch onto). Emotions shift pitch and tempo.
//! Everything is deterministic in (speaker, text, emotion).

use crate::data::{save_audio, AudioClip};
use crate::{Result};
use ndarray::Array1;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone)]
pub struct ToySpeaker {
    pub id: String,
    pub f0: f64,
    /// Per-harmonic amplitude decay (timbre).
    pub harmonic_decay: f64,
    /// Extra gain on odd harmonics (timbre).
    pub odd_boost: f64,
    pub vibrato_hz: f64,
}

/// Deterministic speaker table.
pub fn toy_speaker(index: usize) -> ToySpeaker {
    let presets = [
        (110.0, 0.55, 1.6, 5.0),
        (196.0, 0.75, 1.0, 6.5),
        (147.0, 0.45, 2.0, 4.2),
        (262.0, 0.65, 1.3, 7.1),
    ];
    let (f0, decay, odd, vib) = presets[index % presets.len()];
    ToySpeaker {
        id: format!("spk{index}"),
        f0: f0 * (1.0 + 0.013 * (index / presets.len()) as f64),
        harmonic_decay: decay,
        odd_boost: odd,
        vibrato_hz: vib,
    }
}

fn char_offset(c: char) -> f64 {
    // Scale degrees over one octave for 'a'..'g', wrapping beyond.
    let idx = (c.to_ascii_lowercase() as u8).wrapping_sub(b'a') % 12;
    [0.0, 2.0, 4.0, 5.0, 7.0, 9.0, 11.0, 12.0, 14.0, 16.0, 17.0, 19.0][idx as usize]
}

/// Synthesize one utterance. `emotion` shifts global pitch and tempo:
/// "bright" is higher and faster, "dark" lower and slower; anything else
/// (or none) is neutral.
pub fn synth_utterance(
    spk: &ToySpeaker,
    text: &str,
    emotion: Option<&str>,
    sample_rate: u32,
) -> AudioClip {
    let (pitch_mul, char_secs) = match emotion {
        Some("bright") => (1.26, 0.11),
        Some("dark") => (0.84, 0.16),
        _ => (1.0, 0.13),
    };
    let sr = sample_rate as f64;
    let seg_len = (char_secs * sr) as usize;
    let chars: Vec<char> = text.chars().filter(|c| c.is_ascii_alphabetic()).collect();
    let mut samples = Vec::with_capacity(seg_len * chars.len());
    for (ci, &c) in chars.iter().enumerate() {
        let f = spk.f0 * pitch_mul * 2f64.powf(char_offset(c) / 12.0);
        for n in 0..seg_len {
            let t = n as f64 / sr;
            let vib = 1.0 + 0.004 * (2.0 * std::f64::consts::PI * spk.vibrato_hz * t).sin();
            let mut v = 0.0;
            for h in 1..=5u32 {
                let hf = f * h as f64 * vib;
                if hf > sr / 2.0 - 200.0 {
                    break;
                }
                let mut amp = spk.harmonic_decay.powi(h as i32 - 1);
                if h % 2 == 1 {
                    amp *= spk.odd_boost;
                }
                let phase = (ci as f64 * 0.7 + h as f64) % std::f64::consts::TAU;
                v += amp * (2.0 * std::f64::consts::PI * hf * t + phase).sin();
            }
            // Attack/decay envelope per character.
            let pos = n as f64 / seg_len as f64;
            let env = (pos * 8.0).min(1.0) * ((1.0 - pos) * 6.0).min(1.0);
            samples.push(v * env);
        }
    }
    let mut arr = Array1::from_vec(samples);
    let peak = arr.iter().fold(0.0f64, |a, &b| a.max(b.abs())).max(1e-9);
    arr.mapv_inplace(|v| 0.5 * v / peak);
    AudioClip::new(arr, sample_rate).expect("toy synthesis produced invalid audio")
}

/// One corpus row: (speaker index, text, optional emotion).
pub type ToyRow<'a> = (usize, &'a str, Option<&'a str>);

/// The shared 8-utterance, 2-speaker overfit fixture.
pub const TOY_8X2: [ToyRow<'static>; 8] = [
    (0, "abeadcag", None),
    (0, "degbecafd", None),
    (0, "cafdebgae", None),
    (0, "bedgabcef", None),
    (1, "abeadcag", None),
    (1, "degbecafd", None),
    (1, "cafdebgae", None),
    (1, "bedgabcef", None),
];

/// Write WAVs plus a JSON-Lines manifest; returns the manifest path.
pub fn write_toy_corpus(dir: &Path, rows: &[ToyRow<'_>], sample_rate: u32) -> Result<PathBuf> {
    let wav_dir = dir.join("wavs");
    std::fs::create_dir_all(&wav_dir)?;
    let mut manifest = String::new();
    for (i, &(spk_idx, text, emotion)) in rows.iter().enumerate() {
        let spk = toy_speaker(spk_idx);
        let clip = synth_utterance(&spk, text, emotion, sample_rate);
        let name = format!("utt{i:03}_{}.wav", spk.id);
        save_audio(&wav_dir.join(&name), &clip)?;
        let mut line = format!(
            "{{\"audio\": \"wavs/{name}\", \"text\": \"{text}\", \"speaker\": \"{}\", \"lang\": \"en\"",
            spk.id
        );
        if let Some(e) = emotion {
            let _ = write!(line, ", \"emotion\": \"{e}\"");
        }
        line.push('}');
        manifest.push_str(&line);
        manifest.push('\n');
    }
    let path = dir.join("manifest.jsonl");
    std::fs::write(&path, manifest)?;
    Ok(path)
}
