//! Manifest ingestion, audio loading, log-mel features and dataset splits —
//! the single source of audio/feature conventions for every other module.

pub mod audio;
pub mod manifest;
pub mod mel;
pub mod split;

pub use audio::{load_audio, resample, save_audio, AudioClip};
pub use manifest::{load_manifest, ManifestEntry};
pub use mel::{compute_mel, mel_filter_centers, mel_filterbank, MelSpectrogram};
pub use split::{speaker_unit_hash, split_manifest};
