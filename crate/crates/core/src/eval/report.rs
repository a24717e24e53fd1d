//! Resynthesis and cloning-eval reports.
//!
//! Reports carry a schema version and a config fingerprint (SHA-256 of the
//! serialized run configuration) so identical runs produce byte-identical
//! JSON. Row-level failures are recorded and the run continues.

use crate::ar::CloneMode;
use crate::data::AudioClip;
use crate::eval::adapters::{EmbedderAdapter, TranscriberAdapter};
use crate::eval::wer::{cosine_sim, wer_lang};
use crate::flowvae::loss::ms_stft_value;
use crate::pipeline::{Pipeline, SynthesisRequest};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

pub fn config_fingerprint(config: &serde_json::Value) -> String {
    let mut h = Sha256::new();
    h.update(config.to_string().as_bytes());
    let d = h.finalize();
    d.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResynthRow {
    pub id: String,
    pub self_sim: Option<f64>,
    pub prompt_sim: Option<f64>,
    pub ms_stft: Option<f64>,
    pub pesq: Option<f64>,
    pub stoi: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResynthReport {
    pub schema_version: u32,
    pub rows: Vec<ResynthRow>,
    pub mean_self_sim: Option<f64>,
    pub mean_prompt_sim: Option<f64>,
    pub mean_ms_stft: Option<f64>,
    pub config_fingerprint: String,
}

pub struct ResynthItem {
    pub id: String,
    pub clip: AudioClip,
    /// Prompt clip designated for PROMPT-SIM (another utterance of the
    /// same speaker, when one exists).
    pub prompt: Option<AudioClip>,
}

/// Per-clip resynthesis metrics. `resynth` is the model under test
/// (encode-mean → decode for the real system; identity for calibration).
pub fn resynthesis_report(
    items: &[ResynthItem],
    resynth: impl Fn(&AudioClip) -> Result<AudioClip>,
    embedder: &dyn EmbedderAdapter,
    config: &serde_json::Value,
) -> ResynthReport {
    let mut rows = Vec::with_capacity(items.len());
    for item in items {
        let row = (|| -> Result<ResynthRow> {
            let resynthesized = resynth(&item.clip)?;
            let e_orig = embedder.embed(&item.clip)?;
            let e_resyn = embedder.embed(&resynthesized)?;
            let self_sim = cosine_sim(&e_resyn, &e_orig)?;
            let prompt_sim = match &item.prompt {
                Some(p) => {
                    let e_p = embedder.embed(p)?;
                    Some(cosine_sim(&e_resyn, &e_p)?)
                }
                None => None,
            };
            let ms = ms_stft_value(&item.clip.samples, &resynthesized.samples);
            Ok(ResynthRow {
                id: item.id.clone(),
                self_sim: Some(self_sim),
                prompt_sim,
                ms_stft: Some(ms),
                pesq: None,
                stoi: None,
                error: None,
            })
        })();
        rows.push(row.unwrap_or_else(|e| ResynthRow {
            id: item.id.clone(),
            self_sim: None,
            prompt_sim: None,
            ms_stft: None,
            pesq: None,
            stoi: None,
            error: Some(e.to_string()),
        }));
    }
    let mean = |f: &dyn Fn(&ResynthRow) -> Option<f64>| {
        let vals: Vec<f64> = rows.iter().filter_map(|r| f(r)).collect();
        if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        }
    };
    ResynthReport {
        schema_version: REPORT_SCHEMA_VERSION,
        mean_self_sim: mean(&|r| r.self_sim),
        mean_prompt_sim: mean(&|r| r.prompt_sim),
        mean_ms_stft: mean(&|r| r.ms_stft),
        rows,
        config_fingerprint: config_fingerprint(config),
    }
}

#[derive(Debug, Clone)]
pub struct CloneEvalItem {
    pub id: String,
    pub reference: AudioClip,
    /// Reference transcription; mandatory in one-shot mode, where the
    /// reference doubles as the prompt exemplar.
    pub ref_text: Option<String>,
    pub target_text: String,
    pub language: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CloneEvalRow {
    pub id: String,
    pub mode: CloneMode,
    pub wer: Option<f64>,
    pub sim: Option<f64>,
    pub layout_has_prompt: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub mode: CloneMode,
    pub rows: Vec<CloneEvalRow>,
    pub mean_wer: Option<f64>,
    pub mean_sim: Option<f64>,
    pub config_fingerprint: String,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization")
    }
}

/// Full cloning evaluation: synthesize each item, transcribe for WER,
/// embed for SIM against the reference audio.
#[allow(clippy::too_many_arguments)]
pub fn cloning_eval_run(
    items: &[CloneEvalItem],
    mode: CloneMode,
    pipeline: &mut Pipeline,
    transcriber: &dyn TranscriberAdapter,
    embedder: &dyn EmbedderAdapter,
    sampling: &crate::config::SamplingConfig,
    fm_steps: usize,
    config: &serde_json::Value,
) -> Result<EvalReport> {
    if mode == CloneMode::OneShot {
        if let Some(item) = items.iter().find(|i| i.ref_text.is_none()) {
            return Err(Error::InvalidInput(format!(
                "one-shot evaluation requires a reference transcription for every item; `{}` has none",
                item.id
            )));
        }
    }
    let mut rows = Vec::with_capacity(items.len());
    for item in items {
        let row = (|| -> Result<CloneEvalRow> {
            let req = SynthesisRequest {
                text: &item.target_text,
                mode,
                reference: Some(&item.reference),
                ref_text: item.ref_text.as_deref(),
                cond_ar: None,
                cond_fm: None,
                sampling: sampling.clone(),
                fm_steps,
                fm_seed: sampling.seed,
                adapter: None,
            };
            let out = pipeline.synthesize(&req)?;
            let layout_has_prompt = out
                .prefix_tags
                .iter()
                .any(|t| matches!(t, crate::ar::SegmentTag::PromptAudio | crate::ar::SegmentTag::PromptText));
            let hyp = transcriber.transcribe(&out.clip)?;
            let w = wer_lang(&item.target_text, &hyp, &item.language);
            let e_synth = embedder.embed(&out.clip)?;
            let e_ref = embedder.embed(&item.reference)?;
            let sim = cosine_sim(&e_synth, &e_ref)?;
            Ok(CloneEvalRow {
                id: item.id.clone(),
                mode,
                wer: Some(w),
                sim: Some(sim),
                layout_has_prompt,
                error: None,
            })
        })();
        rows.push(row.unwrap_or_else(|e| CloneEvalRow {
            id: item.id.clone(),
            mode,
            wer: None,
            sim: None,
            layout_has_prompt: false,
            error: Some(e.to_string()),
        }));
    }
    let mean = |f: &dyn Fn(&CloneEvalRow) -> Option<f64>| {
        let vals: Vec<f64> = rows.iter().filter_map(|r| f(r)).collect();
        if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        }
    };
    Ok(EvalReport {
        schema_version: REPORT_SCHEMA_VERSION,
        mode,
        mean_wer: mean(&|r| r.wer),
        mean_sim: mean(&|r| r.sim),
        rows,
        config_fingerprint: config_fingerprint(config),
    })
}
