//! End-to-end synthesis: text → audio tokens → conditioned latents →
//! waveform.

use crate::ar::{ArModel, CloneMode, SegmentTag};
use crate::config::{MelConfig, SamplingConfig};
use crate::data::{compute_mel, AudioClip};
use crate::ext::lora::LoraAdapter;
use crate::flowvae::{FlowVae, LatentSequence};
use crate::fm::{FmCondition, FmModel, LATENTS_PER_TOKEN};
use crate::speaker::{SpeakerCondition, SpeakerEncoder};
use crate::tokenizer::{SpeechTokenizer, TokenSequence};
use crate::{Error, Result};
use ndarray::{s, Array2};
use std::path::Path;

pub struct Pipeline {
    pub mel_cfg: MelConfig,
    pub tokenizer: SpeechTokenizer,
    pub ar: ArModel,
    pub ar_spk: SpeakerEncoder,
    pub fvae: FlowVae,
    pub fm: FmModel,
    pub fm_spk: SpeakerEncoder,
}

pub struct SynthesisRequest<'a> {
    pub text: &'a str,
    pub mode: CloneMode,
    pub reference: Option<&'a AudioClip>,
    /// Transcription of the reference; required in one-shot mode, where the
    /// reference additionally serves as the prompt exemplar.
    pub ref_text: Option<&'a str>,
    /// Overrides for the condition vectors (voice-design or optimized
    /// embeddings); when absent they come from the reference audio.
    pub cond_ar: Option<SpeakerCondition>,
    pub cond_fm: Option<SpeakerCondition>,
    pub sampling: SamplingConfig,
    pub fm_steps: usize,
    pub fm_seed: u64,
    pub adapter: Option<&'a LoraAdapter>,
}

impl<'a> SynthesisRequest<'a> {
    pub fn zero_shot(text: &'a str, reference: &'a AudioClip, seed: u64) -> Self {
        SynthesisRequest {
            text,
            mode: CloneMode::ZeroShot,
            reference: Some(reference),
            ref_text: None,
            cond_ar: None,
            cond_fm: None,
            sampling: SamplingConfig {
                seed,
                ..SamplingConfig::default()
            },
            fm_steps: 10,
            fm_seed: seed,
            adapter: None,
        }
    }
}

pub struct SynthesisOutput {
    pub clip: AudioClip,
    pub tokens: TokenSequence,
    pub truncated: bool,
    /// Generation prefix for layout inspection.
    pub prefix_ids: Vec<usize>,
    pub prefix_tags: Vec<SegmentTag>,
}

impl Pipeline {
    /// Load every stage from `root/{tokenizer, ar, flowvae, fm}`.
    pub fn load(root: &Path, mel_cfg: MelConfig) -> Result<Self> {
        let tokenizer = SpeechTokenizer::load(&root.join("tokenizer"))?;
        let (ar, ar_spk) = crate::ar::load_ar_stage(&root.join("ar"))?;
        let fvae = FlowVae::load(&root.join("flowvae"))?;
        let (fm, fm_spk) = crate::fm::load_fm_stage(&root.join("fm"))?;
        Ok(Pipeline {
            mel_cfg,
            tokenizer,
            ar,
            ar_spk,
            fvae,
            fm,
            fm_spk,
        })
    }

    pub fn synthesize(&mut self, req: &SynthesisRequest) -> Result<SynthesisOutput> {
        if req.mode == CloneMode::OneShot && req.ref_text.is_none() {
            return Err(Error::InvalidInput(
                "one-shot cloning requires the reference transcription (it serves as the prompt exemplar)"
                    .into(),
            ));
        }
        let ref_mel = match req.reference {
            Some(clip) => Some(compute_mel(clip, &self.mel_cfg)?),
            None => None,
        };
        let need_ref = req.cond_ar.is_none() || req.cond_fm.is_none() || req.mode == CloneMode::OneShot;
        if need_ref && ref_mel.is_none() {
            return Err(Error::InvalidInput(
                "a reference clip is required unless both condition vectors are supplied".into(),
            ));
        }

        let cond_ar = match &req.cond_ar {
            Some(c) => c.clone(),
            None => self.ar_spk.encode(ref_mel.as_ref().unwrap())?,
        };
        let cond_fm = match &req.cond_fm {
            Some(c) => c.clone(),
            None => self.fm_spk.encode(ref_mel.as_ref().unwrap())?,
        };

        let prompt_tokens = if req.mode == CloneMode::OneShot {
            Some(self.tokenizer.tokenize(ref_mel.as_ref().unwrap())?)
        } else {
            None
        };
        let prompt = match (&prompt_tokens, req.ref_text) {
            (Some(toks), Some(txt)) => Some((txt, toks)),
            _ => None,
        };

        let deltas = match req.adapter {
            Some(a) => Some(a.deltas_for(&self.ar)?),
            None => None,
        };
        let gen = self.ar.generate(
            req.text,
            &cond_ar,
            req.mode,
            prompt,
            &req.sampling,
            deltas.as_deref(),
        )?;
        if gen.tokens.tokens.is_empty() {
            return Err(Error::InvalidInput(
                "the model emitted no audio tokens for this input".into(),
            ));
        }

        let z_target = match (&gen.prompt_hidden, req.reference) {
            (Some(ph), Some(ref_clip)) => {
                // One-shot: condition covers [prompt ‖ generated] frames and
                // the prompt region is inpainted with the reference latents.
                let n_p = ph.nrows();
                let c_full = ndarray::concatenate(
                    ndarray::Axis(0),
                    &[ph.view(), gen.condition_stream.frames.view()],
                )
                .unwrap();
                let c_up = self.fm.upsample_condition(&crate::ar::ConditionStream {
                    frames: c_full,
                })?;
                let t_prompt = LATENTS_PER_TOKEN * n_p;
                let t_total = c_up.nrows();
                let stats = self.fvae.fv_encode(ref_clip)?;
                let x_p = fit_rows(&stats.mu, t_prompt, t_total);
                let mut mask = vec![false; t_total];
                for m in mask.iter_mut().take(t_prompt) {
                    *m = true;
                }
                let z = self.fm.generate(
                    &FmCondition {
                        cond_frames: c_up,
                        speaker: cond_fm,
                        prompt_mask: mask,
                        x_p: Some(x_p),
                    },
                    req.fm_steps,
                    req.fm_seed,
                )?;
                z.slice(s![t_prompt.., ..]).to_owned()
            }
            _ => {
                let c_up = self.fm.upsample_condition(&gen.condition_stream)?;
                let t_total = c_up.nrows();
                self.fm.generate(
                    &FmCondition {
                        cond_frames: c_up,
                        speaker: cond_fm,
                        prompt_mask: vec![false; t_total],
                        x_p: None,
                    },
                    req.fm_steps,
                    req.fm_seed,
                )?
            }
        };

        let clip = self.fvae.fv_decode(&LatentSequence { z: z_target })?;
        Ok(SynthesisOutput {
            clip,
            tokens: gen.tokens,
            truncated: gen.truncated,
            prefix_ids: gen.prefix_ids,
            prefix_tags: gen.prefix_tags,
        })
    }

    /// Encode-mean → decode resynthesis (the `resynth` path).
    pub fn resynthesize(&self, clip: &AudioClip) -> Result<AudioClip> {
        let stats = self.fvae.fv_encode(clip)?;
        self.fvae.fv_decode(&LatentSequence { z: stats.mu })
    }
}

/// Crop or edge-repeat `x` to exactly `want` rows (padded region never
/// exceeds the total frame budget).
fn fit_rows(x: &Array2<f64>, want: usize, cap: usize) -> Array2<f64> {
    let want = want.min(cap);
    let mut out = Array2::zeros((want, x.ncols()));
    for i in 0..want {
        let src = i.min(x.nrows().saturating_sub(1));
        out.row_mut(i).assign(&x.row(src));
    }
    out
}
