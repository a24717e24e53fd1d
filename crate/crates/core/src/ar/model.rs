//! Decoder-only autoregressive transformer over the joint vocabulary,
//! conditioned on a speaker vector injected as a projected prefix
//! embedding at position 0.

use crate::ar::layout::{build_generation_prefix, ArVocab, CloneMode, SequenceLayout};
use crate::config::{ArConfig, SamplingConfig};
use crate::nn::{BlockDeltas, LayerNorm, Linear, TransformerBlock};
use crate::speaker::{SpeakerCondition, SpeakerEncoder};
use crate::tokenizer::{TokenSequence, TOKEN_RATE};
use crate::{Error, Result};
use chorale_autograd::{checkpoint, rng, Adam, ParamSet, Tensor};
use ndarray::{Array2, Ix2};
use rand::Rng;
use std::path::Path;

/// Final hidden states over audio-token positions, at 25 frames/s — the
/// conditioning stream consumed by the latent flow-matching stage.
#[derive(Debug, Clone)]
pub struct ConditionStream {
    pub frames: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct GenerateOutput {
    pub tokens: TokenSequence,
    pub condition_stream: ConditionStream,
    /// Hidden states over the prompt audio tokens (one-shot mode only);
    /// conditions the flow-matching prompt region.
    pub prompt_hidden: Option<Array2<f64>>,
    /// Set when max_tokens was reached before EOS.
    pub truncated: bool,
    /// Generation prefix, for layout inspection.
    pub prefix_ids: Vec<usize>,
    pub prefix_tags: Vec<crate::ar::layout::SegmentTag>,
}

pub struct ArModel {
    pub cfg: ArConfig,
    pub vocab: ArVocab,
    tok_embed: Tensor, // [V, d]
    pos_embed: Tensor, // [ctx, d]
    cond_proj: Linear, // [spk_dim -> d]
    blocks: Vec<TransformerBlock>,
    ln_f: LayerNorm,
    lm_head: Linear, // near-zero init: initial loss sits at ln(V)
}

impl ArModel {
    pub fn new(cfg: ArConfig, seed: u64) -> Self {
        let mut r = rng::substream(seed, "ar-model");
        let vocab = ArVocab {
            audio_vocab: cfg.audio_vocab,
        };
        let v = vocab.size();
        let d = cfg.d_model;
        let blocks = (0..cfg.layers)
            .map(|_| TransformerBlock::new(d, cfg.heads, cfg.ff_mult, &mut r))
            .collect();
        ArModel {
            tok_embed: Tensor::param(rng::randn_scaled(&[v, d], 0.02, &mut r)),
            pos_embed: Tensor::param(rng::randn_scaled(&[cfg.max_context, d], 0.02, &mut r)),
            cond_proj: Linear::new(cfg.spk_dim, d, &mut r),
            blocks,
            ln_f: LayerNorm::new(d),
            lm_head: Linear::small(d, v, 1e-3, &mut r),
            vocab,
            cfg,
        }
    }

    pub fn num_layers(&self) -> usize {
        self.blocks.len()
    }

    /// Hidden states `[S, d]` for a sequence, with the condition embedding
    /// in the prefix slot. `cond` stays on the tape, so speaker-encoder
    /// gradients flow through here during joint training.
    pub fn forward_hidden(
        &self,
        ids: &[usize],
        cond: &Tensor,
        deltas: Option<&[BlockDeltas]>,
    ) -> Tensor {
        let s = ids.len();
        assert!(s <= self.cfg.max_context, "sequence exceeds max context");
        assert!(s >= 1);
        let emb = self.tok_embed.embedding(ids);
        let cond_row = self.cond_proj.forward(&cond.reshape(&[1, self.cfg.spk_dim]));
        let x = if s > 1 {
            Tensor::concat(0, &[cond_row, emb.narrow(0, 1, s - 1)])
        } else {
            cond_row
        };
        let pos = self.pos_embed.narrow(0, 0, s);
        let mut x = x.add(&pos);
        for (i, block) in self.blocks.iter().enumerate() {
            let d = deltas.map(|ds| &ds[i]);
            x = block.forward(&x, true, d);
        }
        self.ln_f.forward(&x)
    }

    pub fn logits(&self, hidden: &Tensor) -> Tensor {
        self.lm_head.forward(hidden)
    }

    /// Mean next-token cross-entropy over loss-mask positions, across a
    /// batch of layouts with per-item condition tensors.
    pub fn batch_loss(
        &self,
        items: &[(&SequenceLayout, Tensor)],
        deltas: Option<&[BlockDeltas]>,
    ) -> Tensor {
        let mut terms = Vec::new();
        let mut count = 0usize;
        for (layout, cond) in items {
            let hidden = self.forward_hidden(&layout.input_ids, cond, deltas);
            let logits = self.logits(&hidden);
            let mut rows = Vec::new();
            let mut targets = Vec::new();
            for p in 0..layout.len() {
                if layout.loss_mask[p] {
                    debug_assert!(p > 0, "loss mask cannot cover position 0");
                    rows.push(p - 1);
                    targets.push(layout.input_ids[p]);
                }
            }
            count += rows.len();
            let lsm = logits.gather_rows(&rows).log_softmax_last();
            terms.push(lsm.pick(&targets).sum());
        }
        let mut acc = terms[0].clone();
        for t in &terms[1..] {
            acc = acc.add(t);
        }
        acc.scale(-1.0 / count.max(1) as f64)
    }

    /// One joint optimizer step over the transformer and the speaker
    /// encoder. Each item pairs a layout with its reference mel.
    pub fn train_step_joint(
        &self,
        batch: &[(SequenceLayout, Array2<f64>)],
        spk: &SpeakerEncoder,
        params: &ParamSet,
        opt: &mut Adam,
        step: u64,
    ) -> Result<f64> {
        let mut items = Vec::with_capacity(batch.len());
        for (layout, ref_mel) in batch {
            let cond = spk.forward(&Tensor::constant(ref_mel.clone().into_dyn()));
            items.push((layout, cond));
        }
        let loss = self.batch_loss(&items, None);
        let v = loss.value();
        if !v.is_finite() {
            return Err(Error::NanLoss {
                step,
                detail: "ar cross-entropy".into(),
            });
        }
        loss.backward();
        opt.step(params);
        Ok(v)
    }

    /// Teacher-forced hidden states over the target audio-token positions
    /// of a layout (the conditioning stream for flow-matching training).
    pub fn condition_stream(&self, layout: &SequenceLayout, cond: &SpeakerCondition) -> ConditionStream {
        let cond_t = Tensor::constant(cond.vector.clone().into_dyn());
        let hidden = self.forward_hidden(&layout.input_ids, &cond_t, None);
        let positions = layout.target_audio_positions(&self.vocab);
        let h = hidden.data();
        let h2 = h.view().into_dimensionality::<Ix2>().unwrap();
        let mut frames = Array2::<f64>::zeros((positions.len(), self.cfg.d_model));
        for (i, &p) in positions.iter().enumerate() {
            frames.row_mut(i).assign(&h2.row(p));
        }
        ConditionStream { frames }
    }

    /// Autoregressive sampling until EOS_A or `max_tokens`. Returns the
    /// generated tokens (prompt tokens never re-emitted), their final
    /// hidden states, and a truncation flag.
    pub fn generate(
        &self,
        text: &str,
        cond: &SpeakerCondition,
        mode: CloneMode,
        prompt: Option<(&str, &TokenSequence)>,
        sampling: &SamplingConfig,
        deltas: Option<&[BlockDeltas]>,
    ) -> Result<GenerateOutput> {
        let prompt_ids = prompt.map(|(t, seq)| (t, seq.tokens.as_slice()));
        let (mut ids, prefix_tags) = build_generation_prefix(text, mode, prompt_ids, &self.vocab)?;
        let prefix_ids = ids.clone();
        let prefix_len = ids.len();
        let cond_t = Tensor::constant(cond.vector.clone().into_dyn());
        let mut r = rng::substream(sampling.seed, "ar-generate");

        // Sampling is restricted to the audio alphabet plus EOS_A.
        let mut allowed: Vec<usize> = (0..self.cfg.audio_vocab)
            .map(|t| self.vocab.audio_id(t))
            .collect();
        allowed.push(self.vocab.eos_a());

        let mut generated: Vec<usize> = Vec::new();
        let mut truncated = false;
        loop {
            if ids.len() >= self.cfg.max_context {
                truncated = true;
                break;
            }
            let hidden = self.forward_hidden(&ids, &cond_t, deltas);
            let last = hidden.narrow(0, ids.len() - 1, 1);
            let logits_row = self.logits(&last);
            let row = logits_row.data().iter().copied().collect::<Vec<f64>>();
            let next = sample_id(&row, &allowed, sampling, &mut r);
            if next == self.vocab.eos_a() {
                break;
            }
            generated.push(next - crate::ar::layout::TEXT_VOCAB);
            ids.push(next);
            if generated.len() >= sampling.max_tokens {
                truncated = true;
                break;
            }
        }

        // One pass over the final sequence for the conditioning stream
        // (and the prompt-region stream in one-shot mode).
        let prompt_positions: Vec<usize> = prefix_tags
            .iter()
            .enumerate()
            .filter(|(_, &t)| t == crate::ar::layout::SegmentTag::PromptAudio)
            .map(|(p, _)| p)
            .collect();
        let mut frames = Array2::<f64>::zeros((generated.len(), self.cfg.d_model));
        let mut prompt_hidden = None;
        if !generated.is_empty() || !prompt_positions.is_empty() {
            let hidden = self.forward_hidden(&ids, &cond_t, deltas);
            let h = hidden.data();
            let h2 = h.view().into_dimensionality::<Ix2>().unwrap();
            for i in 0..generated.len() {
                frames.row_mut(i).assign(&h2.row(prefix_len + i));
            }
            if !prompt_positions.is_empty() {
                let mut ph = Array2::<f64>::zeros((prompt_positions.len(), self.cfg.d_model));
                for (i, &p) in prompt_positions.iter().enumerate() {
                    ph.row_mut(i).assign(&h2.row(p));
                }
                prompt_hidden = Some(ph);
            }
        }
        Ok(GenerateOutput {
            tokens: TokenSequence {
                tokens: generated,
                rate: TOKEN_RATE,
            },
            condition_stream: ConditionStream { frames },
            prompt_hidden,
            truncated,
            prefix_ids,
            prefix_tags,
        })
    }

    /// Block handles, for adapter construction.
    pub fn blocks(&self) -> &[TransformerBlock] {
        &self.blocks
    }

    pub fn params(&self) -> ParamSet {
        let mut ps = ParamSet::new();
        ps.push("tok_embed", self.tok_embed.clone());
        ps.push("pos_embed", self.pos_embed.clone());
        self.cond_proj.collect(&mut ps, "cond_proj");
        for (i, b) in self.blocks.iter().enumerate() {
            b.collect(&mut ps, &format!("block{i}"));
        }
        self.ln_f.collect(&mut ps, "ln_f");
        self.lm_head.collect(&mut ps, "lm_head");
        ps
    }

    pub fn freeze(&self) {
        self.params().freeze_all();
    }
}

fn sample_id(logits: &[f64], allowed: &[usize], s: &SamplingConfig, r: &mut rand_chacha::ChaCha8Rng) -> usize {
    // Greedy when temperature is (effectively) zero.
    if s.temperature <= 1e-9 {
        return allowed
            .iter()
            .copied()
            .max_by(|&a, &b| logits[a].partial_cmp(&logits[b]).unwrap())
            .unwrap();
    }
    let mut cand: Vec<(usize, f64)> = allowed.iter().map(|&i| (i, logits[i] / s.temperature)).collect();
    cand.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
    if s.top_k > 0 && s.top_k < cand.len() {
        cand.truncate(s.top_k);
    }
    let m = cand[0].1;
    let mut probs: Vec<f64> = cand.iter().map(|&(_, l)| (l - m).exp()).collect();
    let z: f64 = probs.iter().sum();
    for p in probs.iter_mut() {
        *p /= z;
    }
    if s.top_p < 1.0 {
        let mut cum = 0.0;
        let mut keep = probs.len();
        for (i, &p) in probs.iter().enumerate() {
            cum += p;
            if cum >= s.top_p {
                keep = i + 1;
                break;
            }
        }
        cand.truncate(keep);
        probs.truncate(keep);
        let z: f64 = probs.iter().sum();
        for p in probs.iter_mut() {
            *p /= z;
        }
    }
    let x: f64 = r.gen_range(0.0..1.0);
    let mut cum = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        cum += p;
        if x < cum {
            return cand[i].0;
        }
    }
    cand.last().unwrap().0
}

/// Save the jointly trained pair (transformer + speaker encoder) as one
/// checkpoint.
pub fn save_ar_stage(dir: &Path, ar: &ArModel, spk: &SpeakerEncoder) -> Result<()> {
    let mut ps = ar.params().prefixed("ar");
    ps.extend(spk.params().prefixed("spk"));
    let config = serde_json::json!({
        "kind": "ar_stage",
        "ar": ar.cfg,
        "speaker": spk.cfg,
    });
    checkpoint::save(dir, &ps, &config)?;
    Ok(())
}

pub fn load_ar_stage(dir: &Path) -> Result<(ArModel, SpeakerEncoder)> {
    let (arrays, config) = checkpoint::load(dir)?;
    let ar_cfg: ArConfig = serde_json::from_value(
        config
            .get("ar")
            .cloned()
            .ok_or_else(|| Error::Checkpoint("missing ar config".into()))?,
    )?;
    let spk_cfg: crate::config::SpeakerEncoderConfig = serde_json::from_value(
        config
            .get("speaker")
            .cloned()
            .ok_or_else(|| Error::Checkpoint("missing speaker config".into()))?,
    )?;
    let ar = ArModel::new(ar_cfg, 0);
    let spk = SpeakerEncoder::new(spk_cfg, 0);
    let mut ps = ar.params().prefixed("ar");
    ps.extend(spk.params().prefixed("spk"));
    checkpoint::restore_params(&ps, &arrays)?;
    Ok((ar, spk))
}
