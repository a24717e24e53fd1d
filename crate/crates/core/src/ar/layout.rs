//! Joint-vocabulary sequence layouts for the autoregressive model.
//!
//! Text uses byte-level units (a degenerate BPE needing no trained merges),
//! audio tokens sit after the byte range, and four specials follow. The
//! speaker condition occupies position 0 as a projected prefix embedding.
//!
//! Zero-shot:  [COND][text][SEP][BOS_A][target audio][EOS_A]
//! One-shot:   [COND][prompt text][target text][SEP][BOS_A][prompt audio][target audio][EOS_A]
//!
//! The loss mask covers the target audio tokens and EOS_A only; prompt
//! audio is context, never a target. A zero-shot layout contains nothing
//! from the reference utterance — the reference feeds the speaker encoder
//! outside the sequence.

use crate::{Error, Result};
use serde::{Deserialize, Serialize};

pub const TEXT_VOCAB: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CloneMode {
    ZeroShot,
    OneShot,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SegmentTag {
    Spk,
    Text,
    PromptText,
    PromptAudio,
    Audio,
}

/// Id arithmetic over the joint vocabulary.
#[derive(Debug, Clone, Copy)]
pub struct ArVocab {
    pub audio_vocab: usize,
}

impl ArVocab {
    pub fn text_id(b: u8) -> usize {
        b as usize
    }

    pub fn audio_id(&self, token: usize) -> usize {
        debug_assert!(token < self.audio_vocab);
        TEXT_VOCAB + token
    }

    pub fn audio_token_of(&self, id: usize) -> Option<usize> {
        (TEXT_VOCAB..TEXT_VOCAB + self.audio_vocab).contains(&id).then(|| id - TEXT_VOCAB)
    }

    pub fn bos_a(&self) -> usize {
        TEXT_VOCAB + self.audio_vocab
    }

    pub fn eos_a(&self) -> usize {
        TEXT_VOCAB + self.audio_vocab + 1
    }

    pub fn sep(&self) -> usize {
        TEXT_VOCAB + self.audio_vocab + 2
    }

    pub fn cond(&self) -> usize {
        TEXT_VOCAB + self.audio_vocab + 3
    }

    pub fn size(&self) -> usize {
        TEXT_VOCAB + self.audio_vocab + 4
    }
}

/// One utterance with its discrete audio tokens.
#[derive(Debug, Clone)]
pub struct Utterance {
    pub utterance_id: String,
    pub speaker_id: String,
    pub text: String,
    pub tokens: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct SequenceLayout {
    pub input_ids: Vec<usize>,
    /// Prefix position where the speaker condition embedding is injected.
    pub condition_slot: usize,
    pub loss_mask: Vec<bool>,
    pub segment_tags: Vec<SegmentTag>,
    pub mode: CloneMode,
}

impl SequenceLayout {
    pub fn len(&self) -> usize {
        self.input_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.input_ids.is_empty()
    }

    /// Positions of the target audio tokens (tag Audio, audio-code id).
    pub fn target_audio_positions(&self, vocab: &ArVocab) -> Vec<usize> {
        (0..self.len())
            .filter(|&p| {
                self.segment_tags[p] == SegmentTag::Audio
                    && vocab.audio_token_of(self.input_ids[p]).is_some()
            })
            .collect()
    }
}

/// Training layout for a (target, reference) pair. The reference must be a
/// different utterance of the same speaker: feeding the model the utterance
/// it is predicting leaks content through the speaker path.
pub fn build_training_sequence(
    target: &Utterance,
    reference: &Utterance,
    mode: CloneMode,
    vocab: &ArVocab,
) -> Result<SequenceLayout> {
    if target.speaker_id != reference.speaker_id {
        return Err(Error::InvalidInput(format!(
            "reference speaker {} does not match target speaker {}",
            reference.speaker_id, target.speaker_id
        )));
    }
    if target.utterance_id == reference.utterance_id {
        return Err(Error::InvalidInput(format!(
            "reference utterance must differ from the target (both are {})",
            target.utterance_id
        )));
    }
    match mode {
        CloneMode::ZeroShot => Ok(build_target_layout(target, vocab)),
        CloneMode::OneShot => build_one_shot(target, reference, vocab),
    }
}

/// Zero-shot layout for a single utterance (also the teacher-forcing layout
/// used by embedding optimization, where no reference utterance exists).
pub fn build_target_layout(target: &Utterance, vocab: &ArVocab) -> SequenceLayout {
    let mut ids = vec![vocab.cond()];
    let mut tags = vec![SegmentTag::Spk];
    push_text(&mut ids, &mut tags, &target.text, SegmentTag::Text);
    ids.push(vocab.sep());
    tags.push(SegmentTag::Text);
    ids.push(vocab.bos_a());
    tags.push(SegmentTag::Audio);
    push_audio(&mut ids, &mut tags, &target.tokens, SegmentTag::Audio, vocab);
    ids.push(vocab.eos_a());
    tags.push(SegmentTag::Audio);
    finish_layout(ids, tags, CloneMode::ZeroShot, vocab)
}

fn build_one_shot(
    target: &Utterance,
    reference: &Utterance,
    vocab: &ArVocab,
) -> Result<SequenceLayout> {
    let mut ids = vec![vocab.cond()];
    let mut tags = vec![SegmentTag::Spk];
    push_text(&mut ids, &mut tags, &reference.text, SegmentTag::PromptText);
    push_text(&mut ids, &mut tags, &target.text, SegmentTag::Text);
    ids.push(vocab.sep());
    tags.push(SegmentTag::Text);
    ids.push(vocab.bos_a());
    tags.push(SegmentTag::Audio);
    push_audio(&mut ids, &mut tags, &reference.tokens, SegmentTag::PromptAudio, vocab);
    push_audio(&mut ids, &mut tags, &target.tokens, SegmentTag::Audio, vocab);
    ids.push(vocab.eos_a());
    tags.push(SegmentTag::Audio);
    Ok(finish_layout(ids, tags, CloneMode::OneShot, vocab))
}

/// Loss on the target audio tokens and the closing EOS_A only.
fn finish_layout(
    ids: Vec<usize>,
    tags: Vec<SegmentTag>,
    mode: CloneMode,
    vocab: &ArVocab,
) -> SequenceLayout {
    let mut loss_mask = vec![false; ids.len()];
    let eos_pos = ids.len() - 1;
    loss_mask[eos_pos] = true;
    for p in 0..ids.len() {
        if tags[p] == SegmentTag::Audio
            && (TEXT_VOCAB..TEXT_VOCAB + vocab.audio_vocab).contains(&ids[p])
        {
            loss_mask[p] = true;
        }
    }
    SequenceLayout {
        input_ids: ids,
        condition_slot: 0,
        loss_mask,
        segment_tags: tags,
        mode,
    }
}

/// Prefix for generation (everything up to where sampling starts).
pub fn build_generation_prefix(
    text: &str,
    mode: CloneMode,
    prompt: Option<(&str, &[usize])>,
    vocab: &ArVocab,
) -> Result<(Vec<usize>, Vec<SegmentTag>)> {
    match (mode, prompt.is_some()) {
        (CloneMode::OneShot, false) => {
            return Err(Error::InvalidInput(
                "one-shot generation requires a (text, tokens) prompt exemplar".into(),
            ))
        }
        (CloneMode::ZeroShot, true) => {
            return Err(Error::InvalidInput(
                "zero-shot generation takes no prompt exemplar".into(),
            ))
        }
        _ => {}
    }
    let mut ids = vec![vocab.cond()];
    let mut tags = vec![SegmentTag::Spk];
    if let Some((ptext, _)) = prompt {
        push_text(&mut ids, &mut tags, ptext, SegmentTag::PromptText);
    }
    push_text(&mut ids, &mut tags, text, SegmentTag::Text);
    ids.push(vocab.sep());
    tags.push(SegmentTag::Text);
    ids.push(vocab.bos_a());
    tags.push(SegmentTag::Audio);
    if let Some((_, ptokens)) = prompt {
        push_audio(&mut ids, &mut tags, ptokens, SegmentTag::PromptAudio, vocab);
    }
    Ok((ids, tags))
}

fn push_text(ids: &mut Vec<usize>, tags: &mut Vec<SegmentTag>, text: &str, tag: SegmentTag) {
    for b in text.bytes() {
        ids.push(ArVocab::text_id(b));
        tags.push(tag);
    }
}

fn push_audio(
    ids: &mut Vec<usize>,
    tags: &mut Vec<SegmentTag>,
    tokens: &[usize],
    tag: SegmentTag,
    vocab: &ArVocab,
) {
    for &t in tokens {
        ids.push(vocab.audio_id(t));
        tags.push(tag);
    }
}
