//! Training-stage runners shared by the CLI and the test fixtures.
//!
//! Each runner owns one stage's loop: batch sampling, optimizer steps,
//! JSONL logging, checkpointing, and exact resume via a lossless trainer
//! snapshot (model + optimizer moments in f64, step counter, RNG
//! position). The f32 checkpoint under the same directory is the inference
//! interface; the snapshot exists only so interrupted runs continue
//! bit-exactly.

use crate::ar::{build_target_layout, build_training_sequence, ArModel, CloneMode, Utterance};
use crate::config::{
    ArConfig, FlowVaeConfig, FmConfig, MelConfig, SpeakerEncoderConfig, TokenizerConfig,
    TrainConfig,
};
use crate::data::{compute_mel, load_audio, load_manifest, AudioClip, ManifestEntry};
use crate::flowvae::{FlowVae, FlowVaeLossReport};
use crate::fm::{FmModel, FmTrainItem};
use crate::speaker::SpeakerEncoder;
use crate::tokenizer::{ctc::CharVocab, MelBatchItem, SpeechTokenizer, TokenizerLossReport};
use crate::{Error, Result};
use chorale_autograd::{checkpoint, rng, Adam, ParamSet};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

/// Loaded utterances with features, grouped by speaker.
pub struct Corpus {
    pub items: Vec<CorpusItem>,
    pub by_speaker: BTreeMap<String, Vec<usize>>,
}

pub struct CorpusItem {
    pub entry: ManifestEntry,
    pub clip: AudioClip,
    pub mel: Array2<f64>,
}

impl Corpus {
    pub fn load(manifest_path: &Path, mel_cfg: &MelConfig) -> Result<Corpus> {
        let entries = load_manifest(manifest_path)?;
        if entries.is_empty() {
            return Err(Error::InvalidInput(format!(
                "manifest {} holds no entries",
                manifest_path.display()
            )));
        }
        let mut items = Vec::with_capacity(entries.len());
        let mut by_speaker: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for entry in entries {
            let clip = load_audio(&entry.audio_path, mel_cfg.sample_rate)?;
            let mel = compute_mel(&clip, mel_cfg)?.frames;
            by_speaker
                .entry(entry.speaker_id.clone())
                .or_default()
                .push(items.len());
            items.push(CorpusItem { entry, clip, mel });
        }
        Ok(Corpus { items, by_speaker })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// A different utterance of the same speaker, uniformly at random;
    /// falls back to the item itself only when the speaker has one clip.
    pub fn other_of_same_speaker(&self, idx: usize, r: &mut ChaCha8Rng) -> usize {
        let sibs = &self.by_speaker[&self.items[idx].entry.speaker_id];
        if sibs.len() < 2 {
            return idx;
        }
        loop {
            let cand = sibs[r.gen_range(0..sibs.len())];
            if cand != idx {
                return cand;
            }
        }
    }

    /// Deterministic alternative utterance (caching-friendly).
    pub fn next_of_same_speaker(&self, idx: usize) -> usize {
        let sibs = &self.by_speaker[&self.items[idx].entry.speaker_id];
        let pos = sibs.iter().position(|&i| i == idx).unwrap();
        sibs[(pos + 1) % sibs.len()]
    }

    pub fn utterances_with(&self, tokens: &[Vec<usize>]) -> Vec<Utterance> {
        self.items
            .iter()
            .zip(tokens)
            .map(|(it, toks)| Utterance {
                utterance_id: it.entry.utterance_id(),
                speaker_id: it.entry.speaker_id.clone(),
                text: it.entry.text.clone(),
                tokens: toks.clone(),
            })
            .collect()
    }
}

/// Where a stage writes its artifacts; `None` trains in memory only.
#[derive(Clone, Copy, Default)]
pub struct StageIo<'a> {
    pub dir: Option<&'a Path>,
    pub resume: bool,
}

impl<'a> StageIo<'a> {
    pub fn at(dir: &'a Path) -> Self {
        StageIo {
            dir: Some(dir),
            resume: false,
        }
    }

    pub fn resume_at(dir: &'a Path) -> Self {
        StageIo {
            dir: Some(dir),
            resume: true,
        }
    }
}

fn lr_at(train: &TrainConfig, step: u64) -> f64 {
    if train.warmup_steps > 0 && step < train.warmup_steps {
        return train.lr * (step + 1) as f64 / train.warmup_steps as f64;
    }
    match train.lr_final {
        Some(end) => {
            let t = step as f64 / train.steps.max(1) as f64;
            train.lr + (end - train.lr) * t
        }
        None => train.lr,
    }
}

fn append_log(dir: Option<&Path>, record: &serde_json::Value) {
    if let Some(dir) = dir {
        let _ = std::fs::create_dir_all(dir);
        if let Ok(mut f) = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(dir.join("log.jsonl"))
        {
            let _ = writeln!(f, "{record}");
        }
    }
}

#[derive(serde::Serialize, serde::Deserialize)]
struct SnapshotMeta {
    step: u64,
    rng_seed: String,
    rng_word_pos: String,
}

fn save_snapshot(dir: &Path, params: &ParamSet, opt: &Adam, step: u64, r: &ChaCha8Rng) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut arrays: BTreeMap<String, ndarray::ArrayD<f64>> = BTreeMap::new();
    for (name, t) in params.iter() {
        arrays.insert(format!("param/{name}"), t.data().clone());
    }
    let (opt_step, opt_arrays) = opt.export_state();
    debug_assert_eq!(opt_step, step);
    for (name, a) in opt_arrays {
        arrays.insert(format!("opt/{name}"), a);
    }
    checkpoint::save_state_file(&dir.join("trainer_state.bin"), &arrays)?;
    let meta = SnapshotMeta {
        step,
        rng_seed: hex::encode(r.get_seed()),
        rng_word_pos: r.get_word_pos().to_string(),
    };
    std::fs::write(
        dir.join("trainer_state.json"),
        serde_json::to_string_pretty(&meta)?,
    )?;
    Ok(())
}

fn try_restore(dir: &Path, params: &ParamSet, opt: &mut Adam) -> Result<Option<(u64, ChaCha8Rng)>> {
    let bin = dir.join("trainer_state.bin");
    let meta_path = dir.join("trainer_state.json");
    if !bin.exists() || !meta_path.exists() {
        return Ok(None);
    }
    let arrays = checkpoint::load_state_file(&bin)?;
    for (name, t) in params.iter() {
        let key = format!("param/{name}");
        let arr = arrays
            .get(&key)
            .ok_or_else(|| Error::Checkpoint(format!("snapshot missing {key}")))?;
        t.data_mut().assign(arr);
    }
    let opt_arrays: BTreeMap<String, ndarray::ArrayD<f64>> = arrays
        .iter()
        .filter_map(|(k, v)| k.strip_prefix("opt/").map(|n| (n.to_string(), v.clone())))
        .collect();
    let meta: SnapshotMeta = serde_json::from_str(&std::fs::read_to_string(&meta_path)?)?;
    opt.import_state(meta.step, &opt_arrays);
    let seed_bytes = hex::decode(&meta.rng_seed)
        .map_err(|e| Error::Checkpoint(format!("bad rng seed hex: {e}")))?;
    let seed: [u8; 32] = seed_bytes
        .try_into()
        .map_err(|_| Error::Checkpoint("rng seed must be 32 bytes".into()))?;
    let mut r = ChaCha8Rng::from_seed(seed);
    let pos: u128 = meta
        .rng_word_pos
        .parse()
        .map_err(|e| Error::Checkpoint(format!("bad rng position: {e}")))?;
    r.set_word_pos(pos);
    Ok(Some((meta.step, r)))
}

mod hex {
    pub fn encode(bytes: impl AsRef<[u8]>) -> String {
        bytes.as_ref().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn decode(s: &str) -> std::result::Result<Vec<u8>, String> {
        if s.len() % 2 != 0 {
            return Err("odd hex length".into());
        }
        (0..s.len() / 2)
            .map(|i| u8::from_str_radix(&s[2 * i..2 * i + 2], 16).map_err(|e| e.to_string()))
            .collect()
    }
}

pub struct TokenizerOutcome {
    pub model: SpeechTokenizer,
    pub trace: Vec<(u64, TokenizerLossReport)>,
}

pub fn run_tokenizer_training(
    corpus: &Corpus,
    cfg: &TokenizerConfig,
    train: &TrainConfig,
    io: StageIo,
) -> Result<TokenizerOutcome> {
    let vocab = CharVocab::build(corpus.items.iter().map(|i| i.entry.text.as_str()));
    let mut model = SpeechTokenizer::new(cfg.clone(), vocab, train.seed);
    let mut opt = Adam::new(train.lr);
    let mut r = rng::substream(train.seed, "tokenizer-train");
    let mut start_step = 0u64;
    if io.resume {
        if let Some(dir) = io.dir {
            if let Some((step, rng_state)) = try_restore(dir, &model.params(), &mut opt)? {
                start_step = step;
                r = rng_state;
                model.mark_codebook_warm();
            }
        }
    }
    let mut trace = Vec::new();
    for step in start_step..train.steps {
        opt.lr = lr_at(train, step);
        let batch = sample_tokenizer_batch(corpus, &model, train.batch_size, &mut r);
        let report = model.train_step(&batch, &mut opt, step, &mut r)?;
        if step % train.log_every == 0 || step + 1 == train.steps {
            append_log(
                io.dir,
                &serde_json::json!({
                    "step": step,
                    "recon": report.recon,
                    "commit": report.commit,
                    "ctc": report.ctc,
                    "total": report.total,
                    "usage": report.codebook_usage,
                }),
            );
        }
        trace.push((step, report));
        if let Some(dir) = io.dir {
            if (step + 1) % train.save_every == 0 || step + 1 == train.steps {
                model.save(dir)?;
                save_snapshot(dir, &model.params(), &opt, step + 1, &r)?;
            }
        }
    }
    Ok(TokenizerOutcome { model, trace })
}

fn sample_tokenizer_batch(
    corpus: &Corpus,
    model: &SpeechTokenizer,
    batch_size: usize,
    r: &mut ChaCha8Rng,
) -> Vec<MelBatchItem> {
    let idxs: Vec<usize> = if corpus.len() <= batch_size {
        (0..corpus.len()).collect()
    } else {
        (0..batch_size).map(|_| r.gen_range(0..corpus.len())).collect()
    };
    idxs.into_iter()
        .map(|i| MelBatchItem {
            mel: corpus.items[i].mel.clone(),
            text_units: model.vocab.encode(&corpus.items[i].entry.text),
        })
        .collect()
}

/// Tokenize every corpus item with a trained tokenizer.
pub fn tokenize_corpus(corpus: &Corpus, tokenizer: &mut SpeechTokenizer) -> Result<Vec<Vec<usize>>> {
    corpus
        .items
        .iter()
        .map(|item| {
            let mel = crate::data::mel::MelSpectrogram {
                frames: item.mel.clone(),
                frame_rate: 100.0,
            };
            Ok(tokenizer.tokenize(&mel)?.tokens)
        })
        .collect()
}

pub struct ArOutcome {
    pub model: ArModel,
    pub speaker: SpeakerEncoder,
    pub trace: Vec<(u64, f64)>,
}

pub fn run_ar_training(
    corpus: &Corpus,
    tokens: &[Vec<usize>],
    ar_cfg: &ArConfig,
    spk_cfg: &SpeakerEncoderConfig,
    train: &TrainConfig,
    io: StageIo,
) -> Result<ArOutcome> {
    let utts = corpus.utterances_with(tokens);
    let model = ArModel::new(ar_cfg.clone(), train.seed);
    let spk = SpeakerEncoder::new(spk_cfg.clone(), train.seed);
    let mut params = model.params().prefixed("ar");
    params.extend(spk.params().prefixed("spk"));
    let mut opt = Adam::new(train.lr);
    let mut r = rng::substream(train.seed, "ar-train");
    let mut start_step = 0u64;
    if io.resume {
        if let Some(dir) = io.dir {
            if let Some((step, rng_state)) = try_restore(dir, &params, &mut opt)? {
                start_step = step;
                r = rng_state;
            }
        }
    }
    let mut trace = Vec::new();
    for step in start_step..train.steps {
        opt.lr = lr_at(train, step);
        let mut batch = Vec::with_capacity(train.batch_size);
        for _ in 0..train.batch_size {
            let tgt = r.gen_range(0..corpus.len());
            let rf = corpus.other_of_same_speaker(tgt, &mut r);
            let mode = if rf != tgt && r.gen_range(0.0..1.0) < train.p_one_shot {
                CloneMode::OneShot
            } else {
                CloneMode::ZeroShot
            };
            let layout = if rf == tgt {
                build_target_layout(&utts[tgt], &model.vocab)
            } else {
                build_training_sequence(&utts[tgt], &utts[rf], mode, &model.vocab)?
            };
            batch.push((layout, corpus.items[rf].mel.clone()));
        }
        let loss = model.train_step_joint(&batch, &spk, &params, &mut opt, step)?;
        if step % train.log_every == 0 || step + 1 == train.steps {
            append_log(io.dir, &serde_json::json!({ "step": step, "loss": loss }));
        }
        trace.push((step, loss));
        if let Some(dir) = io.dir {
            if (step + 1) % train.save_every == 0 || step + 1 == train.steps {
                crate::ar::save_ar_stage(dir, &model, &spk)?;
                save_snapshot(dir, &params, &opt, step + 1, &r)?;
            }
        }
    }
    Ok(ArOutcome {
        model,
        speaker: spk,
        trace,
    })
}

pub struct FlowVaeOutcome {
    pub model: FlowVae,
    pub trace: Vec<(u64, FlowVaeLossReport)>,
}

pub fn run_flowvae_training(
    corpus: &Corpus,
    cfg: &FlowVaeConfig,
    train: &TrainConfig,
    io: StageIo,
) -> Result<FlowVaeOutcome> {
    let model = FlowVae::new(cfg.clone(), train.seed);
    let params = model.params();
    let mut opt = Adam::new(train.lr);
    let mut r = rng::substream(train.seed, "flowvae-train");
    let mut start_step = 0u64;
    if io.resume {
        if let Some(dir) = io.dir {
            if let Some((step, rng_state)) = try_restore(dir, &params, &mut opt)? {
                start_step = step;
                r = rng_state;
            }
        }
    }
    let mut trace = Vec::new();
    for step in start_step..train.steps {
        opt.lr = lr_at(train, step);
        let mut batch = Vec::with_capacity(train.batch_size);
        for _ in 0..train.batch_size {
            let idx = r.gen_range(0..corpus.len());
            let samples = &corpus.items[idx].clip.samples;
            let crop = train.crop_samples.min(samples.len());
            let start = if samples.len() > crop {
                r.gen_range(0..samples.len() - crop)
            } else {
                0
            };
            batch.push(samples.slice(ndarray::s![start..start + crop]).to_owned());
        }
        let report = model.train_step(&batch, &params, &mut opt, step, &mut r)?;
        if step % train.log_every == 0 || step + 1 == train.steps {
            append_log(
                io.dir,
                &serde_json::json!({
                    "step": step,
                    "recon": report.recon,
                    "kl": report.kl,
                    "total": report.total,
                }),
            );
        }
        trace.push((step, report));
        if let Some(dir) = io.dir {
            if (step + 1) % train.save_every == 0 || step + 1 == train.steps {
                model.save(dir)?;
                save_snapshot(dir, &params, &opt, step + 1, &r)?;
            }
        }
    }
    Ok(FlowVaeOutcome { model, trace })
}

pub struct FmOutcome {
    pub model: FmModel,
    pub speaker: SpeakerEncoder,
    pub trace: Vec<(u64, f64)>,
}

/// Train the flow-matching stage against frozen upstream models. Latents
/// (flow-VAE encoder means) and teacher-forced condition streams are
/// precomputed once per utterance.
#[allow(clippy::too_many_arguments)]
pub fn run_fm_training(
    corpus: &Corpus,
    tokens: &[Vec<usize>],
    ar: &ArModel,
    ar_spk: &SpeakerEncoder,
    fvae: &FlowVae,
    cfg: &FmConfig,
    spk_cfg: &SpeakerEncoderConfig,
    train: &TrainConfig,
    io: StageIo,
) -> Result<FmOutcome> {
    ar.params().freeze_all();
    ar_spk.params().freeze_all();
    fvae.params().freeze_all();
    let utts = corpus.utterances_with(tokens);
    let mut cached: Vec<(Array2<f64>, Array2<f64>)> = Vec::with_capacity(corpus.len());
    for (i, utt) in utts.iter().enumerate() {
        let ref_idx = corpus.next_of_same_speaker(i);
        let ref_mel = crate::data::mel::MelSpectrogram {
            frames: corpus.items[ref_idx].mel.clone(),
            frame_rate: 100.0,
        };
        let cond = ar_spk.encode(&ref_mel)?;
        let layout = build_target_layout(utt, &ar.vocab);
        let c = ar.condition_stream(&layout, &cond).frames;
        let z = fvae.fv_encode(&corpus.items[i].clip)?.mu;
        cached.push((z, c));
    }

    let model = FmModel::new(cfg.clone(), train.seed);
    let spk = SpeakerEncoder::new(spk_cfg.clone(), train.seed);
    let mut params = model.params().prefixed("fm");
    params.extend(spk.params().prefixed("spk"));
    let mut opt = Adam::new(train.lr);
    let mut r = rng::substream(train.seed, "fm-train");
    let mut start_step = 0u64;
    if io.resume {
        if let Some(dir) = io.dir {
            if let Some((step, rng_state)) = try_restore(dir, &params, &mut opt)? {
                start_step = step;
                r = rng_state;
            }
        }
    }
    let mut trace = Vec::new();
    for step in start_step..train.steps {
        opt.lr = lr_at(train, step);
        let mut batch = Vec::with_capacity(train.batch_size);
        for _ in 0..train.batch_size {
            let idx = r.gen_range(0..corpus.len());
            let ref_idx = corpus.other_of_same_speaker(idx, &mut r);
            batch.push(FmTrainItem {
                z: cached[idx].0.clone(),
                c: cached[idx].1.clone(),
                ref_mel: corpus.items[ref_idx].mel.clone(),
            });
        }
        let loss = model.train_step(&batch, &spk, &params, &mut opt, cfg.p_prompt, step, &mut r)?;
        if step % train.log_every == 0 || step + 1 == train.steps {
            append_log(io.dir, &serde_json::json!({ "step": step, "loss": loss }));
        }
        trace.push((step, loss));
        if let Some(dir) = io.dir {
            if (step + 1) % train.save_every == 0 || step + 1 == train.steps {
                crate::fm::save_fm_stage(dir, &model, &spk)?;
                save_snapshot(dir, &params, &opt, step + 1, &r)?;
            }
        }
    }
    Ok(FmOutcome {
        model,
        speaker: spk,
        trace,
    })
}

/// Resolve a stage directory under the standard run layout.
pub fn stage_dir(out_root: &Path, stage: &str, name: &str) -> PathBuf {
    out_root.join("runs").join(stage).join(name)
}

/// Write the fully resolved config next to a run's outputs.
pub fn write_resolved_config(dir: &Path, cfg: &crate::config::RunConfig) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("config.json"), serde_json::to_string_pretty(cfg)?)?;
    Ok(())
}
