//! Rough per-stage step timing on the toy corpus (tuning aid).

use chorale::config::*;
use chorale::stage::*;
use chorale::toyset;
use std::time::Instant;

fn main() -> chorale::Result<()> {
    let dir = tempfile::tempdir().unwrap();
    let manifest = toyset::write_toy_corpus(dir.path(), &toyset::TOY_8X2, 16_000)?;
    let mel_cfg = MelConfig::default();
    let corpus = Corpus::load(&manifest, &mel_cfg)?;
    println!(
        "corpus: {} items, durations {:?}",
        corpus.len(),
        corpus
            .items
            .iter()
            .map(|i| format!("{:.2}s", i.clip.duration_secs()))
            .collect::<Vec<_>>()
    );

    let steps: u64 = std::env::args()
        .nth(1)
        .and_then(|a| a.parse().ok())
        .unwrap_or(60);
    let mut cfg = RunConfig::small();
    cfg.tokenizer_train.steps = steps;
    cfg.tokenizer_train.batch_size = 4;
    cfg.tokenizer_train.warmup_steps = 150;
    cfg.tokenizer_train.lr_final = Some(1e-4);
    cfg.flowvae_train.lr = 1e-3;
    cfg.flowvae_train.warmup_steps = 50;
    cfg.flowvae_train.lr_final = Some(1e-4);
    cfg.fm_train.lr_final = Some(2e-4);
    cfg.ar_train.steps = steps;
    cfg.ar_train.batch_size = 8;
    cfg.flowvae_train.steps = steps;
    cfg.flowvae_train.batch_size = 4;
    cfg.fm_train.steps = steps;
    cfg.fm_train.batch_size = 4;

    let t = Instant::now();
    let tok = run_tokenizer_training(&corpus, &cfg.tokenizer, &cfg.tokenizer_train, StageIo::default())?;
    println!(
        "tokenizer: {:.1} ms/step (last recon {:.3}, ctc {:.3}, usage {:.2})",
        t.elapsed().as_millis() as f64 / steps as f64,
        tok.trace.last().unwrap().1.recon,
        tok.trace.last().unwrap().1.ctc,
        tok.trace.last().unwrap().1.codebook_usage,
    );
    for (s, r) in tok.trace.iter().filter(|(s, _)| s % (steps / 6).max(1) == 0 || *s == 10) {
        println!("  tok step {s}: recon {:.3} commit {:.3} ctc {:.3} usage {:.2}", r.recon, r.commit, r.ctc, r.codebook_usage);
    }
    let mut tok_model = tok.model;
    let tokens = tokenize_corpus(&corpus, &mut tok_model)?;
    println!("tokens per utt: {:?}", tokens.iter().map(Vec::len).collect::<Vec<_>>());

    let t = Instant::now();
    let ar = run_ar_training(&corpus, &tokens, &cfg.ar, &cfg.speaker, &cfg.ar_train, StageIo::default())?;
    println!(
        "ar: {:.1} ms/step (loss {:.3} -> {:.3})",
        t.elapsed().as_millis() as f64 / steps as f64,
        ar.trace[0].1,
        ar.trace.last().unwrap().1
    );
    for (s, l) in ar.trace.iter().filter(|(s, _)| s % (steps / 6).max(1) == 0 || *s == 10) {
        println!("  ar step {s}: loss {l:.4}");
    }

    let t = Instant::now();
    let fv = run_flowvae_training(&corpus, &cfg.flowvae, &cfg.flowvae_train, StageIo::default())?;
    println!(
        "flowvae: {:.1} ms/step (recon {:.3} -> {:.3}, kl {:.3})",
        t.elapsed().as_millis() as f64 / steps as f64,
        fv.trace[0].1.recon,
        fv.trace.last().unwrap().1.recon,
        fv.trace.last().unwrap().1.kl
    );
    for (s, r) in fv.trace.iter().filter(|(s, _)| s % (steps / 6).max(1) == 0 || *s == 10) {
        println!("  fv step {s}: recon {:.3} kl {:.3}", r.recon, r.kl);
    }

    let t = Instant::now();
    let fm = run_fm_training(
        &corpus,
        &tokens,
        &ar.model,
        &ar.speaker,
        &fv.model,
        &cfg.fm,
        &cfg.speaker,
        &cfg.fm_train,
        StageIo::default(),
    )?;
    println!(
        "fm: {:.1} ms/step (loss {:.3} -> {:.3})",
        t.elapsed().as_millis() as f64 / steps as f64,
        fm.trace[0].1,
        fm.trace.last().unwrap().1
    );
    for (s, l) in fm.trace.iter().filter(|(s, _)| s % (steps / 6).max(1) == 0 || *s == 10) {
        println!("  fm step {s}: loss {l:.4}");
    }
    Ok(())
}
