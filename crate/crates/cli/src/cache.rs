//! On-disk cache under SPAST_CACHE_DIR for the procedural corpus and the
//! reconstruction-pretrained encoder.

use std::path::{Path, PathBuf};

use spast_core::feature_codec::{Encoder, EncoderWeights};
use spast_core::tensor::ParamSet;
use spast_core::trainer::{build_encoder, load_dir, Corpus, TrainConfig};
use spast_core::{Result, SpastError};

pub fn dir() -> Option<PathBuf> {
    std::env::var_os("SPAST_CACHE_DIR")
        .filter(|v| !v.is_empty())
        .map(PathBuf::from)
}

fn corpus_key(cfg: &TrainConfig) -> String {
    format!(
        "corpus-{}x{}-{}px-seed{}",
        cfg.synthetic_contents, cfg.synthetic_styles, cfg.resize, cfg.seed
    )
}

/// The procedural corpus as 8-bit PNGs. It is always read back from disk,
/// so a fresh cache and a warm one yield identical pixels.
pub fn corpus(dir: &Path, cfg: &TrainConfig) -> Result<Corpus> {
    let root = dir.join(corpus_key(cfg));
    if !root.join("style").is_dir() {
        let tmp = dir.join(format!("{}.partial", corpus_key(cfg)));
        if tmp.exists() {
            std::fs::remove_dir_all(&tmp)?;
        }
        Corpus::synthetic(cfg.synthetic_contents, cfg.synthetic_styles, cfg.resize, cfg.seed).write(&tmp)?;
        std::fs::rename(&tmp, &root)?;
    }
    Ok(Corpus {
        contents: load_dir(&root.join("content"), cfg.resize)?,
        styles: load_dir(&root.join("style"), cfg.resize)?,
    })
}

/// Pretrained encoder and reconstruction decoder, keyed by everything
/// that determines them.
pub fn encoder(dir: &Path, cfg: &TrainConfig, corpus: &Corpus) -> Result<(Encoder, Option<ParamSet>)> {
    let key = format!(
        "encoder-div{}-steps{}-lr{}-{}",
        cfg.encoder_divisor,
        cfg.encoder_pretrain_steps,
        cfg.encoder_pretrain_lr,
        corpus_key(cfg)
    );
    let (wpath, dpath) = (dir.join(format!("{key}.weights")), dir.join(format!("{key}.decoder")));
    if wpath.is_file() && dpath.is_file() {
        let decoder = ParamSet::from_bytes(&std::fs::read(&dpath)?).map_err(|e| SpastError::Malformed(e.to_string()))?;
        return Ok((Encoder::new(EncoderWeights::load(&wpath)?)?, Some(decoder)));
    }
    let (encoder, decoder) = build_encoder(cfg, corpus)?;
    if let Some(d) = &decoder {
        std::fs::create_dir_all(dir)?;
        std::fs::write(&dpath, d.to_bytes())?;
        encoder.weights().save(&wpath)?;
    }
    Ok((encoder, decoder))
}
