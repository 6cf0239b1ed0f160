//! Stage Two training: configuration, data, the generator and the loop.

mod config;
mod corpus;
mod model;
mod state;

use spast_tensor::ParamSet;

pub use config::TrainConfig;
pub use corpus::{
    content_image, image_files, load_dir, style_family, style_image, Corpus, DataPipeline, Sample, STYLE_FAMILIES,
};
pub use model::{pretrain_encoder, InferenceModel, PassThrough, Pretrained, SpastNet, Stylizer};
pub use state::TrainerState;

use crate::error::Result;
use crate::feature_codec::{Encoder, EncoderWeights};
use crate::style_prior::{train_prior, StylePrior};

/// Images from the configured directories, or the procedural corpus.
pub fn build_corpus(config: &TrainConfig) -> Result<Corpus> {
    match (&config.content_dir, &config.style_dir) {
        (Some(c), Some(s)) => Ok(Corpus {
            contents: load_dir(c, config.resize)?,
            styles: load_dir(s, config.resize)?,
        }),
        (None, None) => Ok(Corpus::synthetic(
            config.synthetic_contents,
            config.synthetic_styles,
            config.resize,
            config.seed,
        )),
        _ => Err(crate::SpastError::Config(
            "set both train.content_dir and train.style_dir, or neither".into(),
        )),
    }
}

/// Loads `encoder.weights` if set. Otherwise pretrains by reconstruction on
/// the whole corpus (or keeps the random init when no steps are asked for)
/// and also returns the reconstruction decoder.
pub fn build_encoder(config: &TrainConfig, corpus: &Corpus) -> Result<(Encoder, Option<ParamSet>)> {
    if let Some(path) = &config.encoder_weights {
        return Ok((Encoder::new(EncoderWeights::load(path)?)?, None));
    }
    let widths = config.widths()?;
    let run_id = format!("seed{}-div{}-steps{}", config.seed, widths.divisor, config.encoder_pretrain_steps);
    if config.encoder_pretrain_steps == 0 {
        return Ok((Encoder::new(EncoderWeights::init(widths, config.seed, &run_id))?, None));
    }
    let images: Vec<_> = corpus.contents.iter().chain(&corpus.styles).cloned().collect();
    let pre = pretrain_encoder(
        &images,
        widths,
        config.encoder_pretrain_steps,
        config.encoder_pretrain_lr,
        config.seed,
        &run_id,
    )?;
    log::info!(
        "encoder pretrained for {} steps, final reconstruction loss {:.5}",
        pre.losses.len(),
        pre.losses.last().copied().unwrap_or(f64::NAN)
    );
    Ok((Encoder::new(pre.weights)?, Some(pre.decoder)))
}

/// Loads `prior.checkpoint` if set. Otherwise, when the prior term is
/// weighted, trains a fresh prior on the style images.
pub fn build_prior(config: &TrainConfig, encoder: &Encoder, corpus: &Corpus) -> Result<Option<StylePrior>> {
    if let Some(path) = &config.prior_checkpoint {
        return StylePrior::load(path).map(Some);
    }
    if config.loss.style_prior == 0.0 {
        return Ok(None);
    }
    let mut prior = StylePrior::new(config.prior_config(), encoder.clone(), &format!("seed{}", config.seed))?;
    let every = config.log_every.max(1);
    train_prior(&mut prior, &corpus.styles, |log| {
        if log.step % every == 0 {
            log::info!("prior step {} loss {:.5}", log.step, log.loss);
        }
    })?;
    Ok(Some(prior))
}

/// Builds the corpus, encoder, optional prior and fresh trainer state.
pub fn setup(config: &TrainConfig) -> Result<(TrainerState, DataPipeline)> {
    config.validate()?;
    let corpus = build_corpus(config)?;
    let (encoder, decoder) = build_encoder(config, &corpus)?;
    let prior = build_prior(config, &encoder, &corpus)?;
    let mut state = TrainerState::new(config.clone(), encoder, prior)?;
    if config.decoder_warm_start {
        if let Some(dec) = &decoder {
            state.warm_start_decoder(dec)?;
        }
    }
    let data = DataPipeline::new(corpus, config.resize, config.crop)?;
    Ok((state, data))
}
