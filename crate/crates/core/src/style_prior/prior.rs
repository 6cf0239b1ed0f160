use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use spast_tensor::{Adam, BoundParams, ParamSet, Tensor};

use super::{
    build_schedule, prior_recon_loss, style_prior_loss, NoiseSchedule, PoolCodec, PriorLoss,
    StyleEmbedder, ToyDenoiser,
};
use crate::container::{Container, ContainerKind};
use crate::error::{Result, SpastError};
use crate::feature_codec::{Encoder, EncoderWeights, ImageTensor, Level};
use crate::init;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorConfig {
    /// Number of diffusion steps `T`.
    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub t_fixed: usize,
    /// Draw `t` uniformly from `1..=T` instead of using `t_fixed`.
    pub t_sample: bool,
    pub include_jacobian: bool,
    /// Side of the square image the prior sees.
    pub resolution: usize,
    pub codec_factor: usize,
    pub embed_dim: usize,
    pub width: usize,
    pub iterations: usize,
    pub lr: f64,
    pub freeze_denoiser: bool,
    pub seed: u64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        PriorConfig {
            steps: 1000,
            beta_min: 1e-4,
            beta_max: 0.02,
            t_fixed: 500,
            t_sample: false,
            include_jacobian: false,
            resolution: 64,
            codec_factor: 4,
            embed_dim: 32,
            width: 32,
            iterations: 5000,
            lr: 1e-3,
            freeze_denoiser: false,
            seed: 0,
        }
    }
}

impl PriorConfig {
    pub fn validate(&self) -> Result<()> {
        build_schedule(self.steps, self.beta_min, self.beta_max)?;
        if self.t_fixed == 0 || self.t_fixed > self.steps {
            return Err(SpastError::StepOutOfRange {
                t: self.t_fixed,
                max: self.steps,
            });
        }
        if self.codec_factor == 0 || self.resolution % (2 * self.codec_factor) != 0 || self.resolution % 8 != 0 {
            return Err(SpastError::Config(format!(
                "prior resolution {} must be a multiple of 8 and of twice the codec factor {}",
                self.resolution, self.codec_factor
            )));
        }
        if self.embed_dim == 0 || self.width == 0 {
            return Err(SpastError::Config("prior widths must be positive".into()));
        }
        Ok(())
    }
}

/// Trainable toy prior: denoiser and embedding head plus the frozen encoder
/// whose relu3_1 features feed the head.
#[derive(Clone)]
pub struct StylePrior {
    pub config: PriorConfig,
    pub schedule: NoiseSchedule,
    pub codec: PoolCodec,
    pub denoiser: ToyDenoiser,
    pub embedder: StyleEmbedder,
    pub encoder: Encoder,
    pub params: ParamSet,
    pub run_id: String,
}

impl StylePrior {
    pub fn new(config: PriorConfig, encoder: Encoder, run_id: &str) -> Result<Self> {
        let mut params = ParamSet::new();
        let mut rng = init::rng_for(config.seed, "prior-init");
        let parts = Self::parts(&config, &encoder)?;
        parts.2.init(&mut params, &mut rng);
        parts.3.init(&mut params, &mut rng);
        Ok(StylePrior {
            config,
            schedule: parts.0,
            codec: parts.1,
            denoiser: parts.2,
            embedder: parts.3,
            encoder,
            params,
            run_id: run_id.into(),
        })
    }

    fn parts(config: &PriorConfig, encoder: &Encoder) -> Result<(NoiseSchedule, PoolCodec, ToyDenoiser, StyleEmbedder)> {
        config.validate()?;
        Ok((
            build_schedule(config.steps, config.beta_min, config.beta_max)?,
            PoolCodec {
                factor: config.codec_factor,
            },
            ToyDenoiser {
                latent_channels: 3,
                width: config.width,
                embed_dim: config.embed_dim,
                steps: config.steps,
            },
            StyleEmbedder {
                channels: encoder.widths().channels(Level::Relu3_1),
                dim: config.embed_dim,
            },
        ))
    }

    /// Resizes to the prior's resolution when needed.
    pub fn prepare(&self, image: &Tensor) -> Tensor {
        let r = self.config.resolution;
        if image.dim(1) == r && image.dim(2) == r {
            image.clone()
        } else {
            image.resize_bilinear(r, r)
        }
    }

    /// relu3_1 features of a style image at the prior's resolution.
    pub fn embedding_features(&self, style: &Tensor) -> Result<Tensor> {
        let maps = self.encoder.encode_to(&self.prepare(&style.detach()), Level::Relu3_1)?;
        Ok(maps[Level::Relu3_1.index()].tensor().clone())
    }

    pub fn digest(&self) -> String {
        hex::encode(self.params.digest())
    }

    pub fn freeze(&self) -> FrozenPrior {
        FrozenPrior {
            bound: self.params.bind(false),
            prior: self.clone(),
        }
    }

    pub fn latent_shape(&self) -> [usize; 3] {
        let side = self.config.resolution / self.config.codec_factor;
        [3, side, side]
    }

    pub fn write_sections(&self, c: &mut Container) {
        c.put_str("prior.config", &serde_json::to_string(&self.config).expect("plain config"));
        c.put_str("prior.run_id", &self.run_id);
        c.put("prior.params", self.params.to_bytes());
        self.encoder.weights().write_sections(c);
    }

    pub fn read_sections(c: &Container) -> Result<Self> {
        let config: PriorConfig = serde_json::from_str(c.get_str("prior.config")?)?;
        let encoder = Encoder::new(EncoderWeights::read_sections(c)?)?;
        let params = ParamSet::from_bytes(c.get("prior.params")?).map_err(|e| SpastError::Malformed(e.to_string()))?;
        let (schedule, codec, denoiser, embedder) = Self::parts(&config, &encoder)?;
        let fresh = StylePrior::new(config.clone(), encoder.clone(), "")?;
        for (name, p) in fresh.params.iter() {
            match params.get(name) {
                Some(q) if q.shape == p.shape => {}
                _ => return Err(SpastError::Malformed(format!("prior parameter `{name}` missing or misshapen"))),
            }
        }
        Ok(StylePrior {
            config,
            schedule,
            codec,
            denoiser,
            embedder,
            encoder,
            params,
            run_id: c.get_str("prior.run_id")?.to_string(),
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut c = Container::new(ContainerKind::PriorCheckpoint);
        self.write_sections(&mut c);
        c.to_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::read_sections(&Container::from_bytes(bytes, ContainerKind::PriorCheckpoint)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut c = Container::new(ContainerKind::PriorCheckpoint);
        self.write_sections(&mut c);
        c.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Prior with parameters bound as constants, shareable across threads.
#[derive(Clone)]
pub struct FrozenPrior {
    prior: StylePrior,
    bound: BoundParams,
}

impl FrozenPrior {
    pub fn prior(&self) -> &StylePrior {
        &self.prior
    }

    pub fn params(&self) -> &BoundParams {
        &self.bound
    }

    pub fn digest(&self) -> String {
        self.prior.digest()
    }

    /// `Attn(I_s)` with the frozen head.
    pub fn embed(&self, style: &Tensor) -> Result<Tensor> {
        let feats = self.prior.embedding_features(style)?;
        Ok(self.prior.embedder.embed(&self.bound, &feats))
    }

    /// The configured timestep, or a uniform draw when sampling is enabled.
    pub fn timestep(&self, rng: &mut impl Rng) -> usize {
        if self.prior.config.t_sample {
            rng.random_range(1..=self.prior.config.steps)
        } else {
            self.prior.config.t_fixed
        }
    }

    /// Prior loss for a stylized image at any resolution; `eps` has the
    /// latent shape.
    pub fn loss(&self, i_cs: &Tensor, embedding: &Tensor, t: usize, eps: &Tensor) -> Result<PriorLoss> {
        style_prior_loss(
            &self.prior.denoiser,
            &self.bound,
            &self.prior.codec,
            &self.prior.schedule,
            &self.prior.prepare(i_cs),
            embedding,
            t,
            eps,
            self.prior.config.include_jacobian,
        )
    }
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct PriorTrainLog {
    pub step: usize,
    pub loss: f64,
}

/// Trains the denoiser and embedding head on `styles` by noise
/// reconstruction. Returns the loss of every iteration.
pub fn train_prior(prior: &mut StylePrior, styles: &[ImageTensor], mut log: impl FnMut(PriorTrainLog)) -> Result<Vec<f64>> {
    if styles.is_empty() {
        return Err(SpastError::Config("the prior needs at least one style image".into()));
    }
    let cfg = prior.config.clone();
    let mut rng = init::rng_for(cfg.seed, "prior-train");
    let mut adam = Adam::new(cfg.lr);
    let feats = styles
        .iter()
        .map(|s| prior.embedding_features(s.tensor()))
        .collect::<Result<Vec<_>>>()?;
    let images: Vec<Tensor> = styles.iter().map(|s| prior.prepare(s.tensor())).collect();
    let latent = prior.latent_shape();
    let n_latent = latent.iter().product();
    let mut losses = Vec::with_capacity(cfg.iterations);
    for step in 0..cfg.iterations {
        let i = rng.random_range(0..styles.len());
        let t = rng.random_range(1..=cfg.steps);
        let eps = Tensor::from_vec(init::normal_vec(&mut rng, n_latent, 1.0), &latent);
        let p = prior.params.bind(true);
        let emb = prior.embedder.embed(&p, &feats[i]);
        let loss = prior_recon_loss(&prior.denoiser, &p, &prior.codec, &prior.schedule, &images[i], &emb, t, &eps)?;
        let value = loss.item();
        if !value.is_finite() {
            return Err(SpastError::NonFiniteLoss {
                term: "prior_recon".into(),
                step: step as u64,
                value,
            });
        }
        let mut grads = p.collect_grads(&loss.backward());
        if cfg.freeze_denoiser {
            grads.retain(|k, _| k.starts_with("embed."));
        }
        adam.step(&mut prior.params, &grads);
        losses.push(value);
        log(PriorTrainLog { step, loss: value });
    }
    Ok(losses)
}
