use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use spast_tensor::{clip_global_norm, Adam, AdamState, ParamSet, Tensor};

use super::config::TrainConfig;
use super::corpus::{DataPipeline, Sample};
use super::model::{InferenceModel, SpastNet, Stylizer};
use crate::container::{Container, ContainerKind};
use crate::error::{Result, SpastError};
use crate::feature_codec::{Encoder, EncoderWeights, FeaturePyramid, ImageTensor};
use crate::init;
use crate::losses::{content_loss, identity_from_parts, style_loss, total_loss, Discriminator, IdentityParts, LossReport};
use crate::style_prior::{FrozenPrior, StylePrior};

/// Encodings that do not change while the encoder is frozen, keyed by
/// corpus index. Only whole-image samples are cached.
#[derive(Default, Clone)]
struct FeatureCache {
    contents: HashMap<usize, FeaturePyramid>,
    styles: HashMap<usize, FeaturePyramid>,
    embeddings: HashMap<usize, Tensor>,
}

/// All mutable Stage Two state: generator, discriminator, both optimizers,
/// the step counter and the RNG that drives sampling and noise.
pub struct TrainerState {
    pub config: TrainConfig,
    pub encoder: Encoder,
    pub net: SpastNet,
    pub generator: ParamSet,
    pub disc: Discriminator,
    pub disc_params: ParamSet,
    pub g_opt: Adam,
    pub d_opt: Adam,
    pub step: u64,
    prior: Option<StylePrior>,
    frozen: Option<FrozenPrior>,
    rng: ChaCha8Rng,
    cache: FeatureCache,
}

impl TrainerState {
    /// Fresh state. The prior, when given, must have been trained on top of
    /// the same encoder.
    pub fn new(config: TrainConfig, encoder: Encoder, prior: Option<StylePrior>) -> Result<Self> {
        config.validate()?;
        let widths = config.widths()?;
        if encoder.widths() != widths {
            return Err(SpastError::Config(format!(
                "encoder width divisor {} differs from encoder.width_divisor {}",
                encoder.widths().divisor,
                widths.divisor
            )));
        }
        if let Some(p) = &prior {
            if p.encoder.weights().digest() != encoder.weights().digest() {
                return Err(SpastError::Config("the prior was trained with a different encoder".into()));
            }
        }
        let net = SpastNet::new(widths, config.levels.clone(), config.b, config.branches)?;
        let generator = net.init(&mut init::rng_for(config.seed, "generator"));
        let disc = Discriminator::new(config.disc_divisor)?;
        let mut disc_params = ParamSet::new();
        disc.init(&mut disc_params, &mut init::rng_for(config.seed, "discriminator"));
        let rng = init::rng_for(config.seed, "trainer");
        Ok(TrainerState {
            g_opt: Adam::new(config.lr),
            d_opt: Adam::new(config.lr),
            frozen: prior.as_ref().map(StylePrior::freeze),
            prior,
            config,
            encoder,
            net,
            generator,
            disc,
            disc_params,
            step: 0,
            rng,
            cache: FeatureCache::default(),
        })
    }

    /// Copies `decoder.*` weights from a reconstruction-pretrained decoder.
    pub fn warm_start_decoder(&mut self, decoder: &ParamSet) -> Result<()> {
        let names: Vec<String> = self.generator.names().filter(|n| n.starts_with("decoder.")).cloned().collect();
        for name in names {
            let src = decoder
                .get(&name)
                .ok_or_else(|| SpastError::Config(format!("warm start decoder lacks `{name}`")))?
                .clone();
            let dst = self.generator.get_mut(&name).expect("listed above");
            if dst.shape != src.shape {
                return Err(SpastError::Config(format!("warm start shape mismatch for `{name}`")));
            }
            *dst = src;
        }
        Ok(())
    }

    pub fn prior(&self) -> Option<&FrozenPrior> {
        self.frozen.as_ref()
    }

    pub fn prior_digest(&self) -> Option<String> {
        self.prior.as_ref().map(StylePrior::digest)
    }

    pub fn inference_model(&self) -> InferenceModel {
        InferenceModel::new(self.encoder.clone(), self.net.clone(), &self.generator)
    }

    /// Encode, stylize at the configured levels, decode and clamp.
    pub fn stylize(&self, content: &ImageTensor, style: &ImageTensor) -> Result<ImageTensor> {
        self.inference_model().stylize(content, style)
    }

    /// Draws `batch` pairs from `data` and trains on them.
    pub fn train_step(&mut self, data: &DataPipeline) -> Result<LossReport> {
        let samples = (0..self.config.batch)
            .map(|_| data.sample(&mut self.rng))
            .collect::<Result<Vec<_>>>()?;
        self.step_samples(&samples)
    }

    /// One update on a single given pair.
    pub fn stage_two_step(&mut self, content: &ImageTensor, style: &ImageTensor) -> Result<LossReport> {
        let sample = Sample {
            content_index: usize::MAX,
            style_index: usize::MAX,
            content: content.clone(),
            style: style.clone(),
            whole: false,
        };
        self.step_samples(&[sample])
    }

    fn pyramids(&mut self, s: &Sample) -> Result<(FeaturePyramid, FeaturePyramid)> {
        let encoder = &self.encoder;
        let get = |map: &mut HashMap<usize, FeaturePyramid>, idx: usize, img: &ImageTensor| -> Result<FeaturePyramid> {
            if !s.whole {
                return encoder.encode_pyramid(img);
            }
            if let Some(p) = map.get(&idx) {
                return Ok(p.clone());
            }
            let p = encoder.encode_pyramid(img)?;
            map.insert(idx, p.clone());
            Ok(p)
        };
        let fc = get(&mut self.cache.contents, s.content_index, &s.content)?;
        let fs = get(&mut self.cache.styles, s.style_index, &s.style)?;
        Ok((fc, fs))
    }

    fn embedding(&mut self, prior: &FrozenPrior, s: &Sample) -> Result<Tensor> {
        if s.whole {
            if let Some(e) = self.cache.embeddings.get(&s.style_index) {
                return Ok(e.clone());
            }
        }
        let e = prior.embed(s.style.tensor())?;
        if s.whole {
            self.cache.embeddings.insert(s.style_index, e.clone());
        }
        Ok(e)
    }

    fn non_finite(&self, term: &str, value: f64, s: &Sample) -> SpastError {
        log::error!(
            "non-finite {term} loss {value} at step {} (content #{}, style #{})",
            self.step,
            s.content_index,
            s.style_index
        );
        SpastError::NonFiniteLoss {
            term: term.into(),
            step: self.step,
            value,
        }
    }

    fn step_samples(&mut self, samples: &[Sample]) -> Result<LossReport> {
        let w = self.config.loss;
        let n = samples.len() as f64;
        let pg = self.generator.bind(true);
        let mut items = Vec::with_capacity(samples.len());
        for s in samples {
            let (fc, fs) = self.pyramids(s)?;
            let ics = self.net.forward(&pg, &fc, &fs)?;
            items.push((fc, fs, ics));
        }

        let use_adv = w.adversarial > 0.0;
        if use_adv {
            let pd = self.disc_params.bind(true);
            let mut acc: BTreeMap<String, Vec<f64>> = BTreeMap::new();
            for (s, (_, _, ics)) in samples.iter().zip(&items) {
                let d_loss = self.disc.d_loss(&pd, s.style.tensor(), ics);
                if !d_loss.item().is_finite() {
                    return Err(self.non_finite("adversarial_discriminator", d_loss.item(), s));
                }
                accumulate(&mut acc, pd.collect_grads(&d_loss.backward()), 1.0 / n);
            }
            clip_global_norm(&mut acc, self.config.clip_norm);
            self.d_opt.step(&mut self.disc_params, &acc);
        }

        let pd = self.disc_params.bind(false);
        let mut report = LossReport {
            step: self.step,
            ..LossReport::default()
        };
        let mut acc: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        let frozen = if w.style_prior > 0.0 { self.frozen.clone() } else { None };
        for (s, (fc, fs, ics)) in samples.iter().zip(&items) {
            let e_cs = self.encoder.encode(ics)?;
            let content = content_loss(&e_cs, fc)?;
            let style = style_loss(&e_cs, fs)?;
            let mut graph = content.scale(w.content).add(&style.scale(w.style));
            let mut terms = LossReport {
                step: self.step,
                content: content.item(),
                style: style.item(),
                ..LossReport::default()
            };
            if w.identity > 0.0 {
                let icc = self.net.forward(&pg, fc, fc)?;
                let iss = self.net.forward(&pg, fs, fs)?;
                let id = identity_from_parts(
                    &IdentityParts {
                        icc: &icc,
                        ic: s.content.tensor(),
                        iss: &iss,
                        is: s.style.tensor(),
                        e_icc: &self.encoder.encode(&icc)?,
                        e_ic: fc,
                        e_iss: &self.encoder.encode(&iss)?,
                        e_is: fs,
                    },
                    &w,
                )?;
                terms.identity = id.item();
                graph = graph.add(&id.scale(w.identity));
            }
            if use_adv {
                let g = self.disc.g_loss(&pd, ics);
                terms.adversarial = g.item();
                graph = graph.add(&g.scale(w.adversarial));
            }
            if let Some(prior) = &frozen {
                let emb = self.embedding(prior, s)?;
                let t = prior.timestep(&mut self.rng);
                let shape = prior.prior().latent_shape();
                let eps = Tensor::from_vec(init::normal_vec(&mut self.rng, shape.iter().product(), 1.0), &shape);
                let pl = prior.loss(ics, &emb, t, &eps)?;
                terms.style_prior = pl.proxy;
                graph = graph.add(&pl.surrogate.scale(w.style_prior));
            }
            if let Err(SpastError::NonFiniteLoss { term, value, .. }) = total_loss(&mut terms, &w) {
                return Err(self.non_finite(&term, value, s));
            }
            report.content += terms.content / n;
            report.style += terms.style / n;
            report.identity += terms.identity / n;
            report.adversarial += terms.adversarial / n;
            report.style_prior += terms.style_prior / n;
            accumulate(&mut acc, pg.collect_grads(&graph.backward()), 1.0 / n);
        }
        total_loss(&mut report, &w)?;
        clip_global_norm(&mut acc, self.config.clip_norm);
        self.g_opt.step(&mut self.generator, &acc);
        self.step += 1;
        Ok(report)
    }

    /// Runs until `config.iterations` steps have been taken, calling
    /// `on_report` after each one.
    pub fn train(&mut self, data: &DataPipeline, mut on_report: impl FnMut(&LossReport)) -> Result<()> {
        while (self.step as usize) < self.config.iterations {
            let r = self.train_step(data)?;
            on_report(&r);
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.container().to_bytes()
    }

    fn container(&self) -> Container {
        let mut c = Container::new(ContainerKind::TrainingCheckpoint);
        c.put_str("trainer.config", &self.config.to_text());
        c.put_u64("trainer.step", self.step);
        c.put("trainer.rng", rng_bytes(&self.rng));
        c.put("generator.params", self.generator.to_bytes());
        c.put("disc.params", self.disc_params.to_bytes());
        put_adam(&mut c, "g_opt", &self.g_opt.state);
        put_adam(&mut c, "d_opt", &self.d_opt.state);
        self.encoder.weights().write_sections(&mut c);
        if let Some(p) = &self.prior {
            p.write_sections(&mut c);
        }
        c
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        self.container().save(path)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let c = Container::from_bytes(bytes, ContainerKind::TrainingCheckpoint)?;
        let config = TrainConfig::parse(c.get_str("trainer.config")?)?;
        let encoder = Encoder::new(EncoderWeights::read_sections(&c)?)?;
        let prior = if c.has("prior.params") {
            Some(StylePrior::read_sections(&c)?)
        } else {
            None
        };
        let mut state = TrainerState::new(config, encoder, prior)?;
        let malformed = |e: spast_tensor::params::DecodeError| SpastError::Malformed(e.to_string());
        let generator = ParamSet::from_bytes(c.get("generator.params")?).map_err(malformed)?;
        let disc_params = ParamSet::from_bytes(c.get("disc.params")?).map_err(malformed)?;
        same_layout("generator", &state.generator, &generator)?;
        same_layout("discriminator", &state.disc_params, &disc_params)?;
        state.generator = generator;
        state.disc_params = disc_params;
        state.g_opt.state = get_adam(&c, "g_opt")?;
        state.d_opt.state = get_adam(&c, "d_opt")?;
        state.step = c.get_u64("trainer.step")?;
        state.rng = rng_from_bytes(c.get("trainer.rng")?)?;
        Ok(state)
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Hex SHA-256 of the generator parameters.
    pub fn generator_digest(&self) -> String {
        hex::encode(self.generator.digest())
    }
}

fn accumulate(acc: &mut BTreeMap<String, Vec<f64>>, grads: BTreeMap<String, Vec<f64>>, scale: f64) {
    for (k, g) in grads {
        let slot = acc.entry(k).or_insert_with(|| vec![0.0; g.len()]);
        for (a, v) in slot.iter_mut().zip(g) {
            *a += scale * v;
        }
    }
}

fn same_layout(what: &str, expected: &ParamSet, found: &ParamSet) -> Result<()> {
    let shapes = |s: &ParamSet| s.iter().map(|(k, p)| (k.clone(), p.shape.clone())).collect::<Vec<_>>();
    if shapes(expected) != shapes(found) {
        return Err(SpastError::Malformed(format!("{what} parameters do not match the stored configuration")));
    }
    Ok(())
}

fn put_adam(c: &mut Container, name: &str, s: &AdamState) {
    c.put_u64(&format!("{name}.step"), s.step);
    c.put(&format!("{name}.first"), s.first.to_bytes());
    c.put(&format!("{name}.second"), s.second.to_bytes());
}

fn get_adam(c: &Container, name: &str) -> Result<AdamState> {
    let decode = |section: &str| {
        ParamSet::from_bytes(c.get(&format!("{name}.{section}"))?).map_err(|e| SpastError::Malformed(e.to_string()))
    };
    Ok(AdamState {
        step: c.get_u64(&format!("{name}.step"))?,
        first: decode("first")?,
        second: decode("second")?,
    })
}

/// Seed (32 bytes), stream (8) and word position (16).
fn rng_bytes(rng: &ChaCha8Rng) -> Vec<u8> {
    let mut out = rng.get_seed().to_vec();
    out.extend_from_slice(&rng.get_stream().to_le_bytes());
    out.extend_from_slice(&rng.get_word_pos().to_le_bytes());
    out
}

fn rng_from_bytes(b: &[u8]) -> Result<ChaCha8Rng> {
    if b.len() != 56 {
        return Err(SpastError::Malformed(format!("rng state is {} bytes, expected 56", b.len())));
    }
    let mut rng = ChaCha8Rng::from_seed(b[..32].try_into().unwrap());
    rng.set_stream(u64::from_le_bytes(b[32..40].try_into().unwrap()));
    rng.set_word_pos(u128::from_le_bytes(b[40..56].try_into().unwrap()));
    Ok(rng)
}

impl Stylizer for TrainerState {
    fn stylize(&self, content: &ImageTensor, style: &ImageTensor) -> Result<ImageTensor> {
        TrainerState::stylize(self, content, style)
    }
}
