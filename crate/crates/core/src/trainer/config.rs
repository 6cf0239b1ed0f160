use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use crate::error::{Result, SpastError};
use crate::feature_codec::{Level, Widths};
use crate::lgwssm::Branches;
use crate::losses::LossWeights;
use crate::style_prior::PriorConfig;

/// Everything a training run depends on. Serialised as flat `key = value`
/// lines with `train.`, `lgwssm.`, `loss.`, `prior.`, `encoder.` and
/// `disc.` namespaces.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    pub lr: f64,
    pub batch: usize,
    pub resize: usize,
    pub crop: usize,
    pub seed: u64,
    pub clip_norm: f64,
    pub content_dir: Option<PathBuf>,
    pub style_dir: Option<PathBuf>,
    /// Corpus sizes used when no directories are given.
    pub synthetic_contents: usize,
    pub synthetic_styles: usize,
    pub log_every: usize,
    pub b: usize,
    pub levels: Vec<Level>,
    pub branches: Branches,
    pub loss: LossWeights,
    pub prior: PriorConfig,
    pub prior_checkpoint: Option<PathBuf>,
    pub encoder_weights: Option<PathBuf>,
    pub encoder_divisor: usize,
    pub encoder_pretrain_steps: usize,
    pub encoder_pretrain_lr: f64,
    pub decoder_warm_start: bool,
    pub disc_divisor: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 160_000,
            lr: 1e-4,
            batch: 1,
            resize: 512,
            crop: 256,
            seed: 0,
            clip_norm: 10.0,
            content_dir: None,
            style_dir: None,
            synthetic_contents: 50,
            synthetic_styles: 10,
            log_every: 100,
            b: 4,
            levels: vec![Level::Relu4_1, Level::Relu5_1],
            branches: Branches::default(),
            loss: LossWeights::default(),
            prior: PriorConfig::default(),
            prior_checkpoint: None,
            encoder_weights: None,
            encoder_divisor: 1,
            encoder_pretrain_steps: 0,
            encoder_pretrain_lr: 1e-3,
            decoder_warm_start: false,
            disc_divisor: 1,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| SpastError::Config(format!("cannot parse `{value}` for `{key}`")))
}

fn path(value: &str) -> Option<PathBuf> {
    if value.is_empty() {
        None
    } else {
        Some(PathBuf::from(value))
    }
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl TrainConfig {
    /// Small synthetic setup that trains in minutes on one CPU core.
    pub fn desk() -> Self {
        TrainConfig {
            iterations: 2000,
            resize: 64,
            crop: 64,
            b: 2,
            encoder_divisor: 4,
            encoder_pretrain_steps: 3000,
            encoder_pretrain_lr: 3e-4,
            decoder_warm_start: true,
            disc_divisor: 4,
            ..TrainConfig::default()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "full" | "default" => Ok(TrainConfig::default()),
            "desk" => Ok(TrainConfig::desk()),
            other => Err(SpastError::Config(format!("unknown preset `{other}`"))),
        }
    }

    /// Parses `key = value` lines; `#` starts a comment. A leading
    /// `preset = desk` selects the base before the remaining keys apply.
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| SpastError::Config(format!("line {}: expected key = value", lineno + 1)))?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        let mut cfg = match pairs.iter().find(|(k, _)| k == "preset") {
            Some((_, v)) => TrainConfig::preset(v)?,
            None => TrainConfig::default(),
        };
        for (k, v) in pairs.iter().filter(|(k, _)| k != "preset") {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "train.iterations" => self.iterations = parse(key, v)?,
            "train.lr" => self.lr = parse(key, v)?,
            "train.batch" => self.batch = parse(key, v)?,
            "train.resize" => self.resize = parse(key, v)?,
            "train.crop" => self.crop = parse(key, v)?,
            "train.seed" => self.seed = parse(key, v)?,
            "train.clip_norm" => self.clip_norm = parse(key, v)?,
            "train.content_dir" => self.content_dir = path(v),
            "train.style_dir" => self.style_dir = path(v),
            "train.synthetic_contents" => self.synthetic_contents = parse(key, v)?,
            "train.synthetic_styles" => self.synthetic_styles = parse(key, v)?,
            "train.log_every" => self.log_every = parse(key, v)?,
            "lgwssm.b" => self.b = parse(key, v)?,
            "lgwssm.levels" => {
                self.levels = v.split(',').map(Level::from_str).collect::<Result<_>>()?;
            }
            "lgwssm.local" => self.branches.local = parse(key, v)?,
            "lgwssm.global" => self.branches.global = parse(key, v)?,
            "loss.style" => self.loss.style = parse(key, v)?,
            "loss.content" => self.loss.content = parse(key, v)?,
            "loss.identity" => self.loss.identity = parse(key, v)?,
            "loss.adversarial" => self.loss.adversarial = parse(key, v)?,
            "loss.style_prior" => self.loss.style_prior = parse(key, v)?,
            "loss.identity_pixel" => self.loss.identity_pixel = parse(key, v)?,
            "loss.identity_feature" => self.loss.identity_feature = parse(key, v)?,
            "prior.T" => self.prior.steps = parse(key, v)?,
            "prior.beta_min" => self.prior.beta_min = parse(key, v)?,
            "prior.beta_max" => self.prior.beta_max = parse(key, v)?,
            "prior.t_fixed" => self.prior.t_fixed = parse(key, v)?,
            "prior.t_sample" => self.prior.t_sample = parse(key, v)?,
            "prior.include_jacobian" => self.prior.include_jacobian = parse(key, v)?,
            "prior.resolution" => self.prior.resolution = parse(key, v)?,
            "prior.codec_factor" => self.prior.codec_factor = parse(key, v)?,
            "prior.embed_dim" => self.prior.embed_dim = parse(key, v)?,
            "prior.width" => self.prior.width = parse(key, v)?,
            "prior.iterations" => self.prior.iterations = parse(key, v)?,
            "prior.lr" => self.prior.lr = parse(key, v)?,
            "prior.freeze_denoiser" => self.prior.freeze_denoiser = parse(key, v)?,
            "prior.checkpoint" => self.prior_checkpoint = path(v),
            "encoder.weights" => self.encoder_weights = path(v),
            "encoder.width_divisor" => self.encoder_divisor = parse(key, v)?,
            "encoder.pretrain_steps" => self.encoder_pretrain_steps = parse(key, v)?,
            "encoder.pretrain_lr" => self.encoder_pretrain_lr = parse(key, v)?,
            "encoder.decoder_warm_start" => self.decoder_warm_start = parse(key, v)?,
            "disc.width_divisor" => self.disc_divisor = parse(key, v)?,
            other => return Err(SpastError::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Every key with its current value, sorted by key.
    pub fn pairs(&self) -> Vec<(&'static str, String)> {
        let levels = self.levels.iter().map(|l| l.name()).collect::<Vec<_>>().join(",");
        let mut out = vec![
            ("disc.width_divisor", self.disc_divisor.to_string()),
            ("encoder.decoder_warm_start", self.decoder_warm_start.to_string()),
            ("encoder.pretrain_lr", self.encoder_pretrain_lr.to_string()),
            ("encoder.pretrain_steps", self.encoder_pretrain_steps.to_string()),
            ("encoder.weights", show_path(&self.encoder_weights)),
            ("encoder.width_divisor", self.encoder_divisor.to_string()),
            ("lgwssm.b", self.b.to_string()),
            ("lgwssm.global", self.branches.global.to_string()),
            ("lgwssm.levels", levels),
            ("lgwssm.local", self.branches.local.to_string()),
            ("loss.adversarial", self.loss.adversarial.to_string()),
            ("loss.content", self.loss.content.to_string()),
            ("loss.identity", self.loss.identity.to_string()),
            ("loss.identity_feature", self.loss.identity_feature.to_string()),
            ("loss.identity_pixel", self.loss.identity_pixel.to_string()),
            ("loss.style", self.loss.style.to_string()),
            ("loss.style_prior", self.loss.style_prior.to_string()),
            ("prior.T", self.prior.steps.to_string()),
            ("prior.beta_max", self.prior.beta_max.to_string()),
            ("prior.beta_min", self.prior.beta_min.to_string()),
            ("prior.checkpoint", show_path(&self.prior_checkpoint)),
            ("prior.codec_factor", self.prior.codec_factor.to_string()),
            ("prior.embed_dim", self.prior.embed_dim.to_string()),
            ("prior.freeze_denoiser", self.prior.freeze_denoiser.to_string()),
            ("prior.include_jacobian", self.prior.include_jacobian.to_string()),
            ("prior.iterations", self.prior.iterations.to_string()),
            ("prior.lr", self.prior.lr.to_string()),
            ("prior.resolution", self.prior.resolution.to_string()),
            ("prior.t_fixed", self.prior.t_fixed.to_string()),
            ("prior.t_sample", self.prior.t_sample.to_string()),
            ("prior.width", self.prior.width.to_string()),
            ("train.batch", self.batch.to_string()),
            ("train.clip_norm", self.clip_norm.to_string()),
            ("train.content_dir", show_path(&self.content_dir)),
            ("train.crop", self.crop.to_string()),
            ("train.iterations", self.iterations.to_string()),
            ("train.log_every", self.log_every.to_string()),
            ("train.lr", self.lr.to_string()),
            ("train.resize", self.resize.to_string()),
            ("train.seed", self.seed.to_string()),
            ("train.style_dir", show_path(&self.style_dir)),
            ("train.synthetic_contents", self.synthetic_contents.to_string()),
            ("train.synthetic_styles", self.synthetic_styles.to_string()),
        ];
        out.sort_by_key(|(k, _)| *k);
        out
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.pairs() {
            writeln!(s, "{k} = {v}").unwrap();
        }
        s
    }

    /// Prior settings with the run seed filled in.
    pub fn prior_config(&self) -> PriorConfig {
        PriorConfig {
            seed: self.seed,
            ..self.prior.clone()
        }
    }

    pub fn widths(&self) -> Result<Widths> {
        Widths::new(self.encoder_divisor)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SpastError::Config(m));
        if self.batch == 0 {
            return bad("train.batch must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("train.lr must be positive, got {}", self.lr));
        }
        if !(self.clip_norm > 0.0) {
            return bad("train.clip_norm must be positive".into());
        }
        if self.crop > self.resize || self.crop % 16 != 0 || self.crop < 32 {
            return bad(format!(
                "train.crop ({}) must be a multiple of 16, at least 32, and no larger than train.resize ({})",
                self.crop, self.resize
            ));
        }
        if self.b == 0 {
            return bad("lgwssm.b must be positive".into());
        }
        if !self.levels.contains(&Level::Relu4_1)
            || self.levels.iter().any(|l| !matches!(l, Level::Relu4_1 | Level::Relu5_1))
        {
            return bad("lgwssm.levels must include relu4_1 and may add relu5_1".into());
        }
        if !self.branches.local && !self.branches.global {
            return bad("at least one of lgwssm.local and lgwssm.global must be on".into());
        }
        self.loss.validate()?;
        self.prior.validate()?;
        self.widths()?;
        if self.disc_divisor == 0 || 64 % self.disc_divisor != 0 {
            return bad("disc.width_divisor must divide 64".into());
        }
        Ok(())
    }
}
