use rand::Rng;
use spast_tensor::{Adam, BoundParams, ParamSet, Tensor};

use crate::error::{Result, SpastError};
use crate::feature_codec::{Decoder, Encoder, EncoderWeights, FeatureMap, FeaturePyramid, ImageTensor, Level, Widths};
use crate::init;
use crate::lgwssm::{lgwssm_forward, Branches, StylizationParams};

/// The generator: stylization at the configured levels, fused at relu4_1
/// resolution, then decoded.
#[derive(Clone, Debug)]
pub struct SpastNet {
    pub widths: Widths,
    pub levels: Vec<Level>,
    pub b: usize,
    pub branches: Branches,
    decoder: Decoder,
}

impl SpastNet {
    pub fn new(widths: Widths, levels: Vec<Level>, b: usize, branches: Branches) -> Result<Self> {
        if !levels.contains(&Level::Relu4_1) || levels.iter().any(|l| !matches!(l, Level::Relu4_1 | Level::Relu5_1)) {
            return Err(SpastError::Config(format!("unsupported stylization levels {levels:?}")));
        }
        Ok(SpastNet {
            widths,
            levels,
            b,
            branches,
            decoder: Decoder::new(widths),
        })
    }

    pub fn decoder(&self) -> &Decoder {
        &self.decoder
    }

    fn prefix(level: Level) -> String {
        format!("lgwssm.{level}")
    }

    /// Decoder and per-level stylization parameters.
    pub fn init(&self, rng: &mut impl Rng) -> ParamSet {
        let mut set = ParamSet::new();
        self.decoder.init(&mut set, rng);
        for &level in &self.levels {
            StylizationParams::init(&mut set, rng, &Self::prefix(level), self.widths.channels(level));
        }
        set
    }

    /// Stylized relu4_1 feature.
    pub fn fuse(&self, p: &BoundParams, fc: &FeaturePyramid, fs: &FeaturePyramid) -> Result<FeatureMap> {
        let mut out: Option<Tensor> = None;
        let target = fc.get(Level::Relu4_1);
        for &level in &self.levels {
            let params = StylizationParams::bind(p, &Self::prefix(level));
            let f = lgwssm_forward(fc.get(level), fs.get(level), &params, self.b, self.branches)?.into_tensor();
            let f = if level == Level::Relu4_1 {
                f
            } else {
                f.resize_nearest(target.height(), target.width())
            };
            out = Some(match out {
                Some(acc) => acc.add(&f),
                None => f,
            });
        }
        FeatureMap::new(out.expect("relu4_1 is always present"), Level::Relu4_1)
    }

    /// Unclamped decoder output.
    pub fn forward(&self, p: &BoundParams, fc: &FeaturePyramid, fs: &FeaturePyramid) -> Result<Tensor> {
        Ok(self.decoder.forward(p, self.fuse(p, fc, fs)?.tensor()))
    }
}

/// Something that turns a content/style pair into a stylized image.
pub trait Stylizer: Send + Sync {
    fn stylize(&self, content: &ImageTensor, style: &ImageTensor) -> Result<ImageTensor>;
}

/// Frozen generator for inference.
#[derive(Clone)]
pub struct InferenceModel {
    pub encoder: Encoder,
    pub net: SpastNet,
    params: BoundParams,
}

impl InferenceModel {
    pub fn new(encoder: Encoder, net: SpastNet, params: &ParamSet) -> Self {
        InferenceModel {
            encoder,
            net,
            params: params.bind(false),
        }
    }
}

impl Stylizer for InferenceModel {
    fn stylize(&self, content: &ImageTensor, style: &ImageTensor) -> Result<ImageTensor> {
        let fc = self.encoder.encode_pyramid(content)?;
        let fs = self.encoder.encode_pyramid(style)?;
        let fused = self.net.fuse(&self.params, &fc, &fs)?;
        let out = self.net.decoder().decode(&self.params, &fused)?;
        if out.height() != content.height() || out.width() != content.width() {
            return Err(SpastError::Shape(format!(
                "stylized {}×{} differs from content {}×{}",
                out.height(),
                out.width(),
                content.height(),
                content.width()
            )));
        }
        Ok(out)
    }
}

/// Returns the content image unchanged.
pub struct PassThrough;

impl Stylizer for PassThrough {
    fn stylize(&self, content: &ImageTensor, _style: &ImageTensor) -> Result<ImageTensor> {
        Ok(content.clone())
    }
}

/// Encoder trained by reconstruction through a throwaway relu4_1 decoder.
pub struct Pretrained {
    pub weights: EncoderWeights,
    pub decoder: ParamSet,
    pub losses: Vec<f64>,
}

/// Trains encoder and decoder jointly to reproduce `images` from their
/// relu4_1 features, minimising the mean squared pixel error.
pub fn pretrain_encoder(
    images: &[ImageTensor],
    widths: Widths,
    steps: usize,
    lr: f64,
    seed: u64,
    run_id: &str,
) -> Result<Pretrained> {
    if images.is_empty() {
        return Err(SpastError::Config("encoder pretraining needs images".into()));
    }
    let mut weights = EncoderWeights::init(widths, seed, run_id);
    let decoder = Decoder::new(widths);
    let mut rng = init::rng_for(seed, "encoder-pretrain");
    let mut dec = ParamSet::new();
    decoder.init(&mut dec, &mut rng);
    let mut enc_opt = Adam::new(lr);
    let mut dec_opt = Adam::new(lr);
    let mean = Tensor::from_vec(weights.mean.to_vec(), &[3, 1, 1]);
    let std = Tensor::from_vec(weights.std.to_vec(), &[3, 1, 1]);
    let mut losses = Vec::with_capacity(steps);
    for step in 0..steps {
        let x = images[rng.random_range(0..images.len())].tensor();
        let pe = weights.params.bind(true);
        let pd = dec.bind(true);
        let taps = crate::feature_codec::encoder_taps(&pe, &mean, &std, x, Level::Relu4_1);
        let recon = decoder.forward(&pd, &taps[Level::Relu4_1.index()]);
        let loss = recon.sub(x).square().mean();
        let value = loss.item();
        if !value.is_finite() {
            return Err(SpastError::NonFiniteLoss {
                term: "encoder_pretrain".into(),
                step: step as u64,
                value,
            });
        }
        let grads = loss.backward();
        enc_opt.step(&mut weights.params, &pe.collect_grads(&grads));
        dec_opt.step(&mut dec, &pd.collect_grads(&grads));
        losses.push(value);
    }
    Ok(Pretrained {
        weights,
        decoder: dec,
        losses,
    })
}
