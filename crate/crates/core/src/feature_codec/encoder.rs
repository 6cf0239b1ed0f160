use std::fmt;
use std::path::Path;

use spast_tensor::{BoundParams, ParamSet, Tensor};

use super::{FeatureMap, FeaturePyramid, ImageTensor, Level, Widths};
use crate::container::{Container, ContainerKind};
use crate::error::{Result, SpastError};
use crate::init;

/// ImageNet channel statistics, the usual normalisation for VGG weights.
pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

/// `(name, block, input block)` for each 3×3 conv up to relu5_1. Block -1
/// means the RGB input.
const LAYERS: [(&str, usize, isize); 13] = [
    ("conv1_1", 0, -1),
    ("conv1_2", 0, 0),
    ("conv2_1", 1, 0),
    ("conv2_2", 1, 1),
    ("conv3_1", 2, 1),
    ("conv3_2", 2, 2),
    ("conv3_3", 2, 2),
    ("conv3_4", 2, 2),
    ("conv4_1", 3, 2),
    ("conv4_2", 3, 3),
    ("conv4_3", 3, 3),
    ("conv4_4", 3, 3),
    ("conv5_1", 4, 3),
];

/// Where the encoder weights came from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Provenance {
    PretrainedFile { source: String },
    ToyTrained { run_id: String },
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Provenance::PretrainedFile { source } => write!(f, "pretrained-file:{source}"),
            Provenance::ToyTrained { run_id } => write!(f, "toy-trained:{run_id}"),
        }
    }
}

impl Provenance {
    pub fn parse(s: &str) -> Result<Self> {
        if let Some(source) = s.strip_prefix("pretrained-file:") {
            Ok(Provenance::PretrainedFile { source: source.into() })
        } else if let Some(run_id) = s.strip_prefix("toy-trained:") {
            if run_id.is_empty() {
                return Err(SpastError::CorruptWeights("toy-trained weights without a run id".into()));
            }
            Ok(Provenance::ToyTrained { run_id: run_id.into() })
        } else {
            Err(SpastError::CorruptWeights(format!("unknown provenance tag `{s}`")))
        }
    }
}

/// Encoder parameter blob with its preprocessing constants and provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderWeights {
    pub provenance: Provenance,
    pub mean: [f64; 3],
    pub std: [f64; 3],
    pub widths: Widths,
    pub params: ParamSet,
}

impl EncoderWeights {
    /// He-initialised weights; `run_id` names the run that will train them.
    pub fn init(widths: Widths, seed: u64, run_id: &str) -> Self {
        let mut rng = init::rng_for(seed, "encoder");
        let mut params = ParamSet::new();
        for (name, block, input) in LAYERS {
            let inp = if input < 0 { 3 } else { widths.block(input as usize) };
            init::conv(&mut params, &mut rng, name, widths.block(block), inp, 3, 1.0);
        }
        EncoderWeights {
            provenance: Provenance::ToyTrained { run_id: run_id.into() },
            mean: IMAGENET_MEAN,
            std: IMAGENET_STD,
            widths,
            params,
        }
    }

    /// Parameter shapes every valid blob must have.
    pub fn expected_shapes(widths: Widths) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        for (name, block, input) in LAYERS {
            let inp = if input < 0 { 3 } else { widths.block(input as usize) };
            let out_c = widths.block(block);
            out.push((format!("{name}.bias"), vec![out_c]));
            out.push((format!("{name}.weight"), vec![out_c, inp, 3, 3]));
        }
        out.sort();
        out
    }

    pub fn validate(&self) -> Result<()> {
        let expected = Self::expected_shapes(self.widths);
        if self.params.len() != expected.len() {
            return Err(SpastError::CorruptWeights(format!(
                "expected {} tensors, found {}",
                expected.len(),
                self.params.len()
            )));
        }
        for (name, shape) in expected {
            match self.params.get(&name) {
                Some(p) if p.shape == shape => {
                    if p.values.iter().any(|v| !v.is_finite()) {
                        return Err(SpastError::CorruptWeights(format!("`{name}` holds non-finite values")));
                    }
                }
                Some(p) => {
                    return Err(SpastError::CorruptWeights(format!(
                        "`{name}` has shape {:?}, expected {shape:?}",
                        p.shape
                    )))
                }
                None => return Err(SpastError::CorruptWeights(format!("missing tensor `{name}`"))),
            }
        }
        if self.std.iter().any(|s| !(*s > 0.0)) {
            return Err(SpastError::CorruptWeights("normalisation std must be positive".into()));
        }
        Ok(())
    }

    /// Hex SHA-256 of the parameter blob.
    pub fn digest(&self) -> String {
        hex::encode(self.params.digest())
    }

    /// Writes the weights as `encoder.*` sections of `c`.
    pub fn write_sections(&self, c: &mut Container) {
        c.put_str("encoder.provenance", &self.provenance.to_string());
        let norm: Vec<u8> = self.mean.iter().chain(&self.std).flat_map(|v| v.to_le_bytes()).collect();
        c.put("encoder.normalization", norm);
        c.put_u64("encoder.width_divisor", self.widths.divisor as u64);
        c.put("encoder.params", self.params.to_bytes());
    }

    pub fn read_sections(c: &Container) -> Result<Self> {
        let corrupt = |e: SpastError| match e {
            SpastError::CorruptWeights(_) => e,
            other => SpastError::CorruptWeights(other.to_string()),
        };
        let provenance = Provenance::parse(c.get_str("encoder.provenance").map_err(corrupt)?)?;
        let norm = c.get("encoder.normalization").map_err(corrupt)?;
        if norm.len() != 48 {
            return Err(SpastError::CorruptWeights("normalisation section must hold 6 values".into()));
        }
        let v: Vec<f64> = norm
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let divisor = c.get_u64("encoder.width_divisor").map_err(corrupt)? as usize;
        let widths = Widths::new(divisor).map_err(corrupt)?;
        let params = ParamSet::from_bytes(c.get("encoder.params").map_err(corrupt)?)
            .map_err(|e| SpastError::CorruptWeights(e.to_string()))?;
        let w = EncoderWeights {
            provenance,
            mean: [v[0], v[1], v[2]],
            std: [v[3], v[4], v[5]],
            widths,
            params,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut c = Container::new(ContainerKind::EncoderWeights);
        self.write_sections(&mut c);
        c.to_bytes()
    }

    /// Parses a weight file; any integrity failure is a corrupt-weights error.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let c = Container::from_bytes(bytes, ContainerKind::EncoderWeights).map_err(|e| match e {
            SpastError::Checksum(m) => SpastError::CorruptWeights(format!("checksum failure: {m}")),
            SpastError::Malformed(m) => SpastError::CorruptWeights(m),
            other => other,
        })?;
        Self::read_sections(&c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut c = Container::new(ContainerKind::EncoderWeights);
        self.write_sections(&mut c);
        c.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Frozen encoder ready for inference. Cloning shares the bound tensors.
#[derive(Clone)]
pub struct Encoder {
    weights: EncoderWeights,
    bound: BoundParams,
    mean: Tensor,
    std: Tensor,
}

impl Encoder {
    pub fn new(weights: EncoderWeights) -> Result<Self> {
        weights.validate()?;
        let bound = weights.params.bind(false);
        let mean = Tensor::from_vec(weights.mean.to_vec(), &[3, 1, 1]);
        let std = Tensor::from_vec(weights.std.to_vec(), &[3, 1, 1]);
        Ok(Encoder {
            weights,
            bound,
            mean,
            std,
        })
    }

    pub fn weights(&self) -> &EncoderWeights {
        &self.weights
    }

    pub fn widths(&self) -> Widths {
        self.weights.widths
    }

    pub fn encode_pyramid(&self, img: &ImageTensor) -> Result<FeaturePyramid> {
        self.encode(img.tensor())
    }

    /// Differentiable with respect to `x`, which may carry autodiff history
    /// and need not lie in `[0, 1]`.
    pub fn encode(&self, x: &Tensor) -> Result<FeaturePyramid> {
        check_input(x, Level::Relu5_1)?;
        let taps = forward_to(&self.bound, &self.mean, &self.std, x, Level::Relu5_1);
        FeaturePyramid::new(
            taps.into_iter()
                .zip(Level::ALL)
                .map(|(t, l)| FeatureMap::new(t, l))
                .collect::<Result<_>>()?,
        )
    }

    /// Only the levels up to and including `deepest`, which skips the cost
    /// of the remaining blocks.
    pub fn encode_to(&self, x: &Tensor, deepest: Level) -> Result<Vec<FeatureMap>> {
        check_input(x, deepest)?;
        let taps = forward_to(&self.bound, &self.mean, &self.std, x, deepest);
        taps.into_iter().zip(Level::ALL).map(|(t, l)| FeatureMap::new(t, l)).collect()
    }
}

/// Every convolution reflects one pixel, so the deepest level needs at
/// least two pixels per side.
fn check_input(x: &Tensor, deepest: Level) -> Result<()> {
    let k = deepest.stride();
    match x.shape() {
        [3, h, w] if h % k == 0 && w % k == 0 && h / k >= 2 && w / k >= 2 => Ok(()),
        s => Err(SpastError::Shape(format!(
            "encoder input to {deepest} must be 3×H×W with H and W multiples of {k} and at least {}, got {s:?}",
            2 * k
        ))),
    }
}

/// Runs the layer stack with explicit parameters so that training code can
/// bind them as variables.
pub(crate) fn forward_to(p: &BoundParams, mean: &Tensor, std: &Tensor, x: &Tensor, deepest: Level) -> Vec<Tensor> {
    let mut h = x.sub(mean).div(std);
    let mut taps = Vec::with_capacity(5);
    let mut block = 0;
    for (name, b, _) in LAYERS {
        if b != block {
            h = h.max_pool2();
            block = b;
        }
        h = conv3(p, name, &h).relu();
        if name.ends_with("_1") {
            taps.push(h.clone());
            if taps.len() > deepest.index() {
                break;
            }
        }
    }
    taps
}

pub(crate) fn conv3(p: &BoundParams, name: &str, x: &Tensor) -> Tensor {
    x.pad_reflect(1).conv2d(
        p.get(&format!("{name}.weight")),
        Some(p.get(&format!("{name}.bias"))),
        1,
    )
}
