use rand::Rng;
use spast_tensor::{BoundParams, ParamSet, Tensor};

use super::encoder::conv3;
use super::{FeatureMap, ImageTensor, Level, Widths};
use crate::error::{Result, SpastError};
use crate::init;

/// Mirror of encoder blocks 4 to 1: relu4_1 features in, RGB out, nearest
/// 2× upsampling between blocks.
#[derive(Clone, Copy, Debug)]
pub struct Decoder {
    widths: Widths,
}

/// `(name, out block, in block, upsample before)`; `None` out is RGB.
const LAYERS: [(&str, Option<usize>, usize, bool); 9] = [
    ("decoder.conv4_1", Some(2), 3, false),
    ("decoder.conv3_4", Some(2), 2, true),
    ("decoder.conv3_3", Some(2), 2, false),
    ("decoder.conv3_2", Some(2), 2, false),
    ("decoder.conv3_1", Some(1), 2, false),
    ("decoder.conv2_2", Some(1), 1, true),
    ("decoder.conv2_1", Some(0), 1, false),
    ("decoder.conv1_2", Some(0), 0, true),
    ("decoder.conv1_1", None, 0, false),
];

impl Decoder {
    pub fn new(widths: Widths) -> Self {
        Decoder { widths }
    }

    pub fn widths(&self) -> Widths {
        self.widths
    }

    /// Adds `decoder.*` parameters to `set`.
    pub fn init(&self, set: &mut ParamSet, rng: &mut impl Rng) {
        for (name, out, inp, _) in LAYERS {
            let out_c = out.map_or(3, |b| self.widths.block(b));
            let gain = if out.is_none() { 0.5 } else { 1.0 };
            init::conv(set, rng, name, out_c, self.widths.block(inp), 3, gain);
        }
    }

    /// Raw output before clamping, used as the training signal.
    pub fn forward(&self, p: &BoundParams, f: &Tensor) -> Tensor {
        let mut h = f.clone();
        for (name, out, _, upsample) in LAYERS {
            if upsample {
                h = h.resize_nearest(2 * h.dim(1), 2 * h.dim(2));
            }
            h = conv3(p, name, &h);
            if out.is_some() {
                h = h.relu();
            }
        }
        h
    }

    /// Decodes a relu4_1 feature into an image clamped to `[0, 1]`.
    pub fn decode(&self, p: &BoundParams, f: &FeatureMap) -> Result<ImageTensor> {
        let want = self.widths.channels(Level::Relu4_1);
        if f.level() != Level::Relu4_1 {
            return Err(SpastError::LevelMismatch(format!("decoder expects relu4_1, got {}", f.level())));
        }
        if f.channels() != want {
            return Err(SpastError::Shape(format!(
                "decoder expects {want} channels, got {}",
                f.channels()
            )));
        }
        ImageTensor::from_tensor_clamped(&self.forward(p, f.tensor()))
    }
}
