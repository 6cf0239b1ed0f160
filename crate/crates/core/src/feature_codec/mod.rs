//! Image I/O, the VGG-19-shaped encoder and the mirror decoder.

mod decoder;
mod encoder;
mod image;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use spast_tensor::Tensor;

use crate::error::{Result, SpastError};

pub use decoder::Decoder;
pub(crate) use encoder::forward_to as encoder_taps;
pub use encoder::{Encoder, EncoderWeights, Provenance, IMAGENET_MEAN, IMAGENET_STD};
pub use image::ImageTensor;

/// Encoder taps, shallowest first.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    Relu1_1,
    Relu2_1,
    Relu3_1,
    Relu4_1,
    Relu5_1,
}

impl Level {
    pub const ALL: [Level; 5] = [
        Level::Relu1_1,
        Level::Relu2_1,
        Level::Relu3_1,
        Level::Relu4_1,
        Level::Relu5_1,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    /// Downsampling factor relative to the input image.
    pub fn stride(self) -> usize {
        1 << self.index()
    }

    pub fn name(self) -> &'static str {
        ["relu1_1", "relu2_1", "relu3_1", "relu4_1", "relu5_1"][self.index()]
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Level {
    type Err = SpastError;

    fn from_str(s: &str) -> Result<Self> {
        Level::ALL
            .into_iter()
            .find(|l| l.name() == s.trim())
            .ok_or_else(|| SpastError::Config(format!("unknown feature level `{s}`")))
    }
}

/// Channel counts of the five encoder blocks. The full network uses
/// 64/128/256/512/512; a divisor shrinks every block uniformly.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Widths {
    pub divisor: usize,
}

impl Widths {
    pub const FULL: [usize; 5] = [64, 128, 256, 512, 512];

    pub fn new(divisor: usize) -> Result<Self> {
        if divisor == 0 || 64 % divisor != 0 {
            return Err(SpastError::Config(format!("width divisor {divisor} must divide 64")));
        }
        Ok(Widths { divisor })
    }

    pub fn full() -> Self {
        Widths { divisor: 1 }
    }

    pub fn channels(self, level: Level) -> usize {
        Self::FULL[level.index()] / self.divisor
    }

    pub fn block(self, i: usize) -> usize {
        Self::FULL[i] / self.divisor
    }
}

/// Activations `C×H×W` at one encoder level.
#[derive(Clone, Debug)]
pub struct FeatureMap {
    tensor: Tensor,
    level: Level,
}

impl FeatureMap {
    pub fn new(tensor: Tensor, level: Level) -> Result<Self> {
        if tensor.rank() != 3 {
            return Err(SpastError::Shape(format!(
                "feature map must be C×H×W, got {:?}",
                tensor.shape()
            )));
        }
        Ok(FeatureMap { tensor, level })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn into_tensor(self) -> Tensor {
        self.tensor
    }

    pub fn level(&self) -> Level {
        self.level
    }

    pub fn channels(&self) -> usize {
        self.tensor.dim(0)
    }

    pub fn height(&self) -> usize {
        self.tensor.dim(1)
    }

    pub fn width(&self) -> usize {
        self.tensor.dim(2)
    }

    pub fn detach(&self) -> FeatureMap {
        FeatureMap {
            tensor: self.tensor.detach(),
            level: self.level,
        }
    }
}

/// All five levels computed from one image.
#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    maps: Vec<FeatureMap>,
}

impl FeaturePyramid {
    /// Checks that the maps cover the five levels in order with spatial
    /// sizes that halve (with floor) from one level to the next.
    pub fn new(maps: Vec<FeatureMap>) -> Result<Self> {
        if maps.len() != 5 {
            return Err(SpastError::LevelMismatch(format!("expected 5 levels, got {}", maps.len())));
        }
        for (m, level) in maps.iter().zip(Level::ALL) {
            if m.level != level {
                return Err(SpastError::LevelMismatch(format!("found {} where {level} belongs", m.level)));
            }
        }
        for pair in maps.windows(2) {
            let (a, b) = (&pair[0], &pair[1]);
            if b.height() != a.height() / 2 || b.width() != a.width() / 2 {
                return Err(SpastError::LevelMismatch(format!(
                    "{} is {}×{} but {} is {}×{}",
                    a.level,
                    a.height(),
                    a.width(),
                    b.level,
                    b.height(),
                    b.width()
                )));
            }
        }
        Ok(FeaturePyramid { maps })
    }

    pub fn get(&self, level: Level) -> &FeatureMap {
        &self.maps[level.index()]
    }

    pub fn iter(&self) -> impl Iterator<Item = &FeatureMap> {
        self.maps.iter()
    }

    pub fn detach(&self) -> FeaturePyramid {
        FeaturePyramid {
            maps: self.maps.iter().map(FeatureMap::detach).collect(),
        }
    }

    /// Fails unless `other` has the same shape at every level.
    pub fn check_compatible(&self, other: &FeaturePyramid) -> Result<()> {
        for (a, b) in self.maps.iter().zip(&other.maps) {
            if a.channels() != b.channels() {
                return Err(SpastError::LevelMismatch(format!(
                    "{} has {} channels in one pyramid and {} in the other",
                    a.level,
                    a.channels(),
                    b.channels()
                )));
            }
        }
        Ok(())
    }
}
