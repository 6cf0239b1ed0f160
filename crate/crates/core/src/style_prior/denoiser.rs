use rand::Rng;
use serde::{Deserialize, Serialize};
use spast_tensor::{BoundParams, Param, ParamSet, Tensor};

use super::DenoiserModel;
use crate::init;
use crate::lgwssm::to_tokens;

/// Attention pooling over encoder tokens: a learned query scores every
/// token's key, and the softmax-weighted values are projected to the
/// embedding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StyleEmbedder {
    pub channels: usize,
    pub dim: usize,
}

impl StyleEmbedder {
    /// Adds `embed.*` parameters to `set`.
    pub fn init(&self, set: &mut ParamSet, rng: &mut impl Rng) {
        init::linear(set, rng, "embed.key", self.dim, self.channels);
        init::linear(set, rng, "embed.value", self.dim, self.channels);
        init::linear(set, rng, "embed.out", self.dim, self.dim);
        set.insert("embed.query", Param::new(&[self.dim, 1], init::normal_vec(rng, self.dim, 1.0)));
    }

    /// Embedding of a `C×H×W` feature map, shaped `[dim]` whatever `H×W`.
    pub fn embed(&self, p: &BoundParams, features: &Tensor) -> Tensor {
        let x = to_tokens(features);
        let dense = |name: &str, x: &Tensor| {
            x.matmul_nt(p.get(&format!("{name}.weight")))
                .add(p.get(&format!("{name}.bias")))
        };
        let keys = dense("embed.key", &x);
        let values = dense("embed.value", &x);
        let n = x.dim(0);
        let scores = keys
            .matmul(p.get("embed.query"))
            .scale(1.0 / (self.dim as f64).sqrt())
            .reshape(&[1, n])
            .softmax();
        let pooled = scores.matmul(&values);
        dense("embed.out", &pooled).reshape(&[self.dim])
    }
}

const TIME_FEATURES: usize = 16;

/// Small two-scale U-shaped denoiser with FiLM conditioning on the style
/// embedding and sinusoidal timestep features.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyDenoiser {
    pub latent_channels: usize,
    pub width: usize,
    pub embed_dim: usize,
    pub steps: usize,
}

impl ToyDenoiser {
    fn cond_dim(&self) -> usize {
        self.embed_dim + TIME_FEATURES
    }

    /// Adds `den.*` parameters to `set`.
    pub fn init(&self, set: &mut ParamSet, rng: &mut impl Rng) {
        let (c, l) = (self.width, self.latent_channels);
        init::conv(set, rng, "den.in", c, l, 3, 1.0);
        init::linear(set, rng, "den.film1", 2 * c, self.cond_dim());
        init::conv(set, rng, "den.down", 2 * c, c, 3, 1.0);
        init::linear(set, rng, "den.film2", 4 * c, self.cond_dim());
        init::conv(set, rng, "den.mid", 2 * c, 2 * c, 3, 1.0);
        init::conv(set, rng, "den.up", c, 2 * c, 3, 1.0);
        init::conv(set, rng, "den.merge", c, 2 * c, 3, 1.0);
        init::conv(set, rng, "den.out", l, c, 3, 0.1);
    }

    fn time_features(&self, t: usize) -> Vec<f64> {
        let x = t as f64 / self.steps as f64 * 1000.0;
        (0..TIME_FEATURES / 2)
            .flat_map(|k| {
                let freq = 1.0 / 10_000f64.powf(k as f64 / (TIME_FEATURES / 2) as f64);
                [(x * freq).sin(), (x * freq).cos()]
            })
            .collect()
    }

    fn conv(p: &BoundParams, name: &str, x: &Tensor, stride: usize) -> Tensor {
        x.pad_zero(1).conv2d(
            p.get(&format!("{name}.weight")),
            Some(p.get(&format!("{name}.bias"))),
            stride,
        )
    }

    /// `h·(1 + γ) + β` with `(γ, β)` read from the conditioning vector.
    fn film(p: &BoundParams, name: &str, h: &Tensor, cond: &Tensor) -> Tensor {
        let c = h.dim(0);
        let gb = cond
            .matmul_nt(p.get(&format!("{name}.weight")))
            .add(p.get(&format!("{name}.bias")))
            .reshape(&[2 * c, 1, 1]);
        let gamma = gb.narrow(0, 0, c);
        let beta = gb.narrow(0, c, c);
        h.mul(&gamma.add_scalar(1.0)).add(&beta)
    }
}

impl DenoiserModel for ToyDenoiser {
    fn predict(&self, p: &BoundParams, z_t: &Tensor, embedding: &Tensor, t: usize) -> Tensor {
        let time = Tensor::from_vec(self.time_features(t), &[1, TIME_FEATURES]);
        let cond = Tensor::concat(&[embedding.reshape(&[1, self.embed_dim]), time], 1);
        let (h, w) = (z_t.dim(1), z_t.dim(2));
        let skip = Self::film(p, "den.film1", &Self::conv(p, "den.in", z_t, 1), &cond).relu();
        let down = Self::film(p, "den.film2", &Self::conv(p, "den.down", &skip, 2), &cond).relu();
        let mid = Self::conv(p, "den.mid", &down, 1).relu();
        let up = Self::conv(p, "den.up", &mid.resize_nearest(h, w), 1).relu();
        let merged = Self::conv(p, "den.merge", &Tensor::concat(&[up, skip], 0), 1).relu();
        Self::conv(p, "den.out", &merged, 1)
    }
}
