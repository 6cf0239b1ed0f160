use rand::Rng;
use spast_tensor::{BoundParams, ParamSet, Tensor};

use crate::error::{Result, SpastError};
use crate::init;

const SLOPE: f64 = 0.2;
const STAGES: [usize; 4] = [64, 128, 256, 512];

/// Patch classifier: four stride-2 `4×4` convolutions with leaky ReLU, then
/// a `3×3` convolution to one logit per patch.
#[derive(Clone, Copy, Debug)]
pub struct Discriminator {
    divisor: usize,
}

impl Discriminator {
    pub fn new(divisor: usize) -> Result<Self> {
        if divisor == 0 || 64 % divisor != 0 {
            return Err(SpastError::Config(format!("discriminator width divisor {divisor} must divide 64")));
        }
        Ok(Discriminator { divisor })
    }

    fn width(&self, stage: usize) -> usize {
        STAGES[stage] / self.divisor
    }

    /// Adds `disc.*` parameters to `set`.
    pub fn init(&self, set: &mut ParamSet, rng: &mut impl Rng) {
        let mut inp = 3;
        for stage in 0..4 {
            let out = self.width(stage);
            init::conv(set, rng, &format!("disc.conv{}", stage + 1), out, inp, 4, 1.0);
            inp = out;
        }
        init::conv(set, rng, "disc.logit", 1, inp, 3, 0.5);
    }

    /// Logit map `1×h×w` for an image in `[0, 1]` whose sides are at least 16.
    pub fn logits(&self, p: &BoundParams, x: &Tensor) -> Tensor {
        let mut h = x.scale(2.0).add_scalar(-1.0);
        for stage in 1..=4 {
            let name = format!("disc.conv{stage}");
            h = h
                .pad_zero(1)
                .conv2d(p.get(&format!("{name}.weight")), Some(p.get(&format!("{name}.bias"))), 2)
                .leaky_relu(SLOPE);
        }
        h.pad_zero(1)
            .conv2d(p.get("disc.logit.weight"), Some(p.get("disc.logit.bias")), 1)
    }

    /// `−mean log D(real) − mean log(1 − D(fake))`, with `fake` detached.
    pub fn d_loss(&self, p: &BoundParams, real: &Tensor, fake: &Tensor) -> Tensor {
        let real_term = self.logits(p, real).log_sigmoid().mean();
        let fake_term = self.logits(p, &fake.detach()).neg().log_sigmoid().mean();
        real_term.add(&fake_term).neg()
    }

    /// Non-saturating generator loss `−mean log D(fake)`.
    pub fn g_loss(&self, p: &BoundParams, fake: &Tensor) -> Tensor {
        self.logits(p, fake).log_sigmoid().mean().neg()
    }
}

/// Discriminator and generator losses for one real/fake pair.
pub fn adversarial_losses(d: &Discriminator, p: &BoundParams, real: &Tensor, fake: &Tensor) -> (Tensor, Tensor) {
    (d.d_loss(p, real, fake), d.g_loss(p, fake))
}
