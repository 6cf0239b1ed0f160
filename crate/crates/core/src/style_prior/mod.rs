//! Diffusion-style prior used as a critic: noise schedule, latent codec,
//! conditional denoiser, and the reconstruction and prior losses.

mod denoiser;
mod prior;

use spast_tensor::{BoundParams, Tensor};

use crate::error::{Result, SpastError};
use crate::feature_codec::ImageTensor;

pub use denoiser::{StyleEmbedder, ToyDenoiser};
pub use prior::{train_prior, FrozenPrior, PriorConfig, PriorTrainLog, StylePrior};

/// Linear β ramp and the cumulative products `ᾱ_t = Π_{i≤t} (1 − β_i)`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bar: Vec<f64>,
}

pub fn build_schedule(steps: usize, beta_min: f64, beta_max: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(SpastError::ScheduleRange("at least one step is required".into()));
    }
    if !(0.0 < beta_min && beta_min < beta_max && beta_max < 1.0) {
        return Err(SpastError::ScheduleRange(format!(
            "need 0 < beta_min < beta_max < 1, got {beta_min} and {beta_max}"
        )));
    }
    let betas: Vec<f64> = if steps == 1 {
        vec![beta_min]
    } else {
        (0..steps)
            .map(|i| beta_min + (beta_max - beta_min) * i as f64 / (steps - 1) as f64)
            .collect()
    };
    let mut alpha_bar = Vec::with_capacity(steps);
    let mut acc = 1.0;
    for b in &betas {
        acc *= 1.0 - b;
        alpha_bar.push(acc);
    }
    Ok(NoiseSchedule { betas, alpha_bar })
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    fn check(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.steps() {
            return Err(SpastError::StepOutOfRange { t, max: self.steps() });
        }
        Ok(t - 1)
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        Ok(self.betas[self.check(t)?])
    }

    /// `ᾱ_t` for `1 ≤ t ≤ T`.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        Ok(self.alpha_bar[self.check(t)?])
    }

    /// Loss weight `w(t) = 1 − ᾱ_t`.
    pub fn weight(&self, t: usize) -> Result<f64> {
        Ok(1.0 - self.alpha_bar(t)?)
    }
}

/// `z_t = sqrt(ᾱ_t)·z + sqrt(1 − ᾱ_t)·ε`.
pub fn add_noise(z: &Tensor, t: usize, eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    let ab = sched.alpha_bar(t)?;
    noise_with_alpha_bar(z, ab, eps)
}

pub(crate) fn noise_with_alpha_bar(z: &Tensor, alpha_bar: f64, eps: &Tensor) -> Result<Tensor> {
    if z.shape() != eps.shape() {
        return Err(SpastError::Shape(format!(
            "latent {:?} and noise {:?} differ",
            z.shape(),
            eps.shape()
        )));
    }
    Ok(z.scale(alpha_bar.sqrt()).add(&eps.scale((1.0 - alpha_bar).sqrt())))
}

/// Image ↔ latent mapping in front of the denoiser.
pub trait LatentCodec: Send + Sync {
    /// Differentiable with respect to `image`.
    fn encode(&self, image: &Tensor) -> Tensor;
    fn decode(&self, z: &Tensor) -> Result<ImageTensor>;
}

/// Fixed `factor×` average-pool downsampler mapped to `[−1, 1]`, decoded by
/// bilinear upsampling.
#[derive(Clone, Copy, Debug)]
pub struct PoolCodec {
    pub factor: usize,
}

impl LatentCodec for PoolCodec {
    fn encode(&self, image: &Tensor) -> Tensor {
        image.avg_pool(self.factor).scale(2.0).add_scalar(-1.0)
    }

    fn decode(&self, z: &Tensor) -> Result<ImageTensor> {
        let up = z
            .add_scalar(1.0)
            .scale(0.5)
            .resize_bilinear(z.dim(1) * self.factor, z.dim(2) * self.factor);
        ImageTensor::from_tensor_clamped(&up)
    }
}

/// Conditional noise predictor `ε̂(z_t, embedding, t)`.
pub trait DenoiserModel: Send + Sync {
    fn predict(&self, params: &BoundParams, z_t: &Tensor, embedding: &Tensor, t: usize) -> Tensor;
}

/// `‖ε − ε̂(z_t, embedding, t)‖²` for the latent of `image`.
#[allow(clippy::too_many_arguments)]
pub fn prior_recon_loss(
    model: &dyn DenoiserModel,
    params: &BoundParams,
    codec: &dyn LatentCodec,
    sched: &NoiseSchedule,
    image: &Tensor,
    embedding: &Tensor,
    t: usize,
    eps: &Tensor,
) -> Result<Tensor> {
    let z_t = add_noise(&codec.encode(image), t, eps, sched)?;
    let eps_hat = model.predict(params, &z_t, embedding, t);
    Ok(eps.sub(&eps_hat).square().sum())
}

/// Result of [`style_prior_loss`]. Back-propagating `surrogate` delivers the
/// prior gradient; its value is meaningless. `proxy` is what gets logged.
#[derive(Clone, Debug)]
pub struct PriorLoss {
    pub surrogate: Tensor,
    pub proxy: f64,
    pub weight: f64,
    pub residual: Vec<f64>,
}

/// Injects `w(t)·(ε̂ − ε)` at the noisy latent of `i_cs`.
///
/// By default the residual is a constant, so the gradient reaching `i_cs`
/// is `w(t)·r·sqrt(ᾱ_t)·∂z/∂i_cs`. With `include_jacobian` it is also
/// multiplied by the denoiser Jacobian `∂ε̂/∂z_t`. The prior parameters and
/// the embedding must not require gradients.
#[allow(clippy::too_many_arguments)]
pub fn style_prior_loss(
    model: &dyn DenoiserModel,
    params: &BoundParams,
    codec: &dyn LatentCodec,
    sched: &NoiseSchedule,
    i_cs: &Tensor,
    embedding: &Tensor,
    t: usize,
    eps: &Tensor,
    include_jacobian: bool,
) -> Result<PriorLoss> {
    if let Some((name, _)) = params.iter().find(|(_, p)| p.requires_grad()) {
        return Err(SpastError::FrozenViolation(format!("parameter `{name}` is trainable")));
    }
    if embedding.requires_grad() {
        return Err(SpastError::FrozenViolation("style embedding is trainable".into()));
    }
    let w = sched.weight(t)?;
    let z_t = add_noise(&codec.encode(i_cs), t, eps, sched)?;
    let eps_hat = if include_jacobian {
        model.predict(params, &z_t, embedding, t)
    } else {
        model.predict(params, &z_t.detach(), embedding, t)
    };
    let residual: Vec<f64> = eps_hat.data().iter().zip(eps.data()).map(|(a, b)| a - b).collect();
    let proxy = w * residual.iter().map(|r| r * r).sum::<f64>() / residual.len() as f64;
    let coef = Tensor::from_vec(residual.iter().map(|r| w * r).collect(), z_t.shape());
    let surrogate = if include_jacobian {
        coef.mul(&eps_hat).sum()
    } else {
        coef.mul(&z_t).sum()
    };
    Ok(PriorLoss {
        surrogate,
        proxy,
        weight: w,
        residual,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_step_schedule() {
        let s = build_schedule(1, 0.02, 0.5).unwrap();
        assert_eq!(s.alpha_bar(1).unwrap(), 1.0 - 0.02);
        assert!(matches!(s.alpha_bar(2), Err(SpastError::StepOutOfRange { t: 2, max: 1 })));
        assert!(matches!(s.alpha_bar(0), Err(SpastError::StepOutOfRange { .. })));
    }

    #[test]
    fn schedule_range_errors() {
        for (a, b) in [(0.0, 0.1), (0.2, 0.1), (0.1, 1.0), (-0.1, 0.5)] {
            assert!(matches!(build_schedule(10, a, b), Err(SpastError::ScheduleRange(_))));
        }
    }

    #[test]
    fn noising_limits_and_midpoint() {
        let z = Tensor::from_vec(vec![1.0, 0.0], &[2]);
        let eps = Tensor::from_vec(vec![0.0, 1.0], &[2]);
        assert_eq!(noise_with_alpha_bar(&z, 1.0, &eps).unwrap().to_vec(), z.to_vec());
        assert_eq!(noise_with_alpha_bar(&z, 0.0, &eps).unwrap().to_vec(), eps.to_vec());
        let mid = noise_with_alpha_bar(&z, 0.5, &eps).unwrap().to_vec();
        assert!((mid[0] - 0.7071).abs() < 1e-4 && (mid[1] - 0.7071).abs() < 1e-4);
    }

    #[test]
    fn pool_codec_maps_grey_to_zero() {
        let codec = PoolCodec { factor: 4 };
        let z = codec.encode(&Tensor::full(&[3, 16, 16], 0.5));
        assert_eq!(z.shape(), &[3, 4, 4]);
        assert!(z.data().iter().all(|v| v.abs() < 1e-15));
        let back = codec.decode(&z).unwrap();
        assert!(back.data().iter().all(|v| (v - 0.5).abs() < 1e-12));
    }
}
