//! Training objective terms and the patch discriminator.

mod discriminator;

use serde::{Deserialize, Serialize};
use spast_tensor::Tensor;

use crate::error::{Result, SpastError};
use crate::feature_codec::{Encoder, FeaturePyramid, Level};
use crate::lgwssm::channel_stats;

pub use discriminator::{adversarial_losses, Discriminator};

/// Weights of the five objective terms and of the two identity sub-terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub style: f64,
    pub content: f64,
    pub identity: f64,
    pub adversarial: f64,
    pub style_prior: f64,
    pub identity_pixel: f64,
    pub identity_feature: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            style: 1.0,
            content: 1.0,
            identity: 1.0,
            adversarial: 1.0,
            style_prior: 1.0,
            identity_pixel: 50.0,
            identity_feature: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.style,
            self.content,
            self.identity,
            self.adversarial,
            self.style_prior,
            self.identity_pixel,
            self.identity_feature,
        ];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(SpastError::Config(format!("loss weights must be finite and non-negative: {self:?}")));
        }
        Ok(())
    }
}

/// Per-term values of one training step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: u64,
    pub content: f64,
    pub style: f64,
    pub identity: f64,
    pub adversarial: f64,
    pub style_prior: f64,
    pub total: f64,
}

impl LossReport {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("plain numbers serialise")
    }

    fn terms(&self) -> [(&'static str, f64); 5] {
        [
            ("style", self.style),
            ("content", self.content),
            ("identity", self.identity),
            ("adversarial", self.adversarial),
            ("style_prior", self.style_prior),
        ]
    }
}

/// Weighted sum of the report's terms, also stored in `report.total`.
pub fn total_loss(report: &mut LossReport, w: &LossWeights) -> Result<f64> {
    for (term, value) in report.terms() {
        if !value.is_finite() {
            return Err(SpastError::NonFiniteLoss {
                term: term.into(),
                step: report.step,
                value,
            });
        }
    }
    report.total = w.style * report.style
        + w.content * report.content
        + w.identity * report.identity
        + w.adversarial * report.adversarial
        + w.style_prior * report.style_prior;
    Ok(report.total)
}

fn same_shape(a: &Tensor, b: &Tensor, level: Level) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(SpastError::LevelMismatch(format!(
            "{level}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Euclidean distance between features at relu4_1 plus that at relu5_1.
pub fn content_loss(pyr_cs: &FeaturePyramid, pyr_c: &FeaturePyramid) -> Result<Tensor> {
    let mut total = Tensor::scalar(0.0);
    for level in [Level::Relu4_1, Level::Relu5_1] {
        let (a, b) = (pyr_cs.get(level).tensor(), pyr_c.get(level).tensor());
        same_shape(a, b, level)?;
        total = total.add(&a.sub(b).l2_norm());
    }
    Ok(total)
}

/// Sum over the five levels of the Euclidean distances between channel
/// means and between channel standard deviations.
pub fn style_loss(pyr_cs: &FeaturePyramid, pyr_s: &FeaturePyramid) -> Result<Tensor> {
    let mut total = Tensor::scalar(0.0);
    for level in Level::ALL {
        let (a, b) = (pyr_cs.get(level).tensor(), pyr_s.get(level).tensor());
        if a.dim(0) != b.dim(0) {
            return Err(SpastError::LevelMismatch(format!(
                "{level}: {} vs {} channels",
                a.dim(0),
                b.dim(0)
            )));
        }
        let (ma, sa) = channel_stats(a);
        let (mb, sb) = channel_stats(b);
        total = total.add(&ma.sub(&mb).l2_norm()).add(&sa.sub(&sb).l2_norm());
    }
    Ok(total)
}

/// `F·Fᵀ / (C·H·W)` of a `C×H×W` feature.
pub fn gram(x: &Tensor) -> Tensor {
    let c = x.dim(0);
    let n = x.numel();
    let flat = x.reshape(&[c, n / c]);
    flat.matmul_nt(&flat).scale(1.0 / n as f64)
}

/// Sum over levels of the mean squared difference of Gram matrices.
/// An evaluation metric only.
pub fn gram_loss(pyr_cs: &FeaturePyramid, pyr_s: &FeaturePyramid) -> Result<Tensor> {
    let mut total = Tensor::scalar(0.0);
    for level in Level::ALL {
        let (a, b) = (pyr_cs.get(level).tensor(), pyr_s.get(level).tensor());
        if a.dim(0) != b.dim(0) {
            return Err(SpastError::LevelMismatch(format!("{level}: channel counts differ")));
        }
        total = total.add(&gram(a).sub(&gram(b)).square().mean());
    }
    Ok(total)
}

/// Identity-branch outputs, their inputs, and the encodings of all four.
pub struct IdentityParts<'a> {
    pub icc: &'a Tensor,
    pub ic: &'a Tensor,
    pub iss: &'a Tensor,
    pub is: &'a Tensor,
    pub e_icc: &'a FeaturePyramid,
    pub e_ic: &'a FeaturePyramid,
    pub e_iss: &'a FeaturePyramid,
    pub e_is: &'a FeaturePyramid,
}

/// Pixel distances weighted by `identity_pixel` plus feature distances over
/// all five levels weighted by `identity_feature`.
pub fn identity_from_parts(p: &IdentityParts<'_>, w: &LossWeights) -> Result<Tensor> {
    if p.icc.shape() != p.ic.shape() || p.iss.shape() != p.is.shape() {
        return Err(SpastError::Shape("identity outputs must match their inputs".into()));
    }
    let pixel = p.icc.sub(p.ic).l2_norm().add(&p.iss.sub(p.is).l2_norm());
    let mut feature = Tensor::scalar(0.0);
    for level in Level::ALL {
        for (x, y) in [(p.e_icc, p.e_ic), (p.e_iss, p.e_is)] {
            let (a, b) = (x.get(level).tensor(), y.get(level).tensor());
            same_shape(a, b, level)?;
            feature = feature.add(&a.sub(b).l2_norm());
        }
    }
    Ok(pixel.scale(w.identity_pixel).add(&feature.scale(w.identity_feature)))
}

/// Runs `spast` on `(I_c, I_c)` and `(I_s, I_s)` and measures how far the
/// results are from the inputs.
pub fn identity_loss(
    spast: impl Fn(&Tensor, &Tensor) -> Result<Tensor>,
    encoder: &Encoder,
    ic: &Tensor,
    is: &Tensor,
    w: &LossWeights,
) -> Result<Tensor> {
    let icc = spast(ic, ic)?;
    let iss = spast(is, is)?;
    identity_from_parts(
        &IdentityParts {
            icc: &icc,
            ic,
            iss: &iss,
            is,
            e_icc: &encoder.encode(&icc)?,
            e_ic: &encoder.encode(ic)?,
            e_iss: &encoder.encode(&iss)?,
            e_is: &encoder.encode(is)?,
        },
        w,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn total_of_unit_terms() {
        let mut r = LossReport {
            step: 3,
            content: 1.0,
            style: 1.0,
            identity: 1.0,
            adversarial: 1.0,
            style_prior: 1.0,
            total: 0.0,
        };
        assert_eq!(total_loss(&mut r, &LossWeights::default()).unwrap(), 5.0);
        assert_eq!(r.total, 5.0);
        let zero = LossWeights {
            style: 0.0,
            content: 0.0,
            identity: 0.0,
            adversarial: 0.0,
            style_prior: 0.0,
            ..LossWeights::default()
        };
        assert_eq!(total_loss(&mut r, &zero).unwrap(), 0.0);
        let double = LossWeights {
            style_prior: 2.0,
            ..LossWeights::default()
        };
        r.style_prior = 0.37;
        let base = total_loss(&mut r, &LossWeights::default()).unwrap();
        assert!((total_loss(&mut r, &double).unwrap() - base - 0.37).abs() < 1e-12);
    }

    #[test]
    fn non_finite_term_names_itself() {
        let mut r = LossReport {
            step: 9,
            adversarial: f64::NAN,
            ..LossReport::default()
        };
        match total_loss(&mut r, &LossWeights::default()) {
            Err(SpastError::NonFiniteLoss { term, step, .. }) => {
                assert_eq!(term, "adversarial");
                assert_eq!(step, 9);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn report_json_line_has_all_fields() {
        let line = LossReport::default().to_json_line();
        let v: serde_json::Value = serde_json::from_str(&line).unwrap();
        for key in ["step", "content", "style", "identity", "adversarial", "style_prior", "total"] {
            assert!(v.get(key).is_some(), "{key}");
        }
    }

    #[test]
    fn gram_of_two_element_channel() {
        let g = gram(&Tensor::from_vec(vec![1.0, 2.0], &[1, 1, 2]));
        assert_eq!(g.to_vec(), vec![2.5]);
        let g2 = gram(&Tensor::from_vec(vec![2.0, 4.0], &[1, 1, 2]));
        assert_eq!(g2.item(), 4.0 * g.item());
    }
}
