//! Arbitrary style transfer with local-global window stylization and a
//! frozen diffusion-style prior used as a training critic.
//!
//! Pipeline: [`feature_codec`] encodes content and style images,
//! [`lgwssm`] transfers attention-weighted statistics at relu4_1 and
//! relu5_1, the decoder renders the result, and [`trainer`] optimizes the
//! generator with the objectives in [`losses`] and [`style_prior`].

pub mod ablation;
pub mod container;
pub mod error;
pub mod eval_metrics;
pub mod feature_codec;
pub mod init;
pub mod lgwssm;
pub mod losses;
pub mod style_prior;
pub mod trainer;

pub use error::{Result, SpastError};

pub use spast_tensor as tensor;
