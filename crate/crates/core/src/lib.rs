//! Localized, mask-driven face editing: per-ROI mask prediction, a
//! structure/texture autoencoder with spatially varying texture codes, noise
//! injection, refinement, and evaluation.

pub mod checkpoint;
pub mod datasets;
pub mod evaluation;
mod error;
pub mod imageio;
pub mod losses;
pub mod rng;
mod roi;
pub mod sae;
pub mod pipeline;
pub mod refinement;
pub mod smpn;
pub mod style_edit;

pub use error::{Error, Result};
pub use roi::RoiLabel;

pub type Smpn32 = smpn::Smpn<f32>;
pub type Smpn64 = smpn::Smpn<f64>;
pub type Sae32 = sae::Sae<f32>;
pub type Sae64 = sae::Sae<f64>;
