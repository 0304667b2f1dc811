//! Candidate posterior approximators `q(theta | x)`.
//!
//! Every family implements [`PosteriorModel`]. Evaluation goes through
//! [`PosteriorModel::condition`], which does the `x`-dependent work once and
//! returns a [`ConditionalDensity`] that can be queried and sampled cheaply.

mod gaussian;
mod mdn;
mod train;
mod uniform;

use std::sync::Arc;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{CanviError, Result};

pub use gaussian::ConditionalLinearGaussian;
pub use mdn::{MdnArchitecture, MixtureDensityNetwork, ThetaTransform};
pub use train::{draw_joint_tolerant, smoothed, train_favi, FaviSettings};
pub use uniform::UniformBox;

/// `q(theta | x)` for one fixed `x`.
pub trait ConditionalDensity {
    /// Exact log-density; `-inf` outside the support.
    fn log_density(&self, theta: &[f64]) -> f64;

    fn sample(&self, rng: &mut dyn RngCore) -> Vec<f64>;
}

pub trait PosteriorModel: Send + Sync {
    fn family(&self) -> &'static str;

    fn theta_dim(&self) -> usize;

    fn x_dim(&self) -> usize;

    fn condition<'a>(&'a self, x: &[f64]) -> Box<dyn ConditionalDensity + 'a>;

    fn log_density(&self, theta: &[f64], x: &[f64]) -> f64 {
        self.condition(x).log_density(theta)
    }

    fn sample(&self, x: &[f64], rng: &mut dyn RngCore) -> Vec<f64> {
        self.condition(x).sample(rng)
    }

    /// A copy whose stddevs are multiplied by `scale`.
    fn dispersed(&self, scale: f64) -> Result<Box<dyn PosteriorModel>> {
        let _ = scale;
        Err(CanviError::argument(format!(
            "the {} family has no dispersion parameter",
            self.family()
        )))
    }

    /// Serializable snapshot, when the family supports checkpoints.
    fn checkpoint(&self) -> Option<ModelCheckpoint> {
        None
    }
}

/// A base model with every stddev multiplied by a constant `scale`.
///
/// `scale < 1` produces the under-dispersed, mode-seeking behaviour typical of
/// reverse-KL fits; `scale > 1` over-disperses.
pub struct DispersionScaled {
    base: Arc<dyn PosteriorModel>,
    scale: f64,
    scaled: Box<dyn PosteriorModel>,
}

impl DispersionScaled {
    pub fn new(base: Arc<dyn PosteriorModel>, scale: f64) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(CanviError::domain(format!(
                "dispersion scale must be positive, got {scale}"
            )));
        }
        let scaled = base.dispersed(scale)?;
        Ok(Self {
            base,
            scale,
            scaled,
        })
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn base(&self) -> &Arc<dyn PosteriorModel> {
        &self.base
    }
}

impl PosteriorModel for DispersionScaled {
    fn family(&self) -> &'static str {
        "dispersion_scaled"
    }

    fn theta_dim(&self) -> usize {
        self.base.theta_dim()
    }

    fn x_dim(&self) -> usize {
        self.base.x_dim()
    }

    fn condition<'a>(&'a self, x: &[f64]) -> Box<dyn ConditionalDensity + 'a> {
        self.scaled.condition(x)
    }

    fn dispersed(&self, scale: f64) -> Result<Box<dyn PosteriorModel>> {
        self.base.dispersed(self.scale * scale)
    }

    fn checkpoint(&self) -> Option<ModelCheckpoint> {
        self.scaled.checkpoint()
    }
}

/// On-disk model representation. Floats are written in shortest round-trip
/// form, so a reloaded model reproduces `log_density` bit for bit.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum ModelCheckpoint {
    Mdn(mdn::MdnCheckpoint),
    LinearGaussian(gaussian::LinearGaussianCheckpoint),
    UniformBox(uniform::UniformBoxCheckpoint),
}

impl ModelCheckpoint {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| CanviError::Parse(format!("checkpoint: {e}")))
    }

    pub fn into_model(self) -> Result<Arc<dyn PosteriorModel>> {
        Ok(match self {
            ModelCheckpoint::Mdn(c) => Arc::new(MixtureDensityNetwork::from_checkpoint(c)?),
            ModelCheckpoint::LinearGaussian(c) => {
                Arc::new(ConditionalLinearGaussian::from_checkpoint(c)?)
            }
            ModelCheckpoint::UniformBox(c) => Arc::new(UniformBox::new(c.bounds, c.x_dim)?),
        })
    }
}
