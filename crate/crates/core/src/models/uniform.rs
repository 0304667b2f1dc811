use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use super::{ConditionalDensity, ModelCheckpoint, PosteriorModel};
use crate::error::{CanviError, Result};

/// Uniform density on an axis-aligned box, ignoring `x`.
///
/// With the prior's box this is the "density equals prior" candidate; with a
/// strict sub-box it assigns zero density to part of the prior's support.
#[derive(Clone, Debug)]
pub struct UniformBox {
    bounds: Vec<(f64, f64)>,
    x_dim: usize,
    log_density: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct UniformBoxCheckpoint {
    pub bounds: Vec<(f64, f64)>,
    pub x_dim: usize,
}

impl UniformBox {
    pub fn new(bounds: Vec<(f64, f64)>, x_dim: usize) -> Result<Self> {
        if bounds.is_empty() || bounds.iter().any(|&(lo, hi)| !(lo < hi && (hi - lo).is_finite())) {
            return Err(CanviError::domain(format!("invalid box {bounds:?}")));
        }
        let log_density = -bounds.iter().map(|(lo, hi)| (hi - lo).ln()).sum::<f64>();
        Ok(Self {
            bounds,
            x_dim,
            log_density,
        })
    }

    pub fn bounds(&self) -> &[(f64, f64)] {
        &self.bounds
    }

    pub fn volume(&self) -> f64 {
        self.bounds.iter().map(|(lo, hi)| hi - lo).product()
    }
}

struct UniformConditional<'a>(&'a UniformBox);

impl ConditionalDensity for UniformConditional<'_> {
    fn log_density(&self, theta: &[f64]) -> f64 {
        let inside = theta
            .iter()
            .zip(&self.0.bounds)
            .all(|(t, &(lo, hi))| *t >= lo && *t <= hi);
        if inside {
            self.0.log_density
        } else {
            f64::NEG_INFINITY
        }
    }

    fn sample(&self, rng: &mut dyn RngCore) -> Vec<f64> {
        self.0
            .bounds
            .iter()
            .map(|&(lo, hi)| lo + (hi - lo) * rng.random::<f64>())
            .collect()
    }
}

impl PosteriorModel for UniformBox {
    fn family(&self) -> &'static str {
        "uniform_box"
    }

    fn theta_dim(&self) -> usize {
        self.bounds.len()
    }

    fn x_dim(&self) -> usize {
        self.x_dim
    }

    fn condition<'a>(&'a self, _x: &[f64]) -> Box<dyn ConditionalDensity + 'a> {
        Box::new(UniformConditional(self))
    }

    fn checkpoint(&self) -> Option<ModelCheckpoint> {
        Some(ModelCheckpoint::UniformBox(UniformBoxCheckpoint {
            bounds: self.bounds.clone(),
            x_dim: self.x_dim,
        }))
    }
}
