//! Forward-KL amortized training: minimize `E_{p(theta, x)}[-log q(theta | x)]`
//! with Adam on fresh joint batches.

use serde::{Deserialize, Serialize};

use super::MixtureDensityNetwork;
use crate::dataset::JointSample;
use crate::error::{CanviError, Result};
use crate::stats::RngStream;
use crate::tasks::Task;

const MAX_REDRAWS: u64 = 1000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FaviSettings {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Checkpoint callback cadence in steps; 0 means only the first and last.
    pub checkpoint_every: usize,
}

impl Default for FaviSettings {
    fn default() -> Self {
        Self {
            steps: 5000,
            batch: 256,
            lr: 1e-3,
            checkpoint_every: 500,
        }
    }
}

/// `n` joint draws where a failed simulation is replaced by a redraw from a
/// child stream, so ODE blow-ups do not abort training.
pub fn draw_joint_tolerant(task: &Task, n: usize, stream: &RngStream) -> Result<Vec<JointSample>> {
    let draw = |i: usize| {
        let base = stream.derive(i as u64);
        let mut last = None;
        for attempt in 0..MAX_REDRAWS {
            let mut rng = if attempt == 0 { base.clone() } else { base.derive(attempt) };
            match task.sample_one(&mut rng) {
                Ok(s) => return Ok(s),
                Err(e) => last = Some(e),
            }
        }
        Err(last.expect("at least one attempt"))
    };
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..n).into_par_iter().map(draw).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(draw).collect()
    }
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = Self::BETA1 * self.m[i] + (1.0 - Self::BETA1) * grad[i];
            self.v[i] = Self::BETA2 * self.v[i] + (1.0 - Self::BETA2) * grad[i] * grad[i];
            params[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + Self::EPS);
        }
    }
}

/// Trains `model` in place and returns the per-step loss trace.
///
/// Step `s` draws its batch from child stream `s` of `stream`. `on_checkpoint`
/// sees the model before the first step, every `checkpoint_every` steps, and
/// after the last step.
pub fn train_favi<F>(
    model: &mut MixtureDensityNetwork,
    task: &Task,
    settings: &FaviSettings,
    stream: &RngStream,
    mut on_checkpoint: F,
) -> Result<Vec<f64>>
where
    F: FnMut(usize, &MixtureDensityNetwork) -> Result<()>,
{
    if !(settings.lr > 0.0 && settings.lr.is_finite()) {
        return Err(CanviError::domain(format!("learning rate must be positive, got {}", settings.lr)));
    }
    if settings.batch == 0 {
        return Err(CanviError::argument("batch size must be at least 1"));
    }
    on_checkpoint(0, model)?;
    let mut adam = Adam::new(model.params().len());
    let mut losses = Vec::with_capacity(settings.steps);
    for step in 0..settings.steps {
        let batch = draw_joint_tolerant(task, settings.batch, &stream.derive(step as u64))?;
        let (loss, grad) = model.loss_and_gradient(&batch);
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(CanviError::Training { step, loss });
        }
        adam.step(model.params_mut(), &grad, settings.lr);
        losses.push(loss);
        let done = step + 1;
        let cadence = settings.checkpoint_every > 0 && done % settings.checkpoint_every == 0;
        if cadence || done == settings.steps {
            on_checkpoint(done, model)?;
        }
    }
    Ok(losses)
}

/// Trailing moving average over `window` entries.
pub fn smoothed(losses: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    losses
        .windows(window.min(losses.len().max(1)))
        .map(|w| w.iter().sum::<f64>() / w.len() as f64)
        .collect()
}
