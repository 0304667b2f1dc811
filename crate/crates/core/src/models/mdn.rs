//! Mixture density network: a tanh MLP emitting a diagonal Gaussian mixture.
//!
//! The mixture lives on a standardized, unconstrained parameter space
//! `z = (T(theta) - shift) / scale`, where `T` is identity, `log`, or a scaled
//! logit depending on the support of each coordinate. Densities on the
//! original space include the exact Jacobian of that map.

use nalgebra::{DMatrix, DMatrixView};
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use super::{ConditionalDensity, ModelCheckpoint, PosteriorModel};
use crate::dataset::JointSample;
use crate::error::{CanviError, Result};
use crate::stats::sample_std_normal;
use crate::tasks::{Support, Task};

const HALF_LOG_TWO_PI: f64 = 0.918_938_533_204_672_7;

/// Per-coordinate bijection from the support of `theta` onto the real line.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ThetaTransform {
    Identity,
    Log,
    Logit { lo: f64, hi: f64 },
}

impl ThetaTransform {
    pub fn for_support(support: Support) -> Self {
        match support {
            Support::Unbounded => ThetaTransform::Identity,
            Support::Positive => ThetaTransform::Log,
            Support::Interval(lo, hi) => ThetaTransform::Logit { lo, hi },
        }
    }

    /// `(T(theta), log |dT/dtheta|)`, or `None` outside the open support.
    pub fn forward(self, theta: f64) -> Option<(f64, f64)> {
        match self {
            ThetaTransform::Identity => theta.is_finite().then_some((theta, 0.0)),
            ThetaTransform::Log => (theta > 0.0 && theta.is_finite()).then(|| {
                let u = theta.ln();
                (u, -u)
            }),
            ThetaTransform::Logit { lo, hi } => (theta > lo && theta < hi).then(|| {
                let a = (theta - lo).ln();
                let b = (hi - theta).ln();
                (a - b, (hi - lo).ln() - a - b)
            }),
        }
    }

    pub fn inverse(self, u: f64) -> f64 {
        match self {
            ThetaTransform::Identity => u,
            ThetaTransform::Log => u.exp(),
            ThetaTransform::Logit { lo, hi } => {
                let s = if u >= 0.0 {
                    1.0 / (1.0 + (-u).exp())
                } else {
                    let e = u.exp();
                    e / (1.0 + e)
                };
                // Keep draws in the open interval so their density stays positive.
                (lo + (hi - lo) * s).clamp(lo.next_up(), hi.next_down())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MdnArchitecture {
    pub components: usize,
    pub hidden: Vec<usize>,
}

impl Default for MdnArchitecture {
    fn default() -> Self {
        Self {
            components: 10,
            hidden: vec![64, 64],
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MdnCheckpoint {
    pub theta_dim: usize,
    pub x_dim: usize,
    pub architecture: MdnArchitecture,
    pub dispersion: f64,
    pub transforms: Vec<ThetaTransform>,
    pub theta_shift: Vec<f64>,
    pub theta_scale: Vec<f64>,
    pub x_shift: Vec<f64>,
    pub x_scale: Vec<f64>,
    pub params: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct MixtureDensityNetwork {
    theta_dim: usize,
    x_dim: usize,
    arch: MdnArchitecture,
    dispersion: f64,
    transforms: Vec<ThetaTransform>,
    theta_shift: Vec<f64>,
    theta_scale: Vec<f64>,
    x_shift: Vec<f64>,
    x_scale: Vec<f64>,
    params: Vec<f64>,
    /// `(weight offset, bias offset, fan_in, fan_out)` per layer.
    layers: Vec<(usize, usize, usize, usize)>,
}

fn layer_layout(sizes: &[usize]) -> (Vec<(usize, usize, usize, usize)>, usize) {
    let mut off = 0;
    let mut layers = Vec::with_capacity(sizes.len() - 1);
    for w in sizes.windows(2) {
        let (fan_in, fan_out) = (w[0], w[1]);
        let w_off = off;
        off += fan_in * fan_out;
        let b_off = off;
        off += fan_out;
        layers.push((w_off, b_off, fan_in, fan_out));
    }
    (layers, off)
}

fn mean_and_std(columns: impl Iterator<Item = Vec<f64>>) -> (Vec<f64>, Vec<f64>) {
    columns
        .map(|col| {
            let n = col.len() as f64;
            let mean = col.iter().sum::<f64>() / n;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let sd = var.sqrt();
            (mean, if sd > 1e-12 && sd.is_finite() { sd } else { 1.0 })
        })
        .unzip()
}

/// Log-sum-exp of a slice.
fn log_sum_exp(values: &[f64]) -> f64 {
    let m = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + values.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

impl MixtureDensityNetwork {
    /// Builds a randomly initialized network for `task`.
    ///
    /// `pilot` (draws from the joint) fixes the input and output
    /// standardization. Mixture means start as small noise around the prior
    /// mean, stddevs at the prior stddev, and mixture logits at zero.
    pub fn for_task<R: Rng + ?Sized>(
        task: &Task,
        arch: MdnArchitecture,
        pilot: &[JointSample],
        rng: &mut R,
    ) -> Result<Self> {
        let transforms = task
            .theta_support()
            .into_iter()
            .map(ThetaTransform::for_support)
            .collect();
        Self::new(task.theta_dim(), task.x_dim(), arch, transforms, pilot, rng)
    }

    pub fn new<R: Rng + ?Sized>(
        theta_dim: usize,
        x_dim: usize,
        arch: MdnArchitecture,
        transforms: Vec<ThetaTransform>,
        pilot: &[JointSample],
        rng: &mut R,
    ) -> Result<Self> {
        if arch.components == 0 || arch.hidden.iter().any(|&h| h == 0) {
            return Err(CanviError::argument(format!("invalid architecture {arch:?}")));
        }
        if transforms.len() != theta_dim {
            return Err(CanviError::argument("one transform per theta coordinate"));
        }
        if pilot.is_empty() {
            return Err(CanviError::argument("standardization needs pilot samples"));
        }
        let (x_shift, x_scale) =
            mean_and_std((0..x_dim).map(|j| pilot.iter().map(|s| s.x[j]).collect()));
        let unconstrained: Vec<Vec<f64>> = (0..theta_dim)
            .map(|j| {
                pilot
                    .iter()
                    .filter_map(|s| transforms[j].forward(s.theta[j]).map(|(u, _)| u))
                    .collect()
            })
            .collect();
        if unconstrained.iter().any(|c| c.is_empty()) {
            return Err(CanviError::argument("pilot samples fall outside the support"));
        }
        let (theta_shift, theta_scale) = mean_and_std(unconstrained.into_iter());

        let k = arch.components;
        let out_dim = k + 2 * k * theta_dim;
        let mut sizes = vec![x_dim];
        sizes.extend(&arch.hidden);
        sizes.push(out_dim);
        let (layers, n_params) = layer_layout(&sizes);
        let mut params = vec![0.0; n_params];
        let last = layers.len() - 1;
        for (l, &(w_off, b_off, fan_in, fan_out)) in layers.iter().enumerate() {
            let mut limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            if l == last {
                limit *= 0.1;
            }
            for w in &mut params[w_off..w_off + fan_in * fan_out] {
                *w = rng.random_range(-limit..limit);
            }
            if l == last {
                let means = &mut params[b_off + k..b_off + k + k * theta_dim];
                for m in means {
                    *m = rng.random_range(-0.25..0.25);
                }
            }
        }
        Ok(Self {
            theta_dim,
            x_dim,
            arch,
            dispersion: 1.0,
            transforms,
            theta_shift,
            theta_scale,
            x_shift,
            x_scale,
            params,
            layers,
        })
    }

    pub(crate) fn from_checkpoint(c: MdnCheckpoint) -> Result<Self> {
        let k = c.architecture.components;
        let mut sizes = vec![c.x_dim];
        sizes.extend(&c.architecture.hidden);
        sizes.push(k + 2 * k * c.theta_dim);
        let (layers, n_params) = layer_layout(&sizes);
        let lens_ok = c.params.len() == n_params
            && c.transforms.len() == c.theta_dim
            && c.theta_shift.len() == c.theta_dim
            && c.theta_scale.len() == c.theta_dim
            && c.x_shift.len() == c.x_dim
            && c.x_scale.len() == c.x_dim;
        if !lens_ok {
            return Err(CanviError::Parse("checkpoint arrays do not match architecture".into()));
        }
        Ok(Self {
            theta_dim: c.theta_dim,
            x_dim: c.x_dim,
            arch: c.architecture,
            dispersion: c.dispersion,
            transforms: c.transforms,
            theta_shift: c.theta_shift,
            theta_scale: c.theta_scale,
            x_shift: c.x_shift,
            x_scale: c.x_scale,
            params: c.params,
            layers,
        })
    }

    pub fn to_checkpoint(&self) -> MdnCheckpoint {
        MdnCheckpoint {
            theta_dim: self.theta_dim,
            x_dim: self.x_dim,
            architecture: self.arch.clone(),
            dispersion: self.dispersion,
            transforms: self.transforms.clone(),
            theta_shift: self.theta_shift.clone(),
            theta_scale: self.theta_scale.clone(),
            x_shift: self.x_shift.clone(),
            x_scale: self.x_scale.clone(),
            params: self.params.clone(),
        }
    }

    pub fn architecture(&self) -> &MdnArchitecture {
        &self.arch
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn transforms(&self) -> &[ThetaTransform] {
        &self.transforms
    }

    fn components(&self) -> usize {
        self.arch.components
    }

    fn standardized_inputs(&self, xs: &[&[f64]]) -> DMatrix<f64> {
        DMatrix::from_fn(xs.len(), self.x_dim, |i, j| {
            (xs[i][j] - self.x_shift[j]) / self.x_scale[j]
        })
    }

    /// Forward pass. Returns every layer's activation (input first, raw
    /// mixture parameters last), one row per input.
    fn forward(&self, input: DMatrix<f64>) -> Vec<DMatrix<f64>> {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(input);
        let last = self.layers.len() - 1;
        for (l, &(w_off, b_off, fan_in, fan_out)) in self.layers.iter().enumerate() {
            let w = DMatrixView::from_slice(&self.params[w_off..w_off + fan_in * fan_out], fan_in, fan_out);
            let mut z: DMatrix<f64> = &acts[l] * w;
            for (j, mut col) in z.column_iter_mut().enumerate() {
                col.add_scalar_mut(self.params[b_off + j]);
            }
            if l != last {
                z.apply(|v| *v = v.tanh());
            }
            acts.push(z);
        }
        acts
    }

    /// Maps `theta` to standardized space; returns `(z, log-Jacobian)`.
    fn to_standardized(&self, theta: &[f64], z: &mut [f64]) -> Option<f64> {
        let mut log_jac = 0.0;
        for j in 0..self.theta_dim {
            let (u, lj) = self.transforms[j].forward(theta[j])?;
            z[j] = (u - self.theta_shift[j]) / self.theta_scale[j];
            log_jac += lj - self.theta_scale[j].ln();
        }
        Some(log_jac)
    }

    /// Mean negative log-density of `batch` on the standardized space and its
    /// gradient with respect to every parameter.
    ///
    /// The Jacobian of the support transform does not depend on the
    /// parameters, so this gradient is also the gradient of the loss on the
    /// original space. The returned loss does include the Jacobian.
    pub fn loss_and_gradient(&self, batch: &[JointSample]) -> (f64, Vec<f64>) {
        let b = batch.len();
        let d = self.theta_dim;
        let k = self.components();
        let xs: Vec<&[f64]> = batch.iter().map(|s| s.x.as_slice()).collect();
        let acts = self.forward(self.standardized_inputs(&xs));
        let out = acts.last().expect("output layer");
        let log_disp = self.dispersion.ln();

        let mut d_out = DMatrix::<f64>::zeros(b, out.ncols());
        let mut total = 0.0;
        let mut z = vec![0.0; d];
        let mut comp = vec![0.0; k];
        for i in 0..b {
            let log_jac = match self.to_standardized(&batch[i].theta, &mut z) {
                Some(v) => v,
                None => return (f64::INFINITY, vec![f64::NAN; self.params.len()]),
            };
            let logits: Vec<f64> = (0..k).map(|c| out[(i, c)]).collect();
            let log_norm = log_sum_exp(&logits);
            for c in 0..k {
                let mut a = logits[c] - log_norm;
                for j in 0..d {
                    let mu = out[(i, k + c * d + j)];
                    let ls = out[(i, k + k * d + c * d + j)] + log_disp;
                    let r = (z[j] - mu) * (-ls).exp();
                    a += -0.5 * r * r - ls - HALF_LOG_TWO_PI;
                }
                comp[c] = a;
            }
            let log_p = log_sum_exp(&comp);
            total += -(log_p + log_jac);
            // d(-log_p)/d(out) scaled by 1/b
            let scale = -1.0 / b as f64;
            for c in 0..k {
                let resp = (comp[c] - log_p).exp();
                let weight = (logits[c] - log_norm).exp();
                d_out[(i, c)] = scale * (resp - weight);
                for j in 0..d {
                    let mu = out[(i, k + c * d + j)];
                    let ls = out[(i, k + k * d + c * d + j)] + log_disp;
                    let inv_sigma = (-ls).exp();
                    let r = (z[j] - mu) * inv_sigma;
                    d_out[(i, k + c * d + j)] = scale * resp * r * inv_sigma;
                    d_out[(i, k + k * d + c * d + j)] = scale * resp * (r * r - 1.0);
                }
            }
        }

        let mut grad = vec![0.0; self.params.len()];
        let mut delta = d_out;
        for l in (0..self.layers.len()).rev() {
            let (w_off, b_off, fan_in, fan_out) = self.layers[l];
            let g_w = acts[l].transpose() * &delta;
            grad[w_off..w_off + fan_in * fan_out].copy_from_slice(g_w.as_slice());
            for (j, col) in delta.column_iter().enumerate() {
                grad[b_off + j] = col.sum();
            }
            if l > 0 {
                let w = DMatrixView::from_slice(&self.params[w_off..w_off + fan_in * fan_out], fan_in, fan_out);
                let mut back = delta * w.transpose();
                // tanh'(.) = 1 - h^2 on the previous hidden activation
                back.zip_apply(&acts[l], |g, h| *g *= 1.0 - h * h);
                delta = back;
            }
        }
        (total / b as f64, grad)
    }

    /// Conditional mixtures for a batch of observations.
    pub fn condition_batch(&self, xs: &[&[f64]]) -> Vec<MixtureConditional<'_>> {
        let d = self.theta_dim;
        let k = self.components();
        let acts = self.forward(self.standardized_inputs(xs));
        let out = acts.last().expect("output layer");
        let log_disp = self.dispersion.ln();
        (0..xs.len())
            .map(|i| {
                let logits: Vec<f64> = (0..k).map(|c| out[(i, c)]).collect();
                let log_norm = log_sum_exp(&logits);
                let log_weights: Vec<f64> = logits.iter().map(|l| l - log_norm).collect();
                let means: Vec<f64> = (0..k * d).map(|m| out[(i, k + m)]).collect();
                let log_sigmas: Vec<f64> =
                    (0..k * d).map(|m| out[(i, k + k * d + m)] + log_disp).collect();
                MixtureConditional {
                    model: self,
                    cumulative: log_weights
                        .iter()
                        .scan(0.0, |acc, lw| {
                            *acc += lw.exp();
                            Some(*acc)
                        })
                        .collect(),
                    log_weights,
                    means,
                    inv_sigmas: log_sigmas.iter().map(|ls| (-ls).exp()).collect(),
                    log_sigmas,
                }
            })
            .collect()
    }

    /// Mixture weights, means and stddevs on the standardized space.
    pub fn mixture_parameters(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let c = self.condition_batch(&[x]).pop().expect("one row");
        (
            c.log_weights.iter().map(|v| v.exp()).collect(),
            c.means.clone(),
            c.log_sigmas.iter().map(|v| v.exp()).collect(),
        )
    }
}

/// `q(theta | x)` of a network for one observation.
pub struct MixtureConditional<'a> {
    model: &'a MixtureDensityNetwork,
    log_weights: Vec<f64>,
    cumulative: Vec<f64>,
    means: Vec<f64>,
    log_sigmas: Vec<f64>,
    inv_sigmas: Vec<f64>,
}

impl ConditionalDensity for MixtureConditional<'_> {
    fn log_density(&self, theta: &[f64]) -> f64 {
        let d = self.model.theta_dim;
        let mut z = [0.0; 16];
        let mut z_heap;
        let z: &mut [f64] = if d <= z.len() {
            &mut z[..d]
        } else {
            z_heap = vec![0.0; d];
            &mut z_heap
        };
        let Some(log_jac) = self.model.to_standardized(theta, z) else {
            return f64::NEG_INFINITY;
        };
        let mut best = f64::NEG_INFINITY;
        let mut terms = [0.0; 64];
        let mut terms_heap;
        let k = self.log_weights.len();
        let terms: &mut [f64] = if k <= terms.len() {
            &mut terms[..k]
        } else {
            terms_heap = vec![0.0; k];
            &mut terms_heap
        };
        for c in 0..k {
            let mut a = self.log_weights[c];
            for j in 0..d {
                let m = c * d + j;
                let r = (z[j] - self.means[m]) * self.inv_sigmas[m];
                a += -0.5 * r * r - self.log_sigmas[m];
            }
            terms[c] = a;
            best = best.max(a);
        }
        if best == f64::NEG_INFINITY {
            return best;
        }
        let sum: f64 = terms.iter().map(|t| (t - best).exp()).sum();
        best + sum.ln() - d as f64 * HALF_LOG_TWO_PI + log_jac
    }

    fn sample(&self, rng: &mut dyn RngCore) -> Vec<f64> {
        let d = self.model.theta_dim;
        let total = *self.cumulative.last().expect("at least one component");
        let u = rng.random::<f64>() * total;
        let c = self
            .cumulative
            .iter()
            .position(|&cum| u < cum)
            .unwrap_or(self.cumulative.len() - 1);
        (0..d)
            .map(|j| {
                let m = c * d + j;
                let z = self.means[m] + self.log_sigmas[m].exp() * sample_std_normal(rng);
                let u = self.model.theta_shift[j] + self.model.theta_scale[j] * z;
                self.model.transforms[j].inverse(u)
            })
            .collect()
    }
}

impl PosteriorModel for MixtureDensityNetwork {
    fn family(&self) -> &'static str {
        "mdn"
    }

    fn theta_dim(&self) -> usize {
        self.theta_dim
    }

    fn x_dim(&self) -> usize {
        self.x_dim
    }

    fn condition<'a>(&'a self, x: &[f64]) -> Box<dyn ConditionalDensity + 'a> {
        Box::new(self.condition_batch(&[x]).pop().expect("one row"))
    }

    fn dispersed(&self, scale: f64) -> Result<Box<dyn PosteriorModel>> {
        let mut m = self.clone();
        m.dispersion *= scale;
        Ok(Box::new(m))
    }

    fn checkpoint(&self) -> Option<ModelCheckpoint> {
        Some(ModelCheckpoint::Mdn(self.to_checkpoint()))
    }
}
