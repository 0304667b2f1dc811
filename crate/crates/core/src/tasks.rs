//! Benchmark generative tasks: a prior over `theta` plus a forward model for `x`.
//!
//! Tasks with frozen random structure (SLCP distractors, the GLM stimulus) draw
//! it once from a dedicated stream keyed by the construction seed.

use std::f64::consts::{FRAC_PI_2, PI, SQRT_2};
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetRole, JointDataset, JointSample};
use crate::error::{CanviError, Result};
use crate::stats::{
    sample_binomial, sample_lognormal, sample_std_normal, sample_uniform, RngStream,
};

/// Stream id reserved for frozen task structure.
const CONSTRUCTION_STREAM: u64 = 0x7461_736b;

/// Per-dimension support of `theta`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Support {
    Unbounded,
    Positive,
    Interval(f64, f64),
}

impl Support {
    pub fn contains(self, v: f64) -> bool {
        match self {
            Support::Unbounded => v.is_finite(),
            Support::Positive => v > 0.0 && v.is_finite(),
            Support::Interval(lo, hi) => v >= lo && v <= hi,
        }
    }

    pub fn bounds(self) -> Option<(f64, f64)> {
        match self {
            Support::Interval(lo, hi) => Some((lo, hi)),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskName {
    Gaussian,
    GaussianLinear,
    GaussianLinearUniform,
    SlcpDistractors,
    BernoulliGlmRaw,
    GaussianMixture,
    TwoMoons,
    Sir,
    LotkaVolterra,
    Arch,
}

impl TaskName {
    pub const ALL: [TaskName; 10] = [
        TaskName::Gaussian,
        TaskName::GaussianLinear,
        TaskName::GaussianLinearUniform,
        TaskName::SlcpDistractors,
        TaskName::BernoulliGlmRaw,
        TaskName::GaussianMixture,
        TaskName::TwoMoons,
        TaskName::Sir,
        TaskName::LotkaVolterra,
        TaskName::Arch,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskName::Gaussian => "gaussian",
            TaskName::GaussianLinear => "gaussian_linear",
            TaskName::GaussianLinearUniform => "gaussian_linear_uniform",
            TaskName::SlcpDistractors => "slcp_distractors",
            TaskName::BernoulliGlmRaw => "bernoulli_glm_raw",
            TaskName::GaussianMixture => "gaussian_mixture",
            TaskName::TwoMoons => "two_moons",
            TaskName::Sir => "sir",
            TaskName::LotkaVolterra => "lotka_volterra",
            TaskName::Arch => "arch",
        }
    }
}

impl fmt::Display for TaskName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskName {
    type Err = CanviError;

    fn from_str(s: &str) -> Result<Self> {
        TaskName::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| {
                let known: Vec<_> = TaskName::ALL.iter().map(|t| t.as_str()).collect();
                CanviError::argument(format!(
                    "unknown task '{s}' (known: {})",
                    known.join(", ")
                ))
            })
    }
}

/// Settings for the SIR epidemic simulator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SirSettings {
    pub population: f64,
    pub initial_infected: f64,
    pub horizon: f64,
    pub step: f64,
    pub trials: u64,
}

impl Default for SirSettings {
    fn default() -> Self {
        Self {
            population: 1_000_000.0,
            initial_infected: 1.0,
            horizon: 160.0,
            step: 0.1,
            trials: 1000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LotkaVolterraSettings {
    pub initial: [f64; 2],
    pub horizon: f64,
    pub step: f64,
    pub noise_sigma: f64,
}

impl Default for LotkaVolterraSettings {
    fn default() -> Self {
        Self {
            initial: [30.0, 1.0],
            horizon: 20.0,
            step: 0.1,
            noise_sigma: 0.1,
        }
    }
}

const OBSERVATION_POINTS: usize = 10;
const ARCH_LENGTH: usize = 100;
const GLM_TAPS: usize = 9;
const GLM_LENGTH: usize = 100;
const SLCP_DISTRACTOR_COMPONENTS: usize = 20;
const SLCP_LEN: usize = 100;

#[derive(Clone, Debug)]
struct SlcpFrozen {
    means: Vec<[f64; 2]>,
    /// Lower-triangular scale factors `[l11, l21, l22]`.
    scales: Vec<[f64; 3]>,
    /// `x[j] = y[permutation[j]]`.
    permutation: Vec<usize>,
}

#[derive(Clone, Debug)]
struct GlmFrozen {
    stimulus: Vec<f64>,
    /// Lower-triangular smoothness factor `F`, row-major.
    factor: Vec<[f64; GLM_TAPS]>,
}

#[derive(Clone, Debug)]
enum Frozen {
    None,
    Slcp(SlcpFrozen),
    Glm(GlmFrozen),
}

/// A benchmark task, optionally restricted to a subset of `theta` coordinates.
///
/// A marginal task simulates with the full parameter vector but exposes only
/// the selected coordinates in its samples.
#[derive(Clone, Debug)]
pub struct Task {
    name: TaskName,
    rho: f64,
    construction_seed: u64,
    marginal: Option<Vec<usize>>,
    sir: SirSettings,
    lotka_volterra: LotkaVolterraSettings,
    frozen: Frozen,
}

impl Task {
    pub fn new(name: TaskName) -> Self {
        Self::with_construction_seed(name, 0)
    }

    pub fn with_construction_seed(name: TaskName, construction_seed: u64) -> Self {
        let mut rng = RngStream::new(construction_seed, CONSTRUCTION_STREAM);
        let frozen = match name {
            TaskName::SlcpDistractors => Frozen::Slcp(SlcpFrozen::draw(&mut rng)),
            TaskName::BernoulliGlmRaw => Frozen::Glm(GlmFrozen::draw(&mut rng)),
            _ => Frozen::None,
        };
        Self {
            name,
            rho: 0.3,
            construction_seed,
            marginal: None,
            sir: SirSettings::default(),
            lotka_volterra: LotkaVolterraSettings::default(),
            frozen,
        }
    }

    /// The standard bivariate Gaussian pair with correlation `rho`.
    pub fn gaussian(rho: f64) -> Result<Self> {
        if !(rho.abs() < 1.0) {
            return Err(CanviError::domain(format!("|rho| must be < 1, got {rho}")));
        }
        let mut task = Self::new(TaskName::Gaussian);
        task.rho = rho;
        Ok(task)
    }

    pub fn with_marginal(mut self, dims: Vec<usize>) -> Result<Self> {
        let full = self.full_theta_dim();
        if dims.is_empty() || dims.iter().any(|&d| d >= full) {
            return Err(CanviError::argument(format!(
                "marginal dims {dims:?} invalid for theta_dim {full}"
            )));
        }
        let mut seen = dims.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != dims.len() {
            return Err(CanviError::argument("marginal dims must be distinct"));
        }
        self.marginal = Some(dims);
        Ok(self)
    }

    pub fn with_sir_settings(mut self, settings: SirSettings) -> Self {
        self.sir = settings;
        self
    }

    pub fn name(&self) -> TaskName {
        self.name
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn construction_seed(&self) -> u64 {
        self.construction_seed
    }

    pub fn marginal(&self) -> Option<&[usize]> {
        self.marginal.as_deref()
    }

    pub fn sir_settings(&self) -> &SirSettings {
        &self.sir
    }

    pub fn full_theta_dim(&self) -> usize {
        match self.name {
            TaskName::Gaussian => 1,
            TaskName::GaussianLinear | TaskName::GaussianLinearUniform => 10,
            TaskName::SlcpDistractors => 5,
            TaskName::BernoulliGlmRaw => 10,
            TaskName::GaussianMixture | TaskName::TwoMoons | TaskName::Sir | TaskName::Arch => 2,
            TaskName::LotkaVolterra => 4,
        }
    }

    pub fn theta_dim(&self) -> usize {
        self.marginal
            .as_ref()
            .map_or_else(|| self.full_theta_dim(), Vec::len)
    }

    pub fn x_dim(&self) -> usize {
        match self.name {
            TaskName::Gaussian => 1,
            TaskName::GaussianLinear | TaskName::GaussianLinearUniform => 10,
            TaskName::SlcpDistractors => SLCP_LEN,
            TaskName::BernoulliGlmRaw => GLM_LENGTH,
            TaskName::GaussianMixture | TaskName::TwoMoons => 2,
            TaskName::Sir => OBSERVATION_POINTS,
            TaskName::LotkaVolterra => 2 * OBSERVATION_POINTS,
            TaskName::Arch => ARCH_LENGTH,
        }
    }

    fn full_support(&self) -> Vec<Support> {
        match self.name {
            TaskName::Gaussian | TaskName::GaussianLinear | TaskName::BernoulliGlmRaw => {
                vec![Support::Unbounded; self.full_theta_dim()]
            }
            TaskName::GaussianLinearUniform | TaskName::TwoMoons => {
                vec![Support::Interval(-1.0, 1.0); self.full_theta_dim()]
            }
            TaskName::SlcpDistractors => vec![Support::Interval(-3.0, 3.0); 5],
            TaskName::GaussianMixture => vec![Support::Interval(-10.0, 10.0); 2],
            TaskName::Sir => vec![Support::Positive; 2],
            TaskName::LotkaVolterra => vec![Support::Positive; 4],
            TaskName::Arch => vec![Support::Interval(-1.0, 1.0), Support::Interval(0.0, 1.0)],
        }
    }

    /// Support of the (possibly marginal) `theta` this task exposes.
    pub fn theta_support(&self) -> Vec<Support> {
        let full = self.full_support();
        match &self.marginal {
            Some(dims) => dims.iter().map(|&d| full[d]).collect(),
            None => full,
        }
    }

    /// Box volume of the support, when every coordinate is bounded.
    pub fn support_volume(&self) -> Option<f64> {
        self.theta_support()
            .iter()
            .map(|s| s.bounds().map(|(lo, hi)| hi - lo))
            .product()
    }

    /// Prior mean and stddev per exposed coordinate.
    pub fn prior_moments(&self) -> Vec<(f64, f64)> {
        let full: Vec<(f64, f64)> = match self.name {
            TaskName::Gaussian => vec![(0.0, 1.0)],
            TaskName::GaussianLinear => vec![(0.0, 0.1f64.sqrt()); 10],
            TaskName::BernoulliGlmRaw => {
                let mut m = vec![(0.0, 2.0f64.sqrt())];
                let cov = glm_prior_covariance_diag(&self.glm().factor);
                m.extend(cov.iter().map(|&v| (0.0, v.sqrt())));
                m
            }
            TaskName::Sir => vec![lognormal_moments(0.4f64.ln(), 0.5), lognormal_moments((0.125f64).ln(), 0.2)],
            TaskName::LotkaVolterra => vec![
                lognormal_moments(-0.125, 0.5),
                lognormal_moments(-3.0, 0.5),
                lognormal_moments(-0.125, 0.5),
                lognormal_moments(-3.0, 0.5),
            ],
            _ => self
                .full_support()
                .iter()
                .map(|s| {
                    let (lo, hi) = s.bounds().expect("uniform prior");
                    (0.5 * (lo + hi), (hi - lo) / 12f64.sqrt())
                })
                .collect(),
        };
        match &self.marginal {
            Some(dims) => dims.iter().map(|&d| full[d]).collect(),
            None => full,
        }
    }

    fn glm(&self) -> &GlmFrozen {
        match &self.frozen {
            Frozen::Glm(g) => g,
            _ => unreachable!("GLM structure requested for {}", self.name),
        }
    }

    fn slcp(&self) -> &SlcpFrozen {
        match &self.frozen {
            Frozen::Slcp(s) => s,
            _ => unreachable!("SLCP structure requested for {}", self.name),
        }
    }

    /// Inverse of the frozen SLCP reordering: `y[i] = x[inverse[i]]`.
    pub fn slcp_inverse_permutation(&self) -> Option<Vec<usize>> {
        match &self.frozen {
            Frozen::Slcp(s) => {
                let mut inv = vec![0; s.permutation.len()];
                for (j, &i) in s.permutation.iter().enumerate() {
                    inv[i] = j;
                }
                Some(inv)
            }
            _ => None,
        }
    }

    pub fn glm_stimulus(&self) -> Option<&[f64]> {
        match &self.frozen {
            Frozen::Glm(g) => Some(&g.stimulus),
            _ => None,
        }
    }

    /// Draws the full parameter vector from the prior.
    pub fn sample_prior<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        match self.name {
            TaskName::Gaussian => vec![sample_std_normal(rng)],
            TaskName::GaussianLinear => {
                let sd = 0.1f64.sqrt();
                (0..10).map(|_| sd * sample_std_normal(rng)).collect()
            }
            TaskName::BernoulliGlmRaw => {
                let beta = 2f64.sqrt() * sample_std_normal(rng);
                let z: Vec<f64> = (0..GLM_TAPS).map(|_| sample_std_normal(rng)).collect();
                let f = forward_substitute(&self.glm().factor, &z);
                std::iter::once(beta).chain(f).collect()
            }
            TaskName::Sir => vec![
                sample_lognormal(rng, 0.4f64.ln(), 0.5).expect("valid prior"),
                sample_lognormal(rng, 0.125f64.ln(), 0.2).expect("valid prior"),
            ],
            TaskName::LotkaVolterra => [(-0.125, 0.5), (-3.0, 0.5), (-0.125, 0.5), (-3.0, 0.5)]
                .iter()
                .map(|&(mu, s)| sample_lognormal(rng, mu, s).expect("valid prior"))
                .collect(),
            _ => self
                .full_support()
                .iter()
                .map(|s| {
                    let (lo, hi) = s.bounds().expect("uniform prior");
                    sample_uniform(rng, lo, hi).expect("valid bounds")
                })
                .collect(),
        }
    }

    /// Draws `x ~ P(X | theta)` for a full parameter vector.
    pub fn simulate<R: Rng + ?Sized>(&self, theta: &[f64], rng: &mut R) -> Result<Vec<f64>> {
        if theta.len() != self.full_theta_dim() {
            return Err(CanviError::argument(format!(
                "{} expects theta of length {}, got {}",
                self.name,
                self.full_theta_dim(),
                theta.len()
            )));
        }
        let x = match self.name {
            TaskName::Gaussian => {
                let rho = self.rho;
                vec![rho * theta[0] + (1.0 - rho * rho).sqrt() * sample_std_normal(rng)]
            }
            TaskName::GaussianLinear | TaskName::GaussianLinearUniform => {
                let sd = 0.1f64.sqrt();
                theta.iter().map(|t| t + sd * sample_std_normal(rng)).collect()
            }
            TaskName::SlcpDistractors => self.simulate_slcp(theta, rng),
            TaskName::BernoulliGlmRaw => self.simulate_glm(theta, rng),
            TaskName::GaussianMixture => {
                let sd = if rng.random::<f64>() < 0.5 { 1.0 } else { 0.1 };
                theta.iter().map(|t| t + sd * sample_std_normal(rng)).collect()
            }
            TaskName::TwoMoons => {
                let a = sample_uniform(rng, -FRAC_PI_2, FRAC_PI_2)?;
                let r = 0.1 + 0.01 * sample_std_normal(rng);
                two_moons_observation(theta, a, r).to_vec()
            }
            TaskName::Sir => self.simulate_sir(theta, rng)?,
            TaskName::LotkaVolterra => self.simulate_lotka_volterra(theta, rng)?,
            TaskName::Arch => {
                let xi: Vec<f64> = (0..ARCH_LENGTH).map(|_| sample_std_normal(rng)).collect();
                arch_series(theta, &xi)
            }
        };
        if x.iter().any(|v| !v.is_finite()) {
            return Err(CanviError::Simulation {
                theta: theta.to_vec(),
                reason: "non-finite observation".into(),
            });
        }
        Ok(x)
    }

    fn project(&self, theta: Vec<f64>) -> Vec<f64> {
        match &self.marginal {
            Some(dims) => dims.iter().map(|&d| theta[d]).collect(),
            None => theta,
        }
    }

    /// One joint draw `(theta, x)`, with `theta` projected to the exposed coordinates.
    pub fn sample_one<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<JointSample> {
        let theta = self.sample_prior(rng);
        let x = self.simulate(&theta, rng)?;
        Ok(JointSample {
            theta: self.project(theta),
            x,
        })
    }

    /// `n` i.i.d. joint draws. Sample `i` uses child stream `i` of `stream`, so
    /// the result does not depend on the number of worker threads.
    pub fn sample_joint(&self, n: usize, stream: &RngStream, role: DatasetRole) -> Result<JointDataset> {
        if n == 0 {
            return Err(CanviError::argument("dataset size must be at least 1"));
        }
        let draw = |i: usize| {
            let mut rng = stream.derive(i as u64);
            self.sample_one(&mut rng)
        };
        #[cfg(feature = "parallel")]
        let samples: Result<Vec<JointSample>> = {
            use rayon::prelude::*;
            (0..n).into_par_iter().map(draw).collect()
        };
        #[cfg(not(feature = "parallel"))]
        let samples: Result<Vec<JointSample>> = (0..n).map(draw).collect();

        JointDataset::new(
            self.name.as_str(),
            role,
            stream.seed(),
            stream.stream_id(),
            self.theta_dim(),
            self.x_dim(),
            samples?,
        )
    }

    fn simulate_slcp<R: Rng + ?Sized>(&self, theta: &[f64], rng: &mut R) -> Vec<f64> {
        let frozen = self.slcp();
        let mut y = Vec::with_capacity(SLCP_LEN);
        let s1 = theta[2].powi(2);
        let s2 = theta[3].powi(2);
        let corr = theta[4].tanh();
        for _ in 0..4 {
            let z1 = sample_std_normal(rng);
            let z2 = sample_std_normal(rng);
            y.push(theta[0] + s1 * z1);
            y.push(theta[1] + s2 * (corr * z1 + (1.0 - corr * corr).sqrt() * z2));
        }
        while y.len() < SLCP_LEN {
            let k = rng.random_range(0..SLCP_DISTRACTOR_COMPONENTS);
            let mean = frozen.means[k];
            let [l11, l21, l22] = frozen.scales[k];
            let z1 = sample_std_normal(rng);
            let z2 = sample_std_normal(rng);
            // Student-t with 2 degrees of freedom: scale by sqrt(2 / chi2_2).
            let chi2: f64 = -2.0 * (1.0 - rng.random::<f64>()).ln();
            let w = (2.0 / chi2).sqrt();
            y.push(mean[0] + w * l11 * z1);
            y.push(mean[1] + w * (l21 * z1 + l22 * z2));
        }
        frozen.permutation.iter().map(|&i| y[i]).collect()
    }

    fn simulate_glm<R: Rng + ?Sized>(&self, theta: &[f64], rng: &mut R) -> Vec<f64> {
        let glm = self.glm();
        let (beta, f) = (theta[0], &theta[1..]);
        (0..GLM_LENGTH)
            .map(|i| {
                let drive: f64 = (0..GLM_TAPS)
                    .filter(|&lag| lag <= i)
                    .map(|lag| f[lag] * glm.stimulus[i - lag])
                    .sum();
                let p = 1.0 / (1.0 + (-(drive + beta)).exp());
                if rng.random::<f64>() < p {
                    1.0
                } else {
                    0.0
                }
            })
            .collect()
    }

    /// The SIR trajectory `(S, I, R)` at every integration step, including t = 0.
    pub fn sir_trajectory(&self, beta: f64, gamma: f64) -> Result<Vec<[f64; 3]>> {
        let s = &self.sir;
        let n = s.population;
        let y0 = [n - s.initial_infected, s.initial_infected, 0.0];
        let steps = (s.horizon / s.step).round() as usize;
        let deriv = |y: &[f64; 3]| {
            let infection = beta * y[0] * y[1] / n;
            let recovery = gamma * y[1];
            [-infection, infection - recovery, recovery]
        };
        let mut out = Vec::with_capacity(steps + 1);
        out.push(y0);
        integrate_rk4(y0, s.step, steps, deriv, |_, y| {
            if y.iter().any(|v| !v.is_finite()) {
                return Err(CanviError::Simulation {
                    theta: vec![beta, gamma],
                    reason: "non-finite SIR state".into(),
                });
            }
            out.push(*y);
            Ok(())
        })?;
        Ok(out)
    }

    fn simulate_sir<R: Rng + ?Sized>(&self, theta: &[f64], rng: &mut R) -> Result<Vec<f64>> {
        let trajectory = self.sir_trajectory(theta[0], theta[1])?;
        let steps = trajectory.len() - 1;
        let n = self.sir.population;
        (1..=OBSERVATION_POINTS)
            .map(|k| {
                let state = trajectory[k * steps / OBSERVATION_POINTS];
                let p = (state[1] / n).clamp(0.0, 1.0);
                Ok(sample_binomial(rng, self.sir.trials, p)? as f64)
            })
            .collect()
    }

    /// Predator/prey states at the 10 observation times.
    pub fn lotka_volterra_states(&self, theta: &[f64]) -> Result<Vec<[f64; 2]>> {
        let s = &self.lotka_volterra;
        let (a, b, c, d) = (theta[0], theta[1], theta[2], theta[3]);
        let steps = (s.horizon / s.step).round() as usize;
        let every = steps / OBSERVATION_POINTS;
        let deriv = |y: &[f64; 2]| [a * y[0] - b * y[0] * y[1], -c * y[1] + d * y[0] * y[1]];
        let mut obs = Vec::with_capacity(OBSERVATION_POINTS);
        integrate_rk4(s.initial, s.step, steps, deriv, |step, y| {
            if !(y[0] > 0.0 && y[1] > 0.0 && y[0].is_finite() && y[1].is_finite()) {
                return Err(CanviError::Simulation {
                    theta: theta.to_vec(),
                    reason: format!("Lotka-Volterra state left the positive orthant: {y:?}"),
                });
            }
            if step % every == 0 {
                obs.push(*y);
            }
            Ok(())
        })?;
        Ok(obs)
    }

    fn simulate_lotka_volterra<R: Rng + ?Sized>(&self, theta: &[f64], rng: &mut R) -> Result<Vec<f64>> {
        let states = self.lotka_volterra_states(theta)?;
        let sigma = self.lotka_volterra.noise_sigma;
        let mut x = Vec::with_capacity(2 * OBSERVATION_POINTS);
        for species in 0..2 {
            for state in &states {
                x.push(sample_lognormal(rng, state[species].ln(), sigma)?);
            }
        }
        Ok(x)
    }
}

fn lognormal_moments(mu: f64, sigma: f64) -> (f64, f64) {
    let mean = (mu + 0.5 * sigma * sigma).exp();
    let var = ((sigma * sigma).exp() - 1.0) * (2.0 * mu + sigma * sigma).exp();
    (mean, var.sqrt())
}

/// Classical fixed-step RK4. `visit` sees the state after each step (1-based).
pub fn integrate_rk4<const N: usize>(
    y0: [f64; N],
    dt: f64,
    steps: usize,
    deriv: impl Fn(&[f64; N]) -> [f64; N],
    mut visit: impl FnMut(usize, &[f64; N]) -> Result<()>,
) -> Result<[f64; N]> {
    let mut y = y0;
    let axpy = |y: &[f64; N], k: &[f64; N], h: f64| {
        let mut out = *y;
        for i in 0..N {
            out[i] += h * k[i];
        }
        out
    };
    for step in 1..=steps {
        let k1 = deriv(&y);
        let k2 = deriv(&axpy(&y, &k1, 0.5 * dt));
        let k3 = deriv(&axpy(&y, &k2, 0.5 * dt));
        let k4 = deriv(&axpy(&y, &k3, dt));
        for i in 0..N {
            y[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        visit(step, &y)?;
    }
    Ok(y)
}

/// Two Moons observation for fixed angle `a` and radius `r`.
pub fn two_moons_observation(theta: &[f64], a: f64, r: f64) -> [f64; 2] {
    [
        r * a.cos() + 0.25 - (theta[0] + theta[1]).abs() / SQRT_2,
        r * a.sin() + (-theta[0] + theta[1]) / SQRT_2,
    ]
}

/// ARCH(1) series driven by the innovations `xi`, with `y0 = e0 = 0`.
pub fn arch_series(theta: &[f64], xi: &[f64]) -> Vec<f64> {
    let (mut y_prev, mut e_prev) = (0.0, 0.0);
    xi.iter()
        .map(|&z| {
            let e = z * (0.2 + theta[1] * e_prev * e_prev).sqrt();
            let y = theta[0] * y_prev + e;
            y_prev = y;
            e_prev = e;
            y
        })
        .collect()
}

/// Exact `log P(y_{1:T} | theta)` for the ARCH(1) model.
pub fn arch_log_likelihood(theta: &[f64], y: &[f64]) -> Result<f64> {
    if theta.len() != 2 {
        return Err(CanviError::argument("ARCH theta has two coordinates"));
    }
    let (mut y_prev, mut e_prev) = (0.0, 0.0);
    let mut total = 0.0;
    for &yt in y {
        let var = 0.2 + theta[1] * e_prev * e_prev;
        if !(var > 0.0) {
            return Err(CanviError::domain(format!(
                "non-positive ARCH conditional variance {var} at theta = {theta:?}"
            )));
        }
        let e = yt - theta[0] * y_prev;
        total += -0.5 * (2.0 * PI * var).ln() - 0.5 * e * e / var;
        y_prev = yt;
        e_prev = e;
    }
    Ok(total)
}

fn forward_substitute(factor: &[[f64; GLM_TAPS]], rhs: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; rhs.len()];
    for i in 0..rhs.len() {
        let partial: f64 = (0..i).map(|j| factor[i][j] * out[j]).sum();
        out[i] = (rhs[i] - partial) / factor[i][i];
    }
    out
}

/// Diagonal of `(F^T F)^{-1}`, via columns of `F^{-1}`.
fn glm_prior_covariance_diag(factor: &[[f64; GLM_TAPS]]) -> Vec<f64> {
    let n = factor.len();
    let mut inv_cols = Vec::with_capacity(n);
    for c in 0..n {
        let mut e = vec![0.0; n];
        e[c] = 1.0;
        inv_cols.push(forward_substitute(factor, &e));
    }
    // (F^{-1} F^{-T})_{ii} = sum_c (F^{-1})_{ic}^2
    (0..n)
        .map(|i| inv_cols.iter().map(|col| col[i] * col[i]).sum())
        .collect()
}

impl SlcpFrozen {
    fn draw<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let mut means = Vec::with_capacity(SLCP_DISTRACTOR_COMPONENTS);
        let mut scales = Vec::with_capacity(SLCP_DISTRACTOR_COMPONENTS);
        for _ in 0..SLCP_DISTRACTOR_COMPONENTS {
            means.push([15.0 * sample_std_normal(rng), 15.0 * sample_std_normal(rng)]);
            let d1 = 3.0 * sample_std_normal(rng).exp();
            let d2 = 3.0 * sample_std_normal(rng).exp();
            let off = 3.0 * sample_std_normal(rng);
            scales.push([d1, off, d2]);
        }
        let mut permutation: Vec<usize> = (0..SLCP_LEN).collect();
        for i in (1..SLCP_LEN).rev() {
            let j = rng.random_range(0..=i);
            permutation.swap(i, j);
        }
        Self {
            means,
            scales,
            permutation,
        }
    }
}

impl GlmFrozen {
    fn draw<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let stimulus = (0..GLM_LENGTH).map(|_| sample_std_normal(rng)).collect();
        let mut factor = vec![[0.0; GLM_TAPS]; GLM_TAPS];
        for (i, row) in factor.iter_mut().enumerate() {
            row[i] = 1.0 + (i as f64 / (GLM_TAPS as f64)).sqrt();
            if i >= 1 {
                row[i - 1] = -2.0;
            }
            if i >= 2 {
                row[i - 2] = 1.0;
            }
        }
        Self { stimulus, factor }
    }
}
