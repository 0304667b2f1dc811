//! Split conformal prediction with the score `1 / q(theta | x)`, the
//! highest-density-region baseline, and coverage assessment.

use std::fmt::Write as _;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetRole, JointSample};
use crate::error::{CanviError, Result};
use crate::models::{ConditionalLinearGaussian, PosteriorModel};
use crate::stats::{check_alpha, conformal_quantile, ExtendedScore, RngStream};
use crate::tasks::Task;

/// Stream label offset separating HDR probe draws from test-set draws.
const HDR_PROBE_OFFSET: u64 = 1 << 32;

pub fn score(model: &dyn PosteriorModel, x: &[f64], theta: &[f64]) -> ExtendedScore {
    ExtendedScore::from_log_density(model.log_density(theta, x))
}

/// Scores of every sample, in order.
pub fn scores(model: &dyn PosteriorModel, samples: &[JointSample]) -> Vec<ExtendedScore> {
    let one = |s: &JointSample| score(model, &s.x, &s.theta);
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        samples.par_iter().map(one).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        samples.iter().map(one).collect()
    }
}

/// A model together with a conformal threshold; the region at `x` is
/// `{theta : 1 / q(theta | x) <= threshold}`.
#[derive(Clone)]
pub struct CalibratedPredictor {
    model: Arc<dyn PosteriorModel>,
    threshold: ExtendedScore,
    alpha: f64,
    calibration_size: usize,
}

impl std::fmt::Debug for CalibratedPredictor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CalibratedPredictor")
            .field("family", &self.model.family())
            .field("threshold", &self.threshold)
            .field("alpha", &self.alpha)
            .field("calibration_size", &self.calibration_size)
            .finish()
    }
}

impl CalibratedPredictor {
    pub fn calibrate(model: Arc<dyn PosteriorModel>, calibration: &[JointSample], alpha: f64) -> Result<Self> {
        check_alpha(alpha)?;
        let s = scores(model.as_ref(), calibration);
        Self::from_scores(model, &s, alpha)
    }

    /// Calibrates at several levels from a single pass of scores.
    pub fn calibrate_levels(
        model: Arc<dyn PosteriorModel>,
        calibration: &[JointSample],
        alphas: &[f64],
    ) -> Result<Vec<Self>> {
        for &a in alphas {
            check_alpha(a)?;
        }
        let s = scores(model.as_ref(), calibration);
        alphas
            .iter()
            .map(|&a| Self::from_scores(model.clone(), &s, a))
            .collect()
    }

    pub fn from_scores(model: Arc<dyn PosteriorModel>, scores: &[ExtendedScore], alpha: f64) -> Result<Self> {
        let threshold = conformal_quantile(scores, alpha)?;
        Ok(Self {
            model,
            threshold,
            alpha,
            calibration_size: scores.len(),
        })
    }

    pub fn with_threshold(model: Arc<dyn PosteriorModel>, threshold: ExtendedScore, alpha: f64) -> Self {
        Self {
            model,
            threshold,
            alpha,
            calibration_size: 0,
        }
    }

    pub fn model(&self) -> &Arc<dyn PosteriorModel> {
        &self.model
    }

    pub fn threshold(&self) -> ExtendedScore {
        self.threshold
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn calibration_size(&self) -> usize {
        self.calibration_size
    }

    pub fn contains(&self, x: &[f64], theta: &[f64]) -> bool {
        score(self.model.as_ref(), x, theta) <= self.threshold
    }
}

/// Empirical `alpha`-quantile (lower order statistic) of `q(theta_j | x)` over
/// `m` draws `theta_j ~ q(. | x)`.
pub fn hdr_threshold(model: &dyn PosteriorModel, x: &[f64], alpha: f64, m: usize, rng: &mut RngStream) -> Result<f64> {
    check_alpha(alpha)?;
    let mut densities = hdr_densities(model, x, m, rng)?;
    densities.sort_by(f64::total_cmp);
    Ok(lower_quantile(&densities, alpha))
}

fn hdr_densities(model: &dyn PosteriorModel, x: &[f64], m: usize, rng: &mut RngStream) -> Result<Vec<f64>> {
    if m == 0 {
        return Err(CanviError::argument("HDR threshold needs at least one draw"));
    }
    let cond = model.condition(x);
    Ok((0..m)
        .map(|_| {
            let theta = cond.sample(rng);
            cond.log_density(&theta).exp()
        })
        .collect())
}

fn lower_quantile(sorted: &[f64], alpha: f64) -> f64 {
    let k = ((alpha * sorted.len() as f64) - 1e-9).ceil().max(1.0) as usize;
    sorted[k.min(sorted.len()) - 1]
}

/// Non-conformal highest-density credible region `{theta : q(theta | x) >= zeta(x)}`.
#[derive(Clone)]
pub struct HdrPredictor {
    model: Arc<dyn PosteriorModel>,
    alpha: f64,
    draws: usize,
}

impl HdrPredictor {
    pub fn new(model: Arc<dyn PosteriorModel>, alpha: f64, draws: usize) -> Result<Self> {
        check_alpha(alpha)?;
        if draws == 0 {
            return Err(CanviError::argument("HDR threshold needs at least one draw"));
        }
        Ok(Self { model, alpha, draws })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn draws(&self) -> usize {
        self.draws
    }

    pub fn contains(&self, x: &[f64], theta: &[f64], rng: &mut RngStream) -> bool {
        let zeta = hdr_threshold(self.model.as_ref(), x, self.alpha, self.draws, rng)
            .expect("validated at construction");
        self.model.log_density(theta, x).exp() >= zeta
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictorKind {
    Conformal,
    Hdr,
}

impl PredictorKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PredictorKind::Conformal => "conformal",
            PredictorKind::Hdr => "hdr",
        }
    }
}

/// Regions at several miscoverage levels that can be queried together.
pub trait RegionFamily: Sync {
    fn kind(&self) -> PredictorKind;

    fn alphas(&self) -> Vec<f64>;

    /// Membership of `theta` in the region at every level, in `alphas()` order.
    /// `rng` is a stream owned by this test point.
    fn membership(&self, x: &[f64], theta: &[f64], rng: &mut RngStream) -> Vec<bool>;
}

/// Conformal regions of one model at several levels.
pub struct ConformalLevels {
    model: Arc<dyn PosteriorModel>,
    alphas: Vec<f64>,
    thresholds: Vec<ExtendedScore>,
}

impl ConformalLevels {
    pub fn calibrate(model: Arc<dyn PosteriorModel>, calibration: &[JointSample], alphas: &[f64]) -> Result<Self> {
        let predictors = CalibratedPredictor::calibrate_levels(model.clone(), calibration, alphas)?;
        Ok(Self {
            model,
            alphas: alphas.to_vec(),
            thresholds: predictors.iter().map(|p| p.threshold()).collect(),
        })
    }

    pub fn from_predictor(p: &CalibratedPredictor) -> Self {
        Self {
            model: p.model().clone(),
            alphas: vec![p.alpha()],
            thresholds: vec![p.threshold()],
        }
    }

    pub fn thresholds(&self) -> &[ExtendedScore] {
        &self.thresholds
    }
}

impl RegionFamily for ConformalLevels {
    fn kind(&self) -> PredictorKind {
        PredictorKind::Conformal
    }

    fn alphas(&self) -> Vec<f64> {
        self.alphas.clone()
    }

    fn membership(&self, x: &[f64], theta: &[f64], _rng: &mut RngStream) -> Vec<bool> {
        let s = score(self.model.as_ref(), x, theta);
        self.thresholds.iter().map(|&t| s <= t).collect()
    }
}

/// HDR regions of one model at several levels; one set of `draws` densities
/// per test point serves every level.
pub struct HdrLevels {
    model: Arc<dyn PosteriorModel>,
    alphas: Vec<f64>,
    draws: usize,
}

impl HdrLevels {
    pub fn new(model: Arc<dyn PosteriorModel>, alphas: &[f64], draws: usize) -> Result<Self> {
        for &a in alphas {
            check_alpha(a)?;
        }
        if draws == 0 {
            return Err(CanviError::argument("HDR threshold needs at least one draw"));
        }
        Ok(Self {
            model,
            alphas: alphas.to_vec(),
            draws,
        })
    }
}

impl RegionFamily for HdrLevels {
    fn kind(&self) -> PredictorKind {
        PredictorKind::Hdr
    }

    fn alphas(&self) -> Vec<f64> {
        self.alphas.clone()
    }

    fn membership(&self, x: &[f64], theta: &[f64], rng: &mut RngStream) -> Vec<bool> {
        let mut densities =
            hdr_densities(self.model.as_ref(), x, self.draws, rng).expect("validated at construction");
        densities.sort_by(f64::total_cmp);
        let q = self.model.log_density(theta, x).exp();
        self.alphas
            .iter()
            .map(|&a| q >= lower_quantile(&densities, a))
            .collect()
    }
}

/// Empirical coverage against nominal level `1 - alpha`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoverageCurve {
    pub kind: PredictorKind,
    pub task: String,
    pub seed: u64,
    /// Nominal levels, strictly increasing.
    pub levels: Vec<f64>,
    pub coverage_mean: Vec<f64>,
    pub coverage_se: Vec<f64>,
    /// `per_batch[b][j]` is the coverage of batch `b` at `levels[j]`.
    pub per_batch: Vec<Vec<f64>>,
}

impl CoverageCurve {
    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("level,coverage_mean,coverage_se,predictor_kind,task,seed\n");
        for j in 0..self.levels.len() {
            writeln!(
                out,
                "{:?},{:?},{:?},{},{},{}",
                self.levels[j],
                self.coverage_mean[j],
                self.coverage_se[j],
                self.kind.as_str(),
                self.task,
                self.seed
            )
            .unwrap();
        }
        out
    }

    /// Largest `|coverage - level|` over the grid.
    pub fn max_abs_deviation(&self) -> f64 {
        self.levels
            .iter()
            .zip(&self.coverage_mean)
            .map(|(l, c)| (c - l).abs())
            .fold(0.0, f64::max)
    }

    pub fn coverage_at(&self, level: f64) -> Option<(f64, f64)> {
        self.levels
            .iter()
            .position(|l| (l - level).abs() < 1e-9)
            .map(|j| (self.coverage_mean[j], self.coverage_se[j]))
    }
}

/// The default grid `alpha = 0.05, 0.10, ..., 0.95`.
pub fn default_alpha_grid() -> Vec<f64> {
    (1..=19).map(|i| i as f64 * 0.05).collect()
}

/// Mean and standard error of the mean.
pub fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Coverage over `n_batches` fresh test batches of `n_test` joint draws.
///
/// Batch `b` is drawn from child stream `b` of `stream`, so two region
/// families assessed with the same stream see the same test pairs.
pub fn assess_coverage(
    regions: &dyn RegionFamily,
    task: &Task,
    n_test: usize,
    n_batches: usize,
    stream: &RngStream,
) -> Result<CoverageCurve> {
    if n_test == 0 || n_batches == 0 {
        return Err(CanviError::argument("coverage needs n_test >= 1 and n_batches >= 1"));
    }
    let alphas = regions.alphas();
    let mut order: Vec<usize> = (0..alphas.len()).collect();
    order.sort_by(|&a, &b| alphas[b].total_cmp(&alphas[a]));
    let levels: Vec<f64> = order.iter().map(|&j| 1.0 - alphas[j]).collect();
    if levels.windows(2).any(|w| w[0] >= w[1]) {
        return Err(CanviError::argument("coverage levels must be distinct"));
    }

    let mut per_batch = Vec::with_capacity(n_batches);
    for b in 0..n_batches {
        let test = task.sample_joint(n_test, &stream.derive(b as u64), DatasetRole::Test)?;
        let probes = stream.derive(HDR_PROBE_OFFSET + b as u64);
        let hit = |(i, s): (usize, &JointSample)| {
            let mut rng = probes.derive(i as u64);
            regions.membership(&s.x, &s.theta, &mut rng)
        };
        #[cfg(feature = "parallel")]
        let hits: Vec<Vec<bool>> = {
            use rayon::prelude::*;
            test.samples().par_iter().enumerate().map(hit).collect()
        };
        #[cfg(not(feature = "parallel"))]
        let hits: Vec<Vec<bool>> = test.samples().iter().enumerate().map(hit).collect();
        let coverage: Vec<f64> = order
            .iter()
            .map(|&j| hits.iter().filter(|h| h[j]).count() as f64 / n_test as f64)
            .collect();
        per_batch.push(coverage);
    }
    let (coverage_mean, coverage_se) = (0..levels.len())
        .map(|j| mean_and_se(&per_batch.iter().map(|c| c[j]).collect::<Vec<_>>()))
        .unzip();
    Ok(CoverageCurve {
        kind: regions.kind(),
        task: task.name().to_string(),
        seed: stream.seed(),
        levels,
        coverage_mean,
        coverage_se,
        per_batch,
    })
}

/// Checks that calibrating and thresholding `f(score)` instead of `score`
/// selects exactly the same probe points. `f` must be strictly increasing and
/// map `+inf` to `+inf`.
pub fn transform_equivalence_check<F>(
    model: &dyn PosteriorModel,
    calibration: &[JointSample],
    probes: &[JointSample],
    alpha: f64,
    f: F,
) -> Result<bool>
where
    F: Fn(f64) -> f64,
{
    let base = scores(model, calibration);
    let mapped: Vec<f64> = base.iter().map(|s| f(s.value())).collect();
    let q = conformal_quantile(&base, alpha)?;
    let q_f = mapped_quantile(&mapped, alpha)?;
    Ok(probes.iter().all(|p| {
        let s = score(model, &p.x, &p.theta);
        (s <= q) == (f(s.value()) <= q_f)
    }))
}

/// Same check for the Gaussian family with the absolute z-score
/// `|L^{-1}(theta - mean(x))|` as the alternative score.
pub fn z_score_equivalence_check(
    model: &ConditionalLinearGaussian,
    calibration: &[JointSample],
    probes: &[JointSample],
    alpha: f64,
) -> Result<bool> {
    let q = conformal_quantile(&scores(model, calibration), alpha)?;
    let z: Vec<f64> = calibration.iter().map(|s| model.z_score(&s.theta, &s.x)).collect();
    let q_z = mapped_quantile(&z, alpha)?;
    Ok(probes.iter().all(|p| {
        let inside = score(model, &p.x, &p.theta) <= q;
        inside == (model.z_score(&p.theta, &p.x) <= q_z)
    }))
}

/// Conformal quantile of real-valued (possibly negative) scores.
fn mapped_quantile(values: &[f64], alpha: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(CanviError::argument("conformal quantile of an empty score set"));
    }
    check_alpha(alpha)?;
    let k = crate::stats::conformal_rank(values.len(), alpha);
    if k > values.len() {
        return Ok(f64::INFINITY);
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(sorted[k - 1])
}
