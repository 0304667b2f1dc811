//! Expected size of conformal regions: the importance-weighted Monte Carlo
//! estimator, a grid estimator for low dimensions, closed forms for the
//! bivariate Gaussian family, and the discrete counterexample in which a
//! wrong posterior beats the true one.

use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::conformal::mean_and_se;
use crate::dataset::JointSample;
use crate::error::{CanviError, Result};
use crate::models::PosteriorModel;
use crate::stats::{check_alpha, std_normal_quantile, ExtendedScore, RngStream};
use crate::tasks::{Support, Task};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    IwMc,
    Grid,
    Analytic,
}

impl EstimatorKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EstimatorKind::IwMc => "iw_mc",
            EstimatorKind::Grid => "grid",
            EstimatorKind::Analytic => "analytic",
        }
    }
}

/// A region size at one `x` with its Monte Carlo standard error (zero for
/// deterministic estimators).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SizeEstimate {
    pub value: f64,
    pub se: f64,
}

/// Average region size over a test set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyEstimate {
    pub kind: EstimatorKind,
    pub mean: f64,
    /// Standard error of `mean` across test points.
    pub se: f64,
    pub per_point: Vec<SizeEstimate>,
}

impl EfficiencyEstimate {
    fn from_points(kind: EstimatorKind, per_point: Vec<SizeEstimate>) -> Self {
        let values: Vec<f64> = per_point.iter().map(|p| p.value).collect();
        let (mean, se) = mean_and_se(&values);
        Self {
            kind,
            mean,
            se,
            per_point,
        }
    }

    /// Standard error of `mean` from the per-point Monte Carlo noise alone,
    /// i.e. treating the test `x` values as fixed.
    pub fn conditional_se(&self) -> f64 {
        let n = self.per_point.len() as f64;
        self.per_point.iter().map(|p| p.se * p.se).sum::<f64>().sqrt() / n
    }
}

/// `(1/S) sum_j w_j 1[w_j <= threshold]` with `w_j = 1 / q(theta_j | x)` and
/// `theta_j ~ q(. | x)`.
pub fn region_size_iw<R: Rng>(
    model: &dyn PosteriorModel,
    threshold: ExtendedScore,
    x: &[f64],
    draws: usize,
    rng: &mut R,
) -> Result<SizeEstimate> {
    if draws == 0 {
        return Err(CanviError::argument("importance-weighted size needs at least one draw"));
    }
    let cond = model.condition(x);
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..draws {
        let theta = cond.sample(rng);
        let w = ExtendedScore::from_log_density(cond.log_density(&theta));
        // A draw from q cannot have zero density; guard against rounding at the
        // edge of a bounded support.
        if w <= threshold && !w.is_infinite() {
            sum += w.value();
            sum_sq += w.value() * w.value();
        }
    }
    let n = draws as f64;
    let mean = sum / n;
    let var = if draws > 1 {
        ((sum_sq - n * mean * mean) / (n - 1.0)).max(0.0)
    } else {
        0.0
    };
    Ok(SizeEstimate {
        value: mean,
        se: (var / n).sqrt(),
    })
}

/// An axis-aligned grid of cell midpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub bounds: Vec<(f64, f64)>,
    pub points: Vec<usize>,
}

impl GridSpec {
    pub fn new(bounds: Vec<(f64, f64)>, points: Vec<usize>) -> Result<Self> {
        if bounds.len() != points.len() || bounds.is_empty() {
            return Err(CanviError::argument("grid needs one point count per bounded dimension"));
        }
        if points.iter().any(|&n| n < 2) {
            return Err(CanviError::argument("grid needs at least 2 points per dimension"));
        }
        if bounds.iter().any(|&(lo, hi)| !(lo < hi && (hi - lo).is_finite())) {
            return Err(CanviError::domain(format!("invalid grid bounds {bounds:?}")));
        }
        Ok(Self { bounds, points })
    }

    /// `points` per dimension over a task's bounded support.
    pub fn for_task(task: &Task, points: usize) -> Result<Self> {
        let bounds = task
            .theta_support()
            .iter()
            .map(|s| match s {
                Support::Interval(lo, hi) => Ok((*lo, *hi)),
                _ => Err(CanviError::argument(format!(
                    "task {} has unbounded support; give explicit grid bounds",
                    task.name()
                ))),
            })
            .collect::<Result<Vec<_>>>()?;
        let d = bounds.len();
        Self::new(bounds, vec![points; d])
    }

    pub fn dim(&self) -> usize {
        self.bounds.len()
    }

    pub fn volume(&self) -> f64 {
        self.bounds.iter().map(|(lo, hi)| hi - lo).product()
    }

    pub fn total_points(&self) -> usize {
        self.points.iter().product()
    }

    /// Midpoint of flat cell `index` (last dimension fastest).
    pub fn point(&self, mut index: usize, out: &mut [f64]) {
        for d in (0..self.dim()).rev() {
            let n = self.points[d];
            let (lo, hi) = self.bounds[d];
            let i = index % n;
            index /= n;
            out[d] = lo + (hi - lo) * (i as f64 + 0.5) / n as f64;
        }
    }
}

/// Volume of `{theta : 1 / q(theta | x) <= threshold}` measured on `grid`.
pub fn region_size_grid(
    model: &dyn PosteriorModel,
    threshold: ExtendedScore,
    x: &[f64],
    grid: &GridSpec,
) -> Result<f64> {
    if grid.dim() > 3 {
        return Err(CanviError::UnsupportedDimension(grid.dim()));
    }
    if grid.dim() != model.theta_dim() {
        return Err(CanviError::argument(format!(
            "grid has {} dims, model has {}",
            grid.dim(),
            model.theta_dim()
        )));
    }
    let total = grid.total_points();
    if threshold.is_infinite() {
        return Ok(grid.volume());
    }
    let cond = model.condition(x);
    let mut theta = vec![0.0; grid.dim()];
    let mut count = 0usize;
    for i in 0..total {
        grid.point(i, &mut theta);
        if ExtendedScore::from_log_density(cond.log_density(&theta)) <= threshold {
            count += 1;
        }
    }
    Ok(grid.volume() * (count as f64 / total as f64))
}

fn per_point<T, F>(test: &[JointSample], f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize, &JointSample) -> Result<T> + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        test.par_iter().enumerate().map(|(i, s)| f(i, s)).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        test.iter().enumerate().map(|(i, s)| f(i, s)).collect()
    }
}

/// Mean importance-weighted region size over the `x` values of `test`. Point
/// `i` draws from child stream `i` of `stream`.
pub fn inverse_efficiency(
    model: &dyn PosteriorModel,
    threshold: ExtendedScore,
    test: &[JointSample],
    draws: usize,
    stream: &RngStream,
) -> Result<EfficiencyEstimate> {
    if test.is_empty() {
        return Err(CanviError::argument("inverse efficiency needs a non-empty test set"));
    }
    let points = per_point(test, |i, s| {
        region_size_iw(model, threshold, &s.x, draws, &mut stream.derive(i as u64))
    })?;
    Ok(EfficiencyEstimate::from_points(EstimatorKind::IwMc, points))
}

/// Mean grid-measured region size over the `x` values of `test`.
pub fn inverse_efficiency_grid(
    model: &dyn PosteriorModel,
    threshold: ExtendedScore,
    test: &[JointSample],
    grid: &GridSpec,
) -> Result<EfficiencyEstimate> {
    if test.is_empty() {
        return Err(CanviError::argument("inverse efficiency needs a non-empty test set"));
    }
    let points = per_point(test, |_, s| {
        region_size_grid(model, threshold, &s.x, grid).map(|value| SizeEstimate { value, se: 0.0 })
    })?;
    Ok(EfficiencyEstimate::from_points(EstimatorKind::Grid, points))
}

fn gaussian_setup(rho: f64, phi: f64, alpha: f64) -> Result<(f64, f64)> {
    if !(rho.abs() < 1.0) {
        return Err(CanviError::domain(format!("|rho| must be < 1, got {rho}")));
    }
    if !phi.is_finite() {
        return Err(CanviError::domain(format!("phi must be finite, got {phi}")));
    }
    check_alpha(alpha)?;
    let z = std_normal_quantile(1.0 - alpha / 2.0)?;
    Ok((phi * phi + 1.0 - 2.0 * phi * rho, z))
}

/// Population conformal threshold of `N(theta; phi x, 1 - rho^2)` on the
/// standard bivariate Gaussian pair with correlation `rho`.
pub fn gaussian_analytic_threshold(rho: f64, phi: f64, alpha: f64) -> Result<f64> {
    let (v, z) = gaussian_setup(rho, phi, alpha)?;
    let s2 = 1.0 - rho * rho;
    Ok((2.0 * std::f64::consts::PI * s2 * (v * z * z / s2).exp()).sqrt())
}

/// Length of the matching conformal interval, `2 sqrt(phi^2 + 1 - 2 phi rho) z`.
pub fn gaussian_analytic_length(rho: f64, phi: f64, alpha: f64) -> Result<f64> {
    let (v, z) = gaussian_setup(rho, phi, alpha)?;
    Ok(2.0 * v.sqrt() * z)
}

/// Population region sizes in the discrete counterexample.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CounterexampleLengths {
    /// Expected region length under the true posterior.
    pub true_posterior: f64,
    /// Expected region length under the truncated approximation `q_b`.
    pub truncated: f64,
}

/// One uniform piece of a conditional density: `density` on `[lo, hi]`.
#[derive(Clone, Copy, Debug)]
struct Piece {
    lo: f64,
    hi: f64,
    density: f64,
}

/// `x ~ Bernoulli(1/2)`; `theta | x=0 ~ U[0, 200]`, `theta | x=1 ~ U[200, 300]`.
/// The approximation `q_b` replaces the first branch with `U[0, b]`.
fn counterexample_branches(b: f64) -> [(f64, [Piece; 1], [Piece; 1]); 2] {
    [
        (
            0.5,
            [Piece { lo: 0.0, hi: 200.0, density: 1.0 / 200.0 }],
            [Piece { lo: 0.0, hi: b, density: 1.0 / b }],
        ),
        (
            0.5,
            [Piece { lo: 200.0, hi: 300.0, density: 1.0 / 100.0 }],
            [Piece { lo: 200.0, hi: 300.0, density: 1.0 / 100.0 }],
        ),
    ]
}

/// Score atoms `(score, probability)` of model density `q` under the true
/// joint, found by intersecting the true and model pieces for each `x`.
fn score_atoms(b: f64, use_truncated: bool) -> Vec<(f64, f64)> {
    let mut atoms: Vec<(f64, f64)> = Vec::new();
    for (px, truth, approx) in counterexample_branches(b) {
        let model = if use_truncated { approx } else { truth };
        for t in &truth {
            let mut covered = 0.0;
            for m in &model {
                let overlap = (t.hi.min(m.hi) - t.lo.max(m.lo)).max(0.0);
                if overlap > 0.0 {
                    atoms.push((1.0 / m.density, px * t.density * overlap));
                    covered += overlap;
                }
            }
            let outside = (t.hi - t.lo) - covered;
            if outside > 0.0 {
                atoms.push((f64::INFINITY, px * t.density * outside));
            }
        }
    }
    atoms.sort_by(|a, b| a.0.total_cmp(&b.0));
    atoms
}

/// `inf { s : F(s) > level }` over a discrete score law.
fn score_quantile(atoms: &[(f64, f64)], level: f64) -> f64 {
    let mut cdf = 0.0;
    for &(s, p) in atoms {
        cdf += p;
        if cdf > level {
            return s;
        }
    }
    f64::INFINITY
}

/// Expected Lebesgue measure of `{theta : 1/q(theta|x) <= threshold}`.
fn expected_length(b: f64, use_truncated: bool, threshold: f64) -> f64 {
    counterexample_branches(b)
        .iter()
        .map(|(px, truth, approx)| {
            let model = if use_truncated { approx } else { truth };
            let len: f64 = if threshold.is_infinite() {
                // the whole parameter range [0, 300]
                300.0
            } else {
                model
                    .iter()
                    .filter(|m| 1.0 / m.density <= threshold)
                    .map(|m| m.hi - m.lo)
                    .sum()
            };
            px * len
        })
        .sum()
}

/// Validity window of the counterexample: `0 < b < 100` and
/// `0 < alpha < b / 400`. The threshold is the `alpha`-quantile of the score
/// law; the smallest atom of `q_b`'s scores (value `b`) carries mass
/// `P(x = 0) P(theta <= b | x = 0) = b / 400`.
pub fn counterexample_window(b: f64) -> Result<f64> {
    if !(b > 0.0 && b < 100.0) {
        return Err(CanviError::domain(format!("counterexample needs 0 < b < 100, got {b}")));
    }
    Ok(b / 400.0)
}

/// Expected region lengths of the true posterior and of `q_b` at threshold
/// level `alpha`, by exact enumeration of the construction.
pub fn counterexample_lengths(b: f64, alpha: f64) -> Result<CounterexampleLengths> {
    let upper = counterexample_window(b)?;
    if !(alpha > 0.0 && alpha < upper) {
        return Err(CanviError::domain(format!(
            "counterexample needs 0 < alpha < b/400 = {upper}, got {alpha}"
        )));
    }
    let true_threshold = score_quantile(&score_atoms(b, false), alpha);
    let truncated_threshold = score_quantile(&score_atoms(b, true), alpha);
    Ok(CounterexampleLengths {
        true_posterior: expected_length(b, false, true_threshold),
        truncated: expected_length(b, true, truncated_threshold),
    })
}

/// Monte Carlo version: thresholds from the empirical score quantile of `n`
/// joint draws, lengths averaged over the same draws.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CounterexampleMonteCarlo {
    pub true_posterior: SizeEstimate,
    pub truncated: SizeEstimate,
}

pub fn counterexample_monte_carlo<R: Rng + ?Sized>(
    b: f64,
    alpha: f64,
    n: usize,
    rng: &mut R,
) -> Result<CounterexampleMonteCarlo> {
    counterexample_window(b)?;
    check_alpha(alpha)?;
    if n < 2 {
        return Err(CanviError::argument("Monte Carlo needs at least 2 draws"));
    }
    let draws: Vec<(u8, f64)> = (0..n)
        .map(|_| {
            if rng.random::<bool>() {
                (1, 200.0 + 100.0 * rng.random::<f64>())
            } else {
                (0, 200.0 * rng.random::<f64>())
            }
        })
        .collect();
    // same arithmetic as the enumeration so thresholds compare exactly
    let true_score = |x: u8, _theta: f64| if x == 0 { 1.0 / (1.0 / 200.0) } else { 1.0 / (1.0 / 100.0) };
    let truncated_score = |x: u8, theta: f64| match x {
        0 if theta <= b => 1.0 / (1.0 / b),
        0 => f64::INFINITY,
        _ => 1.0 / (1.0 / 100.0),
    };
    let estimate = |score: &dyn Fn(u8, f64) -> f64, use_truncated: bool| {
        let mut s: Vec<f64> = draws.iter().map(|&(x, t)| score(x, t)).collect();
        s.sort_by(f64::total_cmp);
        let k = ((alpha * n as f64).floor() as usize).min(n - 1);
        let threshold = s[k];
        let lengths: Vec<f64> = draws
            .iter()
            .map(|&(x, _)| {
                let branch = &counterexample_branches(b)[x as usize];
                let model = if use_truncated { branch.2 } else { branch.1 };
                if threshold.is_infinite() {
                    300.0
                } else {
                    model
                        .iter()
                        .filter(|m| 1.0 / m.density <= threshold)
                        .map(|m| m.hi - m.lo)
                        .sum()
                }
            })
            .collect();
        let (value, se) = mean_and_se(&lengths);
        SizeEstimate { value, se }
    };
    Ok(CounterexampleMonteCarlo {
        true_posterior: estimate(&true_score, false),
        truncated: estimate(&truncated_score, true),
    })
}

/// Region size at successive training checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyTrace {
    pub task: String,
    pub alpha: f64,
    pub seed: u64,
    pub estimator: EstimatorKind,
    /// `(checkpoint_step, mean, se)`.
    pub rows: Vec<(usize, f64, f64)>,
}

impl EfficiencyTrace {
    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("checkpoint_step,l_hat_mean,l_hat_se,estimator,task,alpha,seed\n");
        for &(step, mean, se) in &self.rows {
            writeln!(
                out,
                "{step},{mean:?},{se:?},{},{},{:?},{}",
                self.estimator.as_str(),
                self.task,
                self.alpha,
                self.seed
            )
            .unwrap();
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use crate::conformal::CalibratedPredictor;
    use crate::dataset::DatasetRole;
    use crate::models::{ConditionalLinearGaussian, DispersionScaled, UniformBox};
    use crate::stats::std_normal_pdf;
    use crate::tasks::TaskName;
    use proptest::prelude::*;
    use std::sync::Arc;

    fn std_normal() -> ConditionalLinearGaussian {
        ConditionalLinearGaussian::scalar(0.0, 0.0, 1.0).unwrap()
    }

    #[test]
    fn unit_interval_size_is_exactly_one() {
        let u = UniformBox::new(vec![(0.0, 1.0)], 1).unwrap();
        let est = region_size_iw(&u, ExtendedScore::new(1.0), &[0.0], 1000, &mut RngStream::new(1, 1)).unwrap();
        assert_eq!(est.value, 1.0);
        assert_eq!(est.se, 0.0);
    }

    #[test]
    fn standard_normal_central_interval() {
        let z = 1.959_96;
        let q = ExtendedScore::new(1.0 / std_normal_pdf(z));
        let est = region_size_iw(&std_normal(), q, &[0.0], 100_000, &mut RngStream::new(2, 2)).unwrap();
        assert!((est.value - 3.9199).abs() < 3.0 * est.se, "{est:?}");
        let grid = GridSpec::new(vec![(-8.0, 8.0)], vec![160_000]).unwrap();
        let g = region_size_grid(&std_normal(), q, &[0.0], &grid).unwrap();
        assert!((g - 3.9199).abs() < 2e-4, "{g}");
    }

    #[test]
    fn exact_bivariate_gaussian_length() {
        let m = ConditionalLinearGaussian::bivariate_posterior(0.3).unwrap();
        let q = ExtendedScore::new(gaussian_analytic_threshold(0.3, 0.3, 0.05).unwrap());
        let est = region_size_iw(&m, q, &[1.3], 100_000, &mut RngStream::new(3, 3)).unwrap();
        assert!((est.value / 3.7393 - 1.0).abs() < 0.02, "{est:?}");
    }

    #[test]
    fn grid_edge_cases() {
        let grid = GridSpec::new(vec![(-8.0, 8.0)], vec![100]).unwrap();
        assert_eq!(region_size_grid(&std_normal(), ExtendedScore::new(1.0), &[0.0], &grid).unwrap(), 0.0);
        assert_eq!(region_size_grid(&std_normal(), ExtendedScore::INFINITY, &[0.0], &grid).unwrap(), 16.0);
        let high = GridSpec::new(vec![(0.0, 1.0); 4], vec![2; 4]).unwrap();
        let m = UniformBox::new(vec![(0.0, 1.0); 4], 1).unwrap();
        assert!(matches!(
            region_size_grid(&m, ExtendedScore::INFINITY, &[0.0], &high),
            Err(CanviError::UnsupportedDimension(4))
        ));
        assert!(GridSpec::new(vec![(0.0, 1.0)], vec![1]).is_err());
    }

    #[test]
    fn grid_and_iw_agree_on_random_one_dim_thresholds() {
        let mut rng = RngStream::new(4, 4);
        let grid = GridSpec::new(vec![(-10.0, 10.0)], vec![20_000]).unwrap();
        let m = ConditionalLinearGaussian::scalar(0.3, 0.1, 0.5).unwrap();
        for _ in 0..20 {
            let x = [2.0 * crate::stats::sample_std_normal(&mut rng)];
            let alpha: f64 = rng.random_range(0.02..0.98);
            let z = std_normal_quantile(1.0 - alpha / 2.0).unwrap();
            let q = ExtendedScore::new((2.0 * std::f64::consts::PI * 0.5).sqrt() * (z * z / 2.0).exp());
            let iw = region_size_iw(&m, q, &x, 10_000, &mut rng).unwrap();
            let g = region_size_grid(&m, q, &x, &grid).unwrap();
            assert!((iw.value - g).abs() <= 3.0 * iw.se, "iw {iw:?} grid {g}");
        }
    }

    #[test]
    fn single_point_inverse_efficiency_equals_region_size() {
        let m = ConditionalLinearGaussian::bivariate_posterior(0.3).unwrap();
        let test = vec![JointSample {
            theta: vec![0.2],
            x: vec![0.7],
        }];
        let q = ExtendedScore::new(10.0);
        let stream = RngStream::new(5, 5);
        let e = inverse_efficiency(&m, q, &test, 500, &stream).unwrap();
        let direct = region_size_iw(&m, q, &[0.7], 500, &mut stream.derive(0)).unwrap();
        assert_eq!(e.mean, direct.value);
        assert_eq!(e.per_point.len(), 1);
    }

    #[test]
    fn exact_gaussian_sizes_are_constant_in_x() {
        let m = ConditionalLinearGaussian::bivariate_posterior(0.3).unwrap();
        let task = Task::gaussian(0.3).unwrap();
        let test = task.sample_joint(50, &RngStream::new(6, 1), DatasetRole::Test).unwrap();
        let q = ExtendedScore::new(gaussian_analytic_threshold(0.3, 0.3, 0.05).unwrap());
        let grid = GridSpec::new(vec![(-12.0, 12.0)], vec![2400]).unwrap();
        let sizes: Vec<f64> = test
            .samples()
            .iter()
            .map(|s| {
                let shifted = GridSpec::new(
                    grid.bounds.iter().map(|(lo, hi)| (lo + 0.3 * s.x[0], hi + 0.3 * s.x[0])).collect(),
                    grid.points.clone(),
                )
                .unwrap();
                region_size_grid(&m, q, &s.x, &shifted).unwrap()
            })
            .collect();
        let spread = sizes.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
            - sizes.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(spread <= 2.0 * 24.0 / 2400.0, "{spread}");
        let e = inverse_efficiency(&m, q, test.samples(), 2000, &RngStream::new(6, 2)).unwrap();
        // spread across points is Monte Carlo noise only
        let values: Vec<f64> = e.per_point.iter().map(|p| p.value).collect();
        let (_, sd_mean) = mean_and_se(&values);
        assert!(sd_mean < 3.0 * e.conditional_se(), "{sd_mean} vs {}", e.conditional_se());
    }

    #[test]
    fn dispersion_leaves_conformal_gaussian_regions_unchanged() {
        // Scaling a Gaussian's covariance is a monotone map of its score, so
        // the calibrated region is the same; only a different slope changes it.
        let task = Task::gaussian(0.3).unwrap();
        let cal = task.sample_joint(5000, &RngStream::new(7, 1), DatasetRole::Calibration).unwrap();
        let test = task.sample_joint(100, &RngStream::new(7, 2), DatasetRole::Test).unwrap();
        let exact: Arc<dyn PosteriorModel> = Arc::new(ConditionalLinearGaussian::bivariate_posterior(0.3).unwrap());
        let wide: Arc<dyn PosteriorModel> = Arc::new(DispersionScaled::new(exact.clone(), 2.0).unwrap());
        let tilted: Arc<dyn PosteriorModel> = Arc::new(ConditionalLinearGaussian::with_slope(0.9, 0.3).unwrap());
        let grid = GridSpec::new(vec![(-10.0, 10.0)], vec![4000]).unwrap();
        let mut grid_sizes = Vec::new();
        let mut iw_sizes = Vec::new();
        for m in [exact, wide, tilted] {
            let p = CalibratedPredictor::calibrate(m.clone(), cal.samples(), 0.05).unwrap();
            let iw = inverse_efficiency(m.as_ref(), p.threshold(), test.samples(), 2000, &RngStream::new(7, 3)).unwrap();
            let g = inverse_efficiency_grid(m.as_ref(), p.threshold(), test.samples(), &grid).unwrap();
            assert!((iw.mean - g.mean).abs() < 3.0 * iw.conditional_se() + 0.01);
            grid_sizes.push(g.mean);
            iw_sizes.push(iw);
        }
        assert!((grid_sizes[0] - grid_sizes[1]).abs() <= 2.0 * 20.0 / 4000.0, "{grid_sizes:?}");
        let combined = (iw_sizes[0].conditional_se().powi(2) + iw_sizes[1].conditional_se().powi(2)).sqrt();
        assert!((iw_sizes[0].mean - iw_sizes[1].mean).abs() < 3.0 * combined);
        assert!(grid_sizes[2] > grid_sizes[0] + 0.1, "{grid_sizes:?}");
        assert!(iw_sizes[2].mean > iw_sizes[0].mean);
    }

    #[test]
    fn analytic_examples() {
        let l = gaussian_analytic_length(0.3, 0.3, 0.05).unwrap();
        assert!((l - 3.7393).abs() < 1e-4, "{l}");
        let t = gaussian_analytic_threshold(0.3, 0.3, 0.05).unwrap();
        assert!((t - 16.32).abs() < 0.01, "{t}");
        let z = std_normal_quantile(0.95).unwrap();
        assert!((gaussian_analytic_length(0.0, 0.0, 0.1).unwrap() - 2.0 * z).abs() < 1e-12);
        assert!(gaussian_analytic_length(1.0, 0.3, 0.05).is_err());
        let phis: Vec<f64> = (0..=200).map(|i| -1.0 + 0.01 * i as f64).collect();
        let best = phis
            .iter()
            .min_by(|a, b| {
                let la = gaussian_analytic_length(0.3, **a, 0.05).unwrap();
                let lb = gaussian_analytic_length(0.3, **b, 0.05).unwrap();
                la.total_cmp(&lb)
            })
            .unwrap();
        assert!((best - 0.3).abs() < 1e-9);
    }

    #[test]
    fn analytic_threshold_matches_its_region() {
        // the threshold's region has the analytic length
        let (rho, phi, alpha) = (0.3, 0.8, 0.1);
        let m = ConditionalLinearGaussian::with_slope(phi, rho).unwrap();
        let q = ExtendedScore::new(gaussian_analytic_threshold(rho, phi, alpha).unwrap());
        let grid = GridSpec::new(vec![(-10.0, 10.0)], vec![200_000]).unwrap();
        let g = region_size_grid(&m, q, &[0.0], &grid).unwrap();
        assert!((g - gaussian_analytic_length(rho, phi, alpha).unwrap()).abs() < 2e-4);
    }

    #[test]
    fn counterexample_examples() {
        for (b, alpha) in [(50.0, 0.1), (99.9, 0.2), (10.0, 0.02)] {
            let l = counterexample_lengths(b, alpha).unwrap();
            assert_eq!(l.true_posterior, 50.0);
            assert_eq!(l.truncated, b / 2.0);
            assert!(l.truncated < l.true_posterior);
        }
        assert!(counterexample_lengths(50.0, 0.2).is_err());
        assert!(counterexample_lengths(100.0, 0.01).is_err());
        assert!(counterexample_lengths(50.0, 0.0).is_err());
    }

    #[test]
    fn counterexample_outside_window_changes_regime() {
        // between b/400 and b/400 + 1/2 the truncated threshold is 100,
        // so both branches keep their full model support
        let atoms = score_atoms(50.0, true);
        let t = score_quantile(&atoms, 0.2);
        assert_eq!(t, 100.0);
        assert_eq!(expected_length(50.0, true, t), 0.5 * 50.0 + 0.5 * 100.0);
        assert_eq!(score_quantile(&atoms, 0.7), f64::INFINITY);
    }

    #[test]
    fn counterexample_monte_carlo_confirms() {
        let mut rng = RngStream::new(8, 8);
        let mc = counterexample_monte_carlo(60.0, 0.1, 100_000, &mut rng).unwrap();
        assert!((mc.true_posterior.value - 50.0).abs() < 3.0 * mc.true_posterior.se);
        assert!((mc.truncated.value - 30.0).abs() < 3.0 * mc.truncated.se);
    }

    #[test]
    fn trace_csv_layout() {
        let t = EfficiencyTrace {
            task: "two_moons".into(),
            alpha: 0.05,
            seed: 3,
            estimator: EstimatorKind::IwMc,
            rows: vec![(0, 1.5, 0.1), (100, 1.0, 0.05)],
        };
        let csv = t.to_csv_string();
        assert_eq!(csv.lines().next().unwrap(), "checkpoint_step,l_hat_mean,l_hat_se,estimator,task,alpha,seed");
        assert_eq!(csv.lines().nth(2).unwrap(), "100,1.0,0.05,iw_mc,two_moons,0.05,3");
    }

    #[test]
    fn grid_for_task_covers_support() {
        let g = GridSpec::for_task(&Task::new(TaskName::TwoMoons), 100).unwrap();
        assert_eq!(g.volume(), 4.0);
        assert!(GridSpec::for_task(&Task::new(TaskName::Sir), 100).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn iw_terms_are_nonnegative_and_grid_bounded(seed in 0u64..500, log_q in 0.0f64..5.0) {
            let m = ConditionalLinearGaussian::scalar(0.5, 0.0, 0.3).unwrap();
            let q = ExtendedScore::new(log_q.exp());
            let iw = region_size_iw(&m, q, &[0.3], 200, &mut RngStream::new(seed, 0)).unwrap();
            prop_assert!(iw.value >= 0.0);
            let grid = GridSpec::new(vec![(-6.0, 6.0)], vec![600]).unwrap();
            let g = region_size_grid(&m, q, &[0.3], &grid).unwrap();
            prop_assert!((0.0..=grid.volume()).contains(&g));
        }

        #[test]
        fn length_increases_with_distance_from_rho(rho in -0.9f64..0.9, d1 in 0.0f64..1.0, d2 in 0.0f64..1.0) {
            prop_assume!((d1 - d2).abs() > 1e-6);
            let (near, far) = if d1 < d2 { (d1, d2) } else { (d2, d1) };
            for sign in [-1.0, 1.0] {
                let a = gaussian_analytic_length(rho, rho + sign * near, 0.05).unwrap();
                let b = gaussian_analytic_length(rho, rho + sign * far, 0.05).unwrap();
                prop_assert!(a < b);
            }
        }
    }
}
