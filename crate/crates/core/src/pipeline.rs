//! The selection procedure: calibrate every candidate on `D_C`, estimate its
//! region size on `D_T`, pick the smallest, recalibrate it on a fresh `D_R`.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::conformal::{
    assess_coverage, default_alpha_grid, mean_and_se, CalibratedPredictor, ConformalLevels, CoverageCurve,
    HdrLevels,
};
use crate::dataset::{DatasetRole, JointDataset};
use crate::efficiency::{inverse_efficiency, EfficiencyTrace, EstimatorKind};
use crate::error::{CanviError, Result};
use crate::models::{
    draw_joint_tolerant, train_favi, ConditionalLinearGaussian, DispersionScaled, FaviSettings, MdnArchitecture,
    MixtureDensityNetwork, ModelCheckpoint, PosteriorModel, UniformBox,
};
use crate::stats::{check_alpha, ExtendedScore, RngStream};
use crate::tasks::{Task, TaskName};

/// Stream ids under the master seed. Every dataset role has its own id, so
/// training, calibration, test and recalibration draws never overlap.
pub mod streams {
    pub const TRAIN: u64 = 1;
    pub const CALIBRATION: u64 = 2;
    pub const TEST: u64 = 3;
    pub const RECALIBRATION: u64 = 4;
    pub const SIZE_DRAWS: u64 = 5;
    pub const COVERAGE: u64 = 6;
    pub const PILOT: u64 = 7;
    pub const INIT: u64 = 8;
    pub const REPLICATES: u64 = 9;
}

const PILOT_SIZE: usize = 10_000;

fn default_rho() -> f64 {
    0.3
}

fn default_scale() -> f64 {
    1.0
}

fn default_components() -> usize {
    10
}

fn default_hidden() -> Vec<usize> {
    vec![64, 64]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    pub name: TaskName,
    /// Correlation of the `gaussian` task; ignored elsewhere.
    #[serde(default = "default_rho")]
    pub rho: f64,
    /// Restrict `theta` to these coordinates.
    #[serde(default)]
    pub marginal: Option<Vec<usize>>,
    #[serde(default)]
    pub construction_seed: u64,
}

impl TaskConfig {
    pub fn new(name: TaskName) -> Self {
        Self {
            name,
            rho: default_rho(),
            marginal: None,
            construction_seed: 0,
        }
    }

    pub fn build(&self) -> Result<Task> {
        let task = match self.name {
            TaskName::Gaussian => Task::gaussian(self.rho)?,
            name => Task::with_construction_seed(name, self.construction_seed),
        };
        match &self.marginal {
            Some(dims) => task.with_marginal(dims.clone()),
            None => Ok(task),
        }
    }
}

/// How to build one candidate approximator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum CandidateSpec {
    /// FAVI-trained mixture density network.
    Mdn {
        #[serde(default = "default_components")]
        components: usize,
        #[serde(default = "default_hidden")]
        hidden: Vec<usize>,
        #[serde(default = "default_scale")]
        scale: f64,
    },
    /// `N(theta; phi x, 1 - rho^2)` on the `gaussian` task.
    LinearGaussian {
        phi: f64,
        #[serde(default = "default_scale")]
        scale: f64,
    },
    /// The analytic posterior (`gaussian` and `gaussian_linear` tasks).
    Exact {
        #[serde(default = "default_scale")]
        scale: f64,
    },
    /// Uniform on the prior's box: the posterior equals the prior.
    Prior,
    UniformBox { bounds: Vec<(f64, f64)> },
    /// A model checkpoint file.
    Checkpoint {
        path: String,
        #[serde(default = "default_scale")]
        scale: f64,
    },
}

impl CandidateSpec {
    pub fn label(&self) -> String {
        match self {
            CandidateSpec::Mdn { components, scale, .. } => format!("mdn[K={components} scale={scale}]"),
            CandidateSpec::LinearGaussian { phi, scale } => format!("linear_gaussian[phi={phi} scale={scale}]"),
            CandidateSpec::Exact { scale } => format!("exact[scale={scale}]"),
            CandidateSpec::Prior => "prior".into(),
            CandidateSpec::UniformBox { bounds } => format!("uniform_box{}", bounds.iter().map(|(a, b)| format!("[{a} {b}]")).collect::<String>()),
            CandidateSpec::Checkpoint { path, scale } => format!("checkpoint[{path} scale={scale}]"),
        }
    }

    fn scale(&self) -> f64 {
        match self {
            CandidateSpec::Mdn { scale, .. }
            | CandidateSpec::LinearGaussian { scale, .. }
            | CandidateSpec::Exact { scale }
            | CandidateSpec::Checkpoint { scale, .. } => *scale,
            CandidateSpec::Prior | CandidateSpec::UniformBox { .. } => 1.0,
        }
    }
}

fn default_alpha() -> f64 {
    0.05
}
fn default_n_calibration() -> usize {
    10_000
}
fn default_n_test() -> usize {
    100
}
fn default_draws() -> usize {
    10_000
}
fn default_hdr_draws() -> usize {
    100
}
fn default_coverage_test() -> usize {
    10_000
}
fn default_coverage_batches() -> usize {
    10
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConformalConfig {
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Levels for coverage sweeps and the integrated size.
    #[serde(default = "default_alpha_grid")]
    pub alpha_grid: Vec<f64>,
    #[serde(default = "default_n_calibration")]
    pub n_calibration: usize,
    #[serde(default = "default_n_test")]
    pub n_test: usize,
    /// Importance-weighted draws per test point.
    #[serde(default = "default_draws")]
    pub draws: usize,
    /// Draws per point for HDR thresholds.
    #[serde(default = "default_hdr_draws")]
    pub hdr_draws: usize,
    #[serde(default = "default_coverage_test")]
    pub coverage_test: usize,
    #[serde(default = "default_coverage_batches")]
    pub coverage_batches: usize,
    /// Also report the trapezoid integral of the size over `alpha_grid`.
    #[serde(default)]
    pub integrate_over_alpha: bool,
}

impl Default for ConformalConfig {
    fn default() -> Self {
        Self {
            alpha: default_alpha(),
            alpha_grid: default_alpha_grid(),
            n_calibration: default_n_calibration(),
            n_test: default_n_test(),
            draws: default_draws(),
            hdr_draws: default_hdr_draws(),
            coverage_test: default_coverage_test(),
            coverage_batches: default_coverage_batches(),
            integrate_over_alpha: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CanviConfig {
    pub seed: u64,
    pub task: TaskConfig,
    pub candidates: Vec<CandidateSpec>,
    #[serde(default)]
    pub conformal: ConformalConfig,
    #[serde(default)]
    pub train: FaviSettings,
}

impl CanviConfig {
    pub fn new(seed: u64, task: TaskConfig, candidates: Vec<CandidateSpec>) -> Self {
        Self {
            seed,
            task,
            candidates,
            conformal: ConformalConfig::default(),
            train: FaviSettings::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let c = &self.conformal;
        check_alpha(c.alpha)?;
        for &a in &c.alpha_grid {
            check_alpha(a)?;
        }
        if c.n_calibration == 0 || c.n_test == 0 || c.draws == 0 || c.hdr_draws == 0 {
            return Err(CanviError::argument("N_C, N_T, S and M must all be at least 1"));
        }
        if c.coverage_test == 0 || c.coverage_batches == 0 {
            return Err(CanviError::argument("coverage assessment needs at least one test pair and batch"));
        }
        if self.candidates.is_empty() {
            return Err(CanviError::argument("at least one candidate is required"));
        }
        for spec in &self.candidates {
            let s = spec.scale();
            if !(s > 0.0 && s.is_finite()) {
                return Err(CanviError::domain(format!("{}: scale must be positive", spec.label())));
            }
        }
        Ok(())
    }

    fn stream(&self, id: u64) -> RngStream {
        RngStream::new(self.seed, id)
    }
}

/// A freshly initialized network whose standardization comes from a pilot
/// sample of the joint.
pub fn initial_mdn(task: &Task, arch: MdnArchitecture, seed: u64) -> Result<MixtureDensityNetwork> {
    let pilot = draw_joint_tolerant(task, PILOT_SIZE, &RngStream::new(seed, streams::PILOT))?;
    MixtureDensityNetwork::for_task(task, arch, &pilot, &mut RngStream::new(seed, streams::INIT))
}

/// Trains a network with the configured FAVI settings; the training stream is
/// shared by every candidate so identical specs yield identical models.
pub fn train_mdn<F>(
    task: &Task,
    arch: MdnArchitecture,
    seed: u64,
    settings: &FaviSettings,
    on_checkpoint: F,
) -> Result<(MixtureDensityNetwork, Vec<f64>)>
where
    F: FnMut(usize, &MixtureDensityNetwork) -> Result<()>,
{
    let mut model = initial_mdn(task, arch, seed)?;
    let losses = train_favi(&mut model, task, settings, &RngStream::new(seed, streams::TRAIN), on_checkpoint)?;
    Ok((model, losses))
}

fn exact_posterior(task: &Task) -> Result<ConditionalLinearGaussian> {
    match task.name() {
        TaskName::Gaussian => ConditionalLinearGaussian::bivariate_posterior(task.rho()),
        TaskName::GaussianLinear => {
            let dims: Vec<usize> = task.marginal().map_or_else(|| (0..10).collect(), <[usize]>::to_vec);
            let d = dims.len();
            let mut slope = DMatrix::zeros(d, 10);
            for (r, &c) in dims.iter().enumerate() {
                slope[(r, c)] = 0.5;
            }
            ConditionalLinearGaussian::new(slope, DVector::zeros(d), DMatrix::identity(d, d) * 0.05)
        }
        other => Err(CanviError::argument(format!("no analytic posterior for task {other}"))),
    }
}

/// Builds every candidate. Networks with the same architecture are trained
/// once and shared; a failure is recorded per candidate.
pub fn build_candidates(config: &CanviConfig, task: &Task) -> Vec<Result<Arc<dyn PosteriorModel>>> {
    let mut trained: HashMap<(usize, Vec<usize>), std::result::Result<Arc<dyn PosteriorModel>, String>> =
        HashMap::new();
    config
        .candidates
        .iter()
        .map(|spec| {
            let base: Arc<dyn PosteriorModel> = match spec {
                CandidateSpec::Mdn { components, hidden, .. } => {
                    let key = (*components, hidden.clone());
                    let entry = trained.entry(key).or_insert_with(|| {
                        let arch = MdnArchitecture {
                            components: *components,
                            hidden: hidden.clone(),
                        };
                        train_mdn(task, arch, config.seed, &config.train, |_, _| Ok(()))
                            .map(|(m, _)| Arc::new(m) as Arc<dyn PosteriorModel>)
                            .map_err(|e| e.to_string())
                    });
                    entry.clone().map_err(CanviError::AllCandidatesFailed)?
                }
                CandidateSpec::LinearGaussian { phi, .. } => {
                    if task.name() != TaskName::Gaussian {
                        return Err(CanviError::argument("linear_gaussian candidates need the gaussian task"));
                    }
                    Arc::new(ConditionalLinearGaussian::with_slope(*phi, task.rho())?)
                }
                CandidateSpec::Exact { .. } => Arc::new(exact_posterior(task)?),
                CandidateSpec::Prior => {
                    let bounds = task
                        .theta_support()
                        .iter()
                        .map(|s| s.bounds())
                        .collect::<Option<Vec<_>>>()
                        .ok_or_else(|| CanviError::argument("the prior candidate needs a bounded uniform prior"))?;
                    Arc::new(UniformBox::new(bounds, task.x_dim())?)
                }
                CandidateSpec::UniformBox { bounds } => Arc::new(UniformBox::new(bounds.clone(), task.x_dim())?),
                CandidateSpec::Checkpoint { path, .. } => {
                    let text = std::fs::read_to_string(path)?;
                    ModelCheckpoint::from_json(&text)?.into_model()?
                }
            };
            if base.theta_dim() != task.theta_dim() || base.x_dim() != task.x_dim() {
                return Err(CanviError::argument(format!(
                    "{} has dims ({}, {}), task has ({}, {})",
                    spec.label(),
                    base.theta_dim(),
                    base.x_dim(),
                    task.theta_dim(),
                    task.x_dim()
                )));
            }
            let scale = spec.scale();
            if scale == 1.0 {
                Ok(base)
            } else {
                Ok(Arc::new(DispersionScaled::new(base, scale)?) as Arc<dyn PosteriorModel>)
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateResult {
    pub index: usize,
    pub label: String,
    pub failed: bool,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub error: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub threshold: Option<ExtendedScore>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub l_hat: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub l_hat_se: Option<f64>,
    /// Trapezoid integral of the size over the alpha grid.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub integrated_l: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetFingerprints {
    pub calibration: String,
    pub test: String,
    pub recalibration: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CanviReport {
    pub config: CanviConfig,
    pub candidates: Vec<CandidateResult>,
    pub selected: usize,
    pub recalibrated_threshold: ExtendedScore,
    pub recalibrated_l_hat: f64,
    pub recalibrated_l_hat_se: f64,
    /// Coverage of the returned predictor on fresh test pairs.
    pub coverage: f64,
    pub coverage_se: f64,
    pub coverage_n: usize,
    pub stream_ids: BTreeMap<String, u64>,
    pub fingerprints: DatasetFingerprints,
    /// Every candidate's size estimate used the same test set and the same
    /// per-point draw streams.
    pub shared_size_streams: bool,
}

impl CanviReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| CanviError::Parse(format!("report: {e}")))
    }

    pub fn min_l_hat(&self) -> f64 {
        self.candidates
            .iter()
            .filter_map(|c| c.l_hat)
            .fold(f64::INFINITY, f64::min)
    }

    /// Plain-text table of candidates and the selection.
    pub fn summary_table(&self) -> String {
        let mut out = format!("{:<4} {:<44} {:>14} {:>12} {:>10}  \n", "t", "candidate", "threshold", "l_hat", "se");
        for c in &self.candidates {
            let mark = if c.index == self.selected { "*" } else { "" };
            let fmt = |v: Option<f64>| v.map_or_else(|| "-".into(), |v| format!("{v:.6}"));
            out.push_str(&format!(
                "{:<4} {:<44} {:>14} {:>12} {:>10} {}{}\n",
                c.index,
                c.label,
                c.threshold.map_or_else(|| "-".into(), |t| format!("{t:.6}")),
                fmt(c.l_hat),
                fmt(c.l_hat_se),
                mark,
                if c.failed { " failed" } else { "" }
            ));
        }
        out.push_str(&format!(
            "selected t* = {}; recalibrated threshold {:.6}; l_hat_R {:.6} ({:.6}); coverage {:.4} ({:.4}) at nominal {:.4}\n",
            self.selected,
            self.recalibrated_threshold,
            self.recalibrated_l_hat,
            self.recalibrated_l_hat_se,
            self.coverage,
            self.coverage_se,
            1.0 - self.config.conformal.alpha
        ));
        out
    }
}

/// Everything a run produced, for callers that persist models and datasets.
pub struct CanviRun {
    pub report: CanviReport,
    pub models: Vec<Option<Arc<dyn PosteriorModel>>>,
    pub calibration: JointDataset,
    pub test: JointDataset,
    pub recalibration: JointDataset,
    pub predictor: CalibratedPredictor,
}

fn trapezoid(xs: &[f64], ys: &[f64]) -> f64 {
    xs.windows(2)
        .zip(ys.windows(2))
        .map(|(x, y)| 0.5 * (x[1] - x[0]) * (y[0] + y[1]))
        .sum()
}

fn evaluate_candidate(
    config: &CanviConfig,
    model: &Arc<dyn PosteriorModel>,
    calibration: &JointDataset,
    test: &JointDataset,
) -> Result<(ExtendedScore, f64, f64, Option<f64>)> {
    let c = &config.conformal;
    let size_stream = config.stream(streams::SIZE_DRAWS);
    let predictor = CalibratedPredictor::calibrate(model.clone(), calibration.samples(), c.alpha)?;
    let est = inverse_efficiency(model.as_ref(), predictor.threshold(), test.samples(), c.draws, &size_stream)?;
    if !est.mean.is_finite() {
        return Err(CanviError::domain("non-finite region size"));
    }
    let integrated = if c.integrate_over_alpha {
        let mut alphas = c.alpha_grid.clone();
        alphas.sort_by(f64::total_cmp);
        let levels = CalibratedPredictor::calibrate_levels(model.clone(), calibration.samples(), &alphas)?;
        let sizes = levels
            .iter()
            .map(|p| {
                inverse_efficiency(model.as_ref(), p.threshold(), test.samples(), c.draws, &size_stream).map(|e| e.mean)
            })
            .collect::<Result<Vec<_>>>()?;
        Some(trapezoid(&alphas, &sizes))
    } else {
        None
    };
    Ok((predictor.threshold(), est.mean, est.se, integrated))
}

/// Runs the full procedure for `config`.
pub fn run_canvi(config: &CanviConfig) -> Result<CanviRun> {
    config.validate()?;
    let task = config.task.build()?;
    let c = &config.conformal;
    let calibration = task.sample_joint(c.n_calibration, &config.stream(streams::CALIBRATION), DatasetRole::Calibration)?;
    let test = task.sample_joint(c.n_test, &config.stream(streams::TEST), DatasetRole::Test)?;

    let built = build_candidates(config, &task);
    let evaluate = |(i, m): (usize, &Result<Arc<dyn PosteriorModel>>)| {
        let outcome = m
            .as_ref()
            .map_err(|e| e.to_string())
            .and_then(|m| evaluate_candidate(config, m, &calibration, &test).map_err(|e| e.to_string()));
        match outcome {
            Ok((threshold, l_hat, se, integrated)) => CandidateResult {
                index: i,
                label: config.candidates[i].label(),
                failed: false,
                error: None,
                threshold: Some(threshold),
                l_hat: Some(l_hat),
                l_hat_se: Some(se),
                integrated_l: integrated,
            },
            Err(e) => CandidateResult {
                index: i,
                label: config.candidates[i].label(),
                failed: true,
                error: Some(e),
                threshold: None,
                l_hat: None,
                l_hat_se: None,
                integrated_l: None,
            },
        }
    };
    #[cfg(feature = "parallel")]
    let results: Vec<CandidateResult> = {
        use rayon::prelude::*;
        built.par_iter().enumerate().map(evaluate).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let results: Vec<CandidateResult> = built.iter().enumerate().map(evaluate).collect();

    // strict comparison keeps the lowest index among ties
    let mut selected: Option<(usize, f64)> = None;
    for r in &results {
        if let Some(l) = r.l_hat {
            if selected.is_none_or(|(_, best)| l < best) {
                selected = Some((r.index, l));
            }
        }
    }
    let Some((selected, _)) = selected else {
        let reasons: Vec<String> = results
            .iter()
            .map(|r| format!("{}: {}", r.label, r.error.as_deref().unwrap_or("unknown")))
            .collect();
        return Err(CanviError::AllCandidatesFailed(reasons.join("; ")));
    };
    let model = built[selected].as_ref().expect("selected candidate exists").clone();

    let recalibration =
        task.sample_joint(c.n_calibration, &config.stream(streams::RECALIBRATION), DatasetRole::Recalibration)?;
    let predictor = CalibratedPredictor::calibrate(model.clone(), recalibration.samples(), c.alpha)?;
    let recal = inverse_efficiency(
        model.as_ref(),
        predictor.threshold(),
        test.samples(),
        c.draws,
        &config.stream(streams::SIZE_DRAWS),
    )?;
    let coverage_curve = assess_coverage(
        &ConformalLevels::from_predictor(&predictor),
        &task,
        c.coverage_test,
        1,
        &config.stream(streams::COVERAGE),
    )?;
    let coverage = coverage_curve.coverage_mean[0];
    let coverage_se = (coverage * (1.0 - coverage) / c.coverage_test as f64).sqrt();

    let stream_ids = [
        ("train", streams::TRAIN),
        ("calibration", streams::CALIBRATION),
        ("test", streams::TEST),
        ("recalibration", streams::RECALIBRATION),
        ("size_draws", streams::SIZE_DRAWS),
        ("coverage", streams::COVERAGE),
        ("pilot", streams::PILOT),
        ("init", streams::INIT),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect();

    let report = CanviReport {
        config: config.clone(),
        candidates: results,
        selected,
        recalibrated_threshold: predictor.threshold(),
        recalibrated_l_hat: recal.mean,
        recalibrated_l_hat_se: recal.se,
        coverage,
        coverage_se,
        coverage_n: c.coverage_test,
        stream_ids,
        fingerprints: DatasetFingerprints {
            calibration: calibration.fingerprint(),
            test: test.fingerprint(),
            recalibration: recalibration.fingerprint(),
        },
        shared_size_streams: true,
    };
    Ok(CanviRun {
        report,
        models: built.into_iter().map(|m| m.ok()).collect(),
        calibration,
        test,
        recalibration,
        predictor,
    })
}

/// Slack `l_hat_R(q*) - min_t l_hat(q_t)` over replicates at one `N_C`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlackSummary {
    pub n_calibration: usize,
    pub slack: Vec<f64>,
    pub min_l_hat: Vec<f64>,
    pub selected: Vec<usize>,
    pub median_slack: f64,
    pub median_abs_slack: f64,
    pub median_min_l_hat: f64,
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Master seed of replicate `r` of `config`.
pub fn replicate_seed(config: &CanviConfig, r: usize) -> u64 {
    RngStream::new(config.seed, streams::REPLICATES).derive(r as u64).next_u64()
}

/// Repeats the procedure `n_replicates` times at each calibration size.
pub fn efficiency_slack_check(
    config: &CanviConfig,
    n_replicates: usize,
    calibration_sizes: &[usize],
) -> Result<Vec<SlackSummary>> {
    if n_replicates < 10 {
        return Err(CanviError::argument("the slack check needs at least 10 replicates"));
    }
    calibration_sizes
        .iter()
        .map(|&n_c| {
            let mut slack = Vec::with_capacity(n_replicates);
            let mut min_l = Vec::with_capacity(n_replicates);
            let mut selected = Vec::with_capacity(n_replicates);
            for r in 0..n_replicates {
                let mut cfg = config.clone();
                cfg.seed = replicate_seed(config, r);
                cfg.conformal.n_calibration = n_c;
                let report = run_canvi(&cfg)?.report;
                let m = report.min_l_hat();
                slack.push(report.recalibrated_l_hat - m);
                min_l.push(m);
                selected.push(report.selected);
            }
            let abs: Vec<f64> = slack.iter().map(|s| s.abs()).collect();
            Ok(SlackSummary {
                n_calibration: n_c,
                median_slack: median(&slack),
                median_abs_slack: median(&abs),
                median_min_l_hat: median(&min_l),
                slack,
                min_l_hat: min_l,
                selected,
            })
        })
        .collect()
}

/// Conformal and HDR coverage curves of candidate `index` over the alpha grid,
/// assessed on shared test batches.
pub fn coverage_sweep(config: &CanviConfig, index: usize) -> Result<(CoverageCurve, CoverageCurve)> {
    config.validate()?;
    let task = config.task.build()?;
    let c = &config.conformal;
    let model = build_candidates(config, &task)
        .into_iter()
        .nth(index)
        .ok_or_else(|| CanviError::argument(format!("no candidate with index {index}")))??;
    let calibration = task.sample_joint(c.n_calibration, &config.stream(streams::CALIBRATION), DatasetRole::Calibration)?;
    let stream = config.stream(streams::COVERAGE);
    let conformal = ConformalLevels::calibrate(model.clone(), calibration.samples(), &c.alpha_grid)?;
    let hdr = HdrLevels::new(model, &c.alpha_grid, c.hdr_draws)?;
    Ok((
        assess_coverage(&conformal, &task, c.coverage_test, c.coverage_batches, &stream)?,
        assess_coverage(&hdr, &task, c.coverage_test, c.coverage_batches, &stream)?,
    ))
}

/// Region size at every training checkpoint of the first network candidate.
pub fn efficiency_trace(config: &CanviConfig) -> Result<(EfficiencyTrace, Vec<f64>)> {
    config.validate()?;
    let task = config.task.build()?;
    let c = &config.conformal;
    let (arch, scale) = config
        .candidates
        .iter()
        .find_map(|s| match s {
            CandidateSpec::Mdn { components, hidden, scale } => Some((
                MdnArchitecture {
                    components: *components,
                    hidden: hidden.clone(),
                },
                *scale,
            )),
            _ => None,
        })
        .ok_or_else(|| CanviError::argument("the efficiency trace needs an mdn candidate"))?;
    let calibration = task.sample_joint(c.n_calibration, &config.stream(streams::CALIBRATION), DatasetRole::Calibration)?;
    let test = task.sample_joint(c.n_test, &config.stream(streams::TEST), DatasetRole::Test)?;
    let size_stream = config.stream(streams::SIZE_DRAWS);
    let mut rows = Vec::new();
    let (_, losses) = train_mdn(&task, arch, config.seed, &config.train, |step, m| {
        let model: Arc<dyn PosteriorModel> = if scale == 1.0 {
            Arc::new(m.clone())
        } else {
            Arc::new(DispersionScaled::new(Arc::new(m.clone()), scale)?)
        };
        let p = CalibratedPredictor::calibrate(model.clone(), calibration.samples(), c.alpha)?;
        let est = inverse_efficiency(model.as_ref(), p.threshold(), test.samples(), c.draws, &size_stream)?;
        rows.push((step, est.mean, est.se));
        Ok(())
    })?;
    Ok((
        EfficiencyTrace {
            task: task.name().to_string(),
            alpha: c.alpha,
            seed: config.seed,
            estimator: EstimatorKind::IwMc,
            rows,
        },
        losses,
    ))
}

/// Settings for the bivariate Gaussian length sweep over candidate slopes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianSweep {
    pub rho: f64,
    pub alpha: f64,
    pub phis: Vec<f64>,
    pub n_calibration: usize,
    pub n_test: usize,
    pub draws: usize,
    /// Independent replicates; every slope sees the same data within one.
    pub batches: usize,
    pub seed: u64,
}

impl GaussianSweep {
    pub fn new(rho: f64, alpha: f64, phis: Vec<f64>, seed: u64) -> Self {
        Self {
            rho,
            alpha,
            phis,
            n_calibration: 10_000,
            n_test: 100,
            draws: 1000,
            batches: 20,
            seed,
        }
    }
}

/// `phi` grid from `lo` to `hi` inclusive with the given step.
pub fn phi_grid(lo: f64, hi: f64, step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0) || !(hi >= lo) || !lo.is_finite() || !hi.is_finite() {
        return Err(CanviError::argument("phi grid needs lo <= hi and a positive step"));
    }
    let n = ((hi - lo) / step + 1e-9).floor() as usize;
    Ok((0..=n).map(|i| lo + step * i as f64).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianLengthRow {
    pub phi: f64,
    pub analytic: f64,
    pub mc_mean: f64,
    pub mc_se: f64,
}

/// Analytic and Monte Carlo conformal interval lengths for every slope.
pub fn gaussian_length_sweep(sweep: &GaussianSweep) -> Result<Vec<GaussianLengthRow>> {
    check_alpha(sweep.alpha)?;
    if sweep.batches < 2 || sweep.n_test == 0 || sweep.draws == 0 || sweep.n_calibration == 0 {
        return Err(CanviError::argument("the sweep needs at least 2 batches and non-empty sets"));
    }
    let task = Task::gaussian(sweep.rho)?;
    let mut per_batch = vec![Vec::with_capacity(sweep.batches); sweep.phis.len()];
    for b in 0..sweep.batches as u64 {
        let cal_stream = RngStream::new(sweep.seed, streams::CALIBRATION).derive(b);
        let test_stream = RngStream::new(sweep.seed, streams::TEST).derive(b);
        let size_stream = RngStream::new(sweep.seed, streams::SIZE_DRAWS).derive(b);
        let calibration = task.sample_joint(sweep.n_calibration, &cal_stream, DatasetRole::Calibration)?;
        let test = task.sample_joint(sweep.n_test, &test_stream, DatasetRole::Test)?;
        for (j, &phi) in sweep.phis.iter().enumerate() {
            let model: Arc<dyn PosteriorModel> = Arc::new(ConditionalLinearGaussian::with_slope(phi, sweep.rho)?);
            let p = CalibratedPredictor::calibrate(model.clone(), calibration.samples(), sweep.alpha)?;
            let est = inverse_efficiency(model.as_ref(), p.threshold(), test.samples(), sweep.draws, &size_stream)?;
            per_batch[j].push(est.mean);
        }
    }
    sweep
        .phis
        .iter()
        .zip(per_batch)
        .map(|(&phi, values)| {
            let (mc_mean, mc_se) = mean_and_se(&values);
            Ok(GaussianLengthRow {
                phi,
                analytic: crate::efficiency::gaussian_analytic_length(sweep.rho, phi, sweep.alpha)?,
                mc_mean,
                mc_se,
            })
        })
        .collect()
}

pub fn gaussian_sweep_csv(rows: &[GaussianLengthRow]) -> String {
    let mut out = String::from("phi,analytic_length,mc_length,mc_se\n");
    for r in rows {
        out.push_str(&format!("{:?},{:?},{:?},{:?}\n", r.phi, r.analytic, r.mc_mean, r.mc_se));
    }
    out
}

/// Recomputes the returned threshold from the recalibration set and model
/// alone; used to audit that selection did not leak into it.
pub fn recompute_threshold(model: Arc<dyn PosteriorModel>, recalibration: &JointDataset, alpha: f64) -> Result<ExtendedScore> {
    Ok(CalibratedPredictor::calibrate(model, recalibration.samples(), alpha)?.threshold())
}

/// Fraction of replicates selecting `target`, and the binomial s.e. of a
/// coverage estimate; small helpers for reports.
pub fn selection_rate(selected: &[usize], target: usize) -> f64 {
    selected.iter().filter(|&&s| s == target).count() as f64 / selected.len() as f64
}

pub fn binomial_se(p: f64, n: usize) -> f64 {
    (p * (1.0 - p) / n as f64).sqrt()
}

pub fn coverage_summary(values: &[f64]) -> (f64, f64) {
    mean_and_se(values)
}
