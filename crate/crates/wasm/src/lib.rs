//! Browser bindings. Every export returns a JSON string for the page to plot.

use canvi_core::efficiency::{counterexample_lengths, counterexample_monte_carlo};
use canvi_core::pipeline::{
    coverage_sweep, gaussian_length_sweep, phi_grid, CandidateSpec, CanviConfig, GaussianSweep, TaskConfig,
};
use canvi_core::{RngStream, TaskName};
use serde_json::json;
use wasm_bindgen::prelude::*;

const MAX_WORK: f64 = 5e8;

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

/// Analytic and simulated interval length against the candidate slope.
pub fn length_curve_json(
    rho: f64,
    alpha: f64,
    phi_min: f64,
    phi_max: f64,
    phi_step: f64,
    n_calibration: usize,
    seed: u64,
) -> Result<String, String> {
    let phis = phi_grid(phi_min, phi_max, phi_step).map_err(err)?;
    let mut sweep = GaussianSweep::new(rho, alpha, phis, seed);
    sweep.n_calibration = n_calibration;
    sweep.n_test = 30;
    sweep.draws = 300;
    sweep.batches = 4;
    let work = (sweep.phis.len() * sweep.batches) as f64 * (n_calibration + sweep.n_test * sweep.draws) as f64;
    if work > MAX_WORK {
        return Err("grid too fine for the browser; widen the step or lower N_C".into());
    }
    let rows = gaussian_length_sweep(&sweep).map_err(err)?;
    Ok(json!({ "rho": rho, "alpha": alpha, "rows": rows }).to_string())
}

/// Conformal and HDR coverage of the exact Gaussian posterior with every
/// stddev multiplied by `scale`.
pub fn dispersion_coverage_json(scale: f64, n_calibration: usize, n_test: usize, seed: u64) -> Result<String, String> {
    if n_calibration.max(n_test) > 200_000 {
        return Err("sizes above 200000 are too slow for the browser".into());
    }
    let mut cfg = CanviConfig::new(
        seed,
        TaskConfig::new(TaskName::Gaussian),
        vec![CandidateSpec::Exact { scale }],
    );
    cfg.conformal.n_calibration = n_calibration;
    cfg.conformal.coverage_test = n_test;
    cfg.conformal.coverage_batches = 1;
    let (conformal, hdr) = coverage_sweep(&cfg, 0).map_err(err)?;
    Ok(json!({ "scale": scale, "conformal": conformal, "hdr": hdr }).to_string())
}

/// Exact and simulated region lengths in the discrete counterexample.
pub fn counterexample_json(b: f64, alpha: f64, draws: usize, seed: u64) -> Result<String, String> {
    let exact = counterexample_lengths(b, alpha).map_err(err)?;
    let mc = counterexample_monte_carlo(b, alpha, draws.min(2_000_000), &mut RngStream::new(seed, 0)).map_err(err)?;
    Ok(json!({ "b": b, "alpha": alpha, "exact": exact, "monte_carlo": mc }).to_string())
}

#[wasm_bindgen(js_name = lengthCurve)]
pub fn length_curve(
    rho: f64,
    alpha: f64,
    phi_min: f64,
    phi_max: f64,
    phi_step: f64,
    n_calibration: usize,
    seed: u32,
) -> Result<String, JsError> {
    length_curve_json(rho, alpha, phi_min, phi_max, phi_step, n_calibration, seed as u64).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = dispersionCoverage)]
pub fn dispersion_coverage(scale: f64, n_calibration: usize, n_test: usize, seed: u32) -> Result<String, JsError> {
    dispersion_coverage_json(scale, n_calibration, n_test, seed as u64).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = counterexample)]
pub fn counterexample(b: f64, alpha: f64, draws: usize, seed: u32) -> Result<String, JsError> {
    counterexample_json(b, alpha, draws, seed as u64).map_err(|e| JsError::new(&e))
}
