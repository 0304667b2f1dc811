use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::RngCore;
use serde::{Deserialize, Serialize};

use super::{ConditionalDensity, ModelCheckpoint, PosteriorModel};
use crate::error::{CanviError, Result};
use crate::stats::sample_std_normal;

/// `q(theta | x) = N(theta; slope * x + intercept, covariance)`.
#[derive(Clone, Debug)]
pub struct ConditionalLinearGaussian {
    slope: DMatrix<f64>,
    intercept: DVector<f64>,
    covariance: DMatrix<f64>,
    chol: DMatrix<f64>,
    log_norm: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LinearGaussianCheckpoint {
    pub theta_dim: usize,
    pub x_dim: usize,
    /// Row-major `theta_dim x x_dim`.
    pub slope: Vec<f64>,
    pub intercept: Vec<f64>,
    /// Row-major `theta_dim x theta_dim`.
    pub covariance: Vec<f64>,
}

impl ConditionalLinearGaussian {
    pub fn new(slope: DMatrix<f64>, intercept: DVector<f64>, covariance: DMatrix<f64>) -> Result<Self> {
        let d = slope.nrows();
        if intercept.len() != d || covariance.shape() != (d, d) {
            return Err(CanviError::argument(format!(
                "inconsistent shapes: slope {:?}, intercept {}, covariance {:?}",
                slope.shape(),
                intercept.len(),
                covariance.shape()
            )));
        }
        if (&covariance - covariance.transpose()).amax() > 1e-12 * covariance.amax().max(1.0) {
            return Err(CanviError::domain("covariance must be symmetric"));
        }
        let chol = covariance
            .clone()
            .cholesky()
            .ok_or_else(|| CanviError::domain("covariance must be positive definite"))?
            .unpack();
        let log_det: f64 = 2.0 * chol.diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let log_norm = -0.5 * (d as f64 * (2.0 * PI).ln() + log_det);
        Ok(Self {
            slope,
            intercept,
            covariance,
            chol,
            log_norm,
        })
    }

    /// One-dimensional `N(theta; slope * x + intercept, variance)`.
    pub fn scalar(slope: f64, intercept: f64, variance: f64) -> Result<Self> {
        Self::new(
            DMatrix::from_element(1, 1, slope),
            DVector::from_element(1, intercept),
            DMatrix::from_element(1, 1, variance),
        )
    }

    /// Exact posterior of the bivariate Gaussian pair: `N(rho x, 1 - rho^2)`.
    pub fn bivariate_posterior(rho: f64) -> Result<Self> {
        Self::scalar(rho, 0.0, 1.0 - rho * rho)
    }

    /// `N(phi x, 1 - rho^2)`: the misspecified-slope family.
    pub fn with_slope(phi: f64, rho: f64) -> Result<Self> {
        if !(rho.abs() < 1.0) {
            return Err(CanviError::domain(format!("|rho| must be < 1, got {rho}")));
        }
        Self::scalar(phi, 0.0, 1.0 - rho * rho)
    }

    /// Exact posterior of the 10-d Gaussian linear task: prior and noise
    /// variances are both 0.1, so `theta | x ~ N(x / 2, 0.05 I)`.
    pub fn gaussian_linear_posterior() -> Self {
        Self::new(
            DMatrix::identity(10, 10) * 0.5,
            DVector::zeros(10),
            DMatrix::identity(10, 10) * 0.05,
        )
        .expect("valid posterior")
    }

    pub fn mean(&self, x: &[f64]) -> DVector<f64> {
        &self.slope * DVector::from_column_slice(x) + &self.intercept
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    /// Mahalanobis distance `|L^{-1}(theta - mean(x))|`; the absolute z-score in 1-d.
    pub fn z_score(&self, theta: &[f64], x: &[f64]) -> f64 {
        let r = DVector::from_column_slice(theta) - self.mean(x);
        let w = self
            .chol
            .solve_lower_triangular(&r)
            .expect("cholesky factor is nonsingular");
        w.norm()
    }

    pub(crate) fn from_checkpoint(c: LinearGaussianCheckpoint) -> Result<Self> {
        Self::new(
            DMatrix::from_row_slice(c.theta_dim, c.x_dim, &c.slope),
            DVector::from_vec(c.intercept),
            DMatrix::from_row_slice(c.theta_dim, c.theta_dim, &c.covariance),
        )
    }
}

struct GaussianConditional<'a> {
    mean: DVector<f64>,
    chol: &'a DMatrix<f64>,
    log_norm: f64,
}

impl ConditionalDensity for GaussianConditional<'_> {
    fn log_density(&self, theta: &[f64]) -> f64 {
        let r = DVector::from_column_slice(theta) - &self.mean;
        let w = self
            .chol
            .solve_lower_triangular(&r)
            .expect("cholesky factor is nonsingular");
        self.log_norm - 0.5 * w.norm_squared()
    }

    fn sample(&self, rng: &mut dyn RngCore) -> Vec<f64> {
        let z = DVector::from_fn(self.mean.len(), |_, _| sample_std_normal(rng));
        (&self.mean + self.chol * z).as_slice().to_vec()
    }
}

impl PosteriorModel for ConditionalLinearGaussian {
    fn family(&self) -> &'static str {
        "linear_gaussian"
    }

    fn theta_dim(&self) -> usize {
        self.slope.nrows()
    }

    fn x_dim(&self) -> usize {
        self.slope.ncols()
    }

    fn condition<'a>(&'a self, x: &[f64]) -> Box<dyn ConditionalDensity + 'a> {
        Box::new(GaussianConditional {
            mean: self.mean(x),
            chol: &self.chol,
            log_norm: self.log_norm,
        })
    }

    fn dispersed(&self, scale: f64) -> Result<Box<dyn PosteriorModel>> {
        Ok(Box::new(Self::new(
            self.slope.clone(),
            self.intercept.clone(),
            &self.covariance * (scale * scale),
        )?))
    }

    fn checkpoint(&self) -> Option<ModelCheckpoint> {
        let row_major = |m: &DMatrix<f64>| m.transpose().as_slice().to_vec();
        Some(ModelCheckpoint::LinearGaussian(LinearGaussianCheckpoint {
            theta_dim: self.theta_dim(),
            x_dim: self.x_dim(),
            slope: row_major(&self.slope),
            intercept: self.intercept.as_slice().to_vec(),
            covariance: row_major(&self.covariance),
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::DispersionScaled;
    use crate::stats::{std_normal_cdf, RngStream};
    use std::sync::Arc;

    #[test]
    fn standard_normal_peak() {
        let m = ConditionalLinearGaussian::scalar(0.0, 0.0, 1.0).unwrap();
        let v = m.log_density(&[0.0], &[3.7]);
        assert!((v - (-0.918_938_533_204_672_7)).abs() < 1e-12);
    }

    #[test]
    fn rejects_non_spd_covariance() {
        assert!(ConditionalLinearGaussian::scalar(0.3, 0.0, 0.0).is_err());
        assert!(ConditionalLinearGaussian::scalar(0.3, 0.0, -1.0).is_err());
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.1, 1.0]);
        assert!(ConditionalLinearGaussian::new(DMatrix::zeros(2, 1), DVector::zeros(2), asym).is_err());
    }

    #[test]
    fn sample_mean_tracks_slope() {
        let m = ConditionalLinearGaussian::scalar(0.3, 0.0, 0.91).unwrap();
        let mut rng = RngStream::new(2, 0);
        let n = 100_000;
        let draws: Vec<f64> = (0..n).map(|_| m.sample(&[2.0], &mut rng)[0]).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let se = (0.91f64 / n as f64).sqrt();
        assert!((mean - 0.6).abs() < 3.0 * se);
    }

    #[test]
    fn dispersion_doubles_stddev() {
        let base: Arc<dyn PosteriorModel> =
            Arc::new(ConditionalLinearGaussian::scalar(0.3, 0.0, 0.91).unwrap());
        let wide = DispersionScaled::new(base, 2.0).unwrap();
        let mut rng = RngStream::new(3, 0);
        let n = 100_000;
        let draws: Vec<f64> = (0..n).map(|_| wide.sample(&[1.0], &mut rng)[0]).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let sd = (draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
        let target = 2.0 * 0.91f64.sqrt();
        // s.e. of a normal sample stddev is sigma / sqrt(2n)
        let se = target / (2.0 * n as f64).sqrt();
        assert!((sd - target).abs() < 3.0 * se, "{sd} vs {target}");
    }

    #[test]
    fn empirical_cdf_matches_density_cdf() {
        let m = ConditionalLinearGaussian::scalar(0.5, 0.2, 0.64).unwrap();
        let mut rng = RngStream::new(4, 0);
        let n = 100_000;
        let x = [1.0];
        let mut draws: Vec<f64> = (0..n).map(|_| m.sample(&x, &mut rng)[0]).collect();
        draws.sort_by(f64::total_cmp);
        let mut worst: f64 = 0.0;
        for (i, d) in draws.iter().enumerate() {
            let cdf = std_normal_cdf((d - 0.7) / 0.8);
            worst = worst.max((cdf - i as f64 / n as f64).abs());
            worst = worst.max((cdf - (i + 1) as f64 / n as f64).abs());
        }
        assert!(worst <= 0.01, "KS distance {worst}");
    }

    #[test]
    fn density_integrates_to_one_in_two_dims() {
        let cov = DMatrix::from_row_slice(2, 2, &[0.5, 0.2, 0.2, 0.3]);
        let m = ConditionalLinearGaussian::new(DMatrix::identity(2, 2), DVector::zeros(2), cov).unwrap();
        let x = [0.3, -0.4];
        let c = m.condition(&x);
        let (n, half) = (800, 8.0 * 0.5f64.sqrt());
        let h = 2.0 * half / n as f64;
        let mut total = 0.0;
        for i in 0..n {
            for j in 0..n {
                let t = [0.3 - half + (i as f64 + 0.5) * h, -0.4 - half + (j as f64 + 0.5) * h];
                total += c.log_density(&t).exp();
            }
        }
        assert!((total * h * h - 1.0).abs() < 1e-3, "{}", total * h * h);
    }

    #[test]
    fn z_score_is_standardized_residual() {
        let m = ConditionalLinearGaussian::scalar(0.3, 0.0, 0.91).unwrap();
        let z = m.z_score(&[1.0], &[2.0]);
        assert!((z - 0.4 / 0.91f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let m = ConditionalLinearGaussian::gaussian_linear_posterior();
        let text = m.checkpoint().unwrap().to_json();
        let back = ModelCheckpoint::from_json(&text).unwrap().into_model().unwrap();
        let x: Vec<f64> = (0..10).map(|i| 0.1 * i as f64 - 0.3).collect();
        let t: Vec<f64> = (0..10).map(|i| 0.05 * i as f64).collect();
        assert_eq!(m.log_density(&t, &x).to_bits(), back.log_density(&t, &x).to_bits());
    }
}
