//! Model specification and the two fitting engines.
//!
//! The observation model is a generalized linear model with spatial random
//! effects:
//!
//! ```text
//!   Y_k ~ f(y_k | mu_k, sigma)            k = 1..n
//!   g(mu_k) = x_k' beta + phi_k + O_k
//!   phi ~ N(0, [tau Q(rho, W)]^{-1})
//!   beta_j ~ N(0, v_beta),   tau, sigma ~ Gamma(shape, rate),
//!   logit(rho) ~ N(0, v_rho)
//! ```
//!
//! with canonical links fixed per family: log for Poisson counts, logit for
//! binomial trial counts, identity for Gaussian (where `sigma` is the
//! observation precision). Offsets `O_k` live on the linear-predictor scale.
//!
//! Two engines produce a [`FitResult`] with identical shape:
//!
//! * [`fit`]: deterministic grid over the hyperparameters, a Laplace
//!   approximation to the latent posterior at every grid point, and
//!   Gaussian-mixture marginals weighted by evidence times hyperprior.
//! * [`fit_mcmc`]: Metropolis-within-Gibbs sampling, kept as a slower
//!   reference engine the grid approximation is validated against.

mod data;
mod glm;
mod grid;
mod latent;
mod mcmc;
mod result;

pub use data::DataSet;
pub use glm::{fit_glm, GlmFit};
pub use grid::{fit, GridConfig, GridPoint, HyperGrid};
pub use latent::{
    laplace_log_marginal, latent_mode, log_joint_density, log_joint_gradient, LatentMode,
};
pub use mcmc::{fit_mcmc, McmcConfig};
pub use result::{BackendKind, Dic, FitResult, IntervalSummary, ParamSummary, PhiMarginals};
#[cfg(test)]
pub(crate) use result::preset_fit;

use nalgebra::DMatrix;
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};

/// Observation family with its canonical link.
#[derive(Debug, Clone, PartialEq)]
pub enum Family {
    /// Counts with log link; `mu = exp(eta)`.
    Poisson,
    /// Successes out of per-area trial counts with logit link;
    /// `mu = trials * sigmoid(eta)`.
    Binomial { trials: Vec<f64> },
    /// Identity link; `sigma` is the observation precision, `Var(y) = 1/sigma`.
    Gaussian,
}

/// Family selector without per-area data, for CLI flags and builders.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FamilyKind {
    Poisson,
    Binomial,
    Gaussian,
}

impl FamilyKind {
    pub fn name(self) -> &'static str {
        match self {
            FamilyKind::Poisson => "poisson",
            FamilyKind::Binomial => "binomial",
            FamilyKind::Gaussian => "gaussian",
        }
    }
}

impl Family {
    pub fn kind(&self) -> FamilyKind {
        match self {
            Family::Poisson => FamilyKind::Poisson,
            Family::Binomial { .. } => FamilyKind::Binomial,
            Family::Gaussian => FamilyKind::Gaussian,
        }
    }

    pub fn needs_sigma(&self) -> bool {
        matches!(self, Family::Gaussian)
    }

    /// Full per-area log-likelihood including normalizing constants, so
    /// deviances and marginal likelihoods are on an absolute scale.
    pub fn log_lik(&self, k: usize, y: f64, eta: f64, sigma: f64) -> f64 {
        match self {
            Family::Poisson => y * eta - eta.exp() - ln_gamma(y + 1.0),
            Family::Binomial { trials } => {
                let n = trials[k];
                let binom = ln_gamma(n + 1.0) - ln_gamma(y + 1.0) - ln_gamma(n - y + 1.0);
                binom + y * eta - n * softplus(eta)
            }
            Family::Gaussian => {
                let r = y - eta;
                0.5 * (sigma.ln() - (2.0 * std::f64::consts::PI).ln()) - 0.5 * sigma * r * r
            }
        }
    }

    /// First derivative of the log-likelihood in the linear predictor.
    pub fn score(&self, k: usize, y: f64, eta: f64, sigma: f64) -> f64 {
        match self {
            Family::Poisson => y - eta.exp(),
            Family::Binomial { trials } => y - trials[k] * sigmoid(eta),
            Family::Gaussian => sigma * (y - eta),
        }
    }

    /// Negative second derivative in the linear predictor (always >= 0).
    pub fn curvature(&self, k: usize, eta: f64, sigma: f64) -> f64 {
        match self {
            Family::Poisson => eta.exp(),
            Family::Binomial { trials } => {
                let p = sigmoid(eta);
                trials[k] * p * (1.0 - p)
            }
            Family::Gaussian => sigma,
        }
    }

    /// Inverse link: the fitted mean at a linear predictor value.
    pub fn mean(&self, k: usize, eta: f64) -> f64 {
        match self {
            Family::Poisson => eta.exp(),
            Family::Binomial { trials } => trials[k] * sigmoid(eta),
            Family::Gaussian => eta,
        }
    }

    /// Observation variance at a fitted mean.
    pub fn variance(&self, k: usize, mu: f64, sigma: f64) -> f64 {
        match self {
            Family::Poisson => mu,
            Family::Binomial { trials } => {
                let n = trials[k];
                mu * (1.0 - mu / n)
            }
            Family::Gaussian => 1.0 / sigma,
        }
    }

    fn validate(&self, y: &[f64]) -> Result<()> {
        match self {
            Family::Poisson => {
                for (k, &v) in y.iter().enumerate() {
                    if !(v.is_finite() && v >= 0.0 && v.fract() == 0.0) {
                        return Err(Error::Model(format!(
                            "Poisson response must be a non-negative count, got {v} at area {k}"
                        )));
                    }
                }
            }
            Family::Binomial { trials } => {
                if trials.len() != y.len() {
                    return Err(Error::Model(format!(
                        "{} trial counts for {} areas",
                        trials.len(),
                        y.len()
                    )));
                }
                for k in 0..y.len() {
                    let (v, n) = (y[k], trials[k]);
                    if !(n.is_finite() && n >= 1.0 && n.fract() == 0.0) {
                        return Err(Error::Model(format!(
                            "binomial trials must be a positive count, got {n} at area {k}"
                        )));
                    }
                    if !(v.is_finite() && v >= 0.0 && v <= n && v.fract() == 0.0) {
                        return Err(Error::Model(format!(
                            "binomial response must be a count in [0, trials], got {v} of {n} at area {k}"
                        )));
                    }
                }
            }
            Family::Gaussian => {
                if let Some((k, &v)) = y.iter().enumerate().find(|(_, v)| !v.is_finite()) {
                    return Err(Error::Model(format!(
                        "Gaussian response must be finite, got {v} at area {k}"
                    )));
                }
            }
        }
        Ok(())
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// `ln(1 + exp(x))` without overflow.
pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// How the spatial dependence parameter is handled.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RhoMode {
    /// Posterior over a grid (or sampled, under the MCMC engine).
    Estimate,
    /// Pinned at a value in [0, 1), e.g. 0.99 for boundary analysis.
    Fixed(f64),
}

/// How the Gaussian observation precision is handled (ignored for other
/// families).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SigmaMode {
    Estimate,
    Fixed(f64),
}

/// Prior hyperparameters. Variances are variances, Gamma parameters are
/// shape and rate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Priors {
    pub beta_variance: f64,
    pub tau_shape: f64,
    pub tau_rate: f64,
    pub sigma_shape: f64,
    pub sigma_rate: f64,
    pub logit_rho_variance: f64,
}

impl Default for Priors {
    fn default() -> Self {
        Self {
            beta_variance: 1000.0,
            tau_shape: 0.001,
            tau_rate: 0.001,
            sigma_shape: 0.001,
            sigma_rate: 0.001,
            logit_rho_variance: 100.0,
        }
    }
}

/// Complete model specification: data, design, and how hyperparameters are
/// treated. The design matrix always carries a leading intercept column.
#[derive(Debug, Clone)]
pub struct ModelSpec {
    pub family: Family,
    pub y: Vec<f64>,
    pub offset: Vec<f64>,
    pub design: DMatrix<f64>,
    pub rho_mode: RhoMode,
    pub sigma_mode: SigmaMode,
    pub priors: Priors,
}

impl ModelSpec {
    /// Builds a spec with an intercept plus the given covariate columns.
    /// Offset defaults to zero. Hyperparameter modes default to `Estimate`.
    pub fn new(
        family: Family,
        y: Vec<f64>,
        offset: Option<Vec<f64>>,
        covariates: &[Vec<f64>],
    ) -> Result<Self> {
        let n = y.len();
        let p = 1 + covariates.len();
        let mut design = DMatrix::zeros(n, p);
        for k in 0..n {
            design[(k, 0)] = 1.0;
        }
        for (j, col) in covariates.iter().enumerate() {
            if col.len() != n {
                return Err(Error::Model(format!(
                    "covariate {} has {} values for {} areas",
                    j,
                    col.len(),
                    n
                )));
            }
            for k in 0..n {
                design[(k, j + 1)] = col[k];
            }
        }
        let spec = Self {
            family,
            y,
            offset: offset.unwrap_or_else(|| vec![0.0; n]),
            design,
            rho_mode: RhoMode::Estimate,
            sigma_mode: SigmaMode::Estimate,
            priors: Priors::default(),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn p(&self) -> usize {
        self.design.ncols()
    }

    /// Linear predictor `X beta + phi + offset`.
    pub(crate) fn eta(&self, beta: &nalgebra::DVector<f64>, phi: &[f64]) -> Vec<f64> {
        let xb = &self.design * beta;
        (0..self.n())
            .map(|k| xb[k] + phi[k] + self.offset[k])
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n();
        if n == 0 {
            return Err(Error::Model("empty response".into()));
        }
        self.family.validate(&self.y)?;
        if self.offset.len() != n {
            return Err(Error::Model(format!(
                "{} offsets for {n} areas",
                self.offset.len()
            )));
        }
        if let Some((k, &v)) = self.offset.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(Error::Model(format!("offset {v} at area {k} is not finite")));
        }
        if self.design.nrows() != n {
            return Err(Error::Model(format!(
                "design has {} rows for {n} areas",
                self.design.nrows()
            )));
        }
        let p = self.p();
        if (0..n).any(|k| self.design[(k, 0)] != 1.0) {
            return Err(Error::Model(
                "design must carry a leading intercept column of ones".into(),
            ));
        }
        if self.design.iter().any(|v| !v.is_finite()) {
            return Err(Error::Model("design contains non-finite values".into()));
        }
        // full column rank via column-pivoted QR: with pivoting the R
        // diagonal is non-increasing in magnitude, so the count above a
        // relative threshold is the numerical rank
        let rank = if p > n {
            n
        } else {
            let qr = self.design.clone().col_piv_qr();
            let diag = qr.r().diagonal();
            let scale = diag.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            diag.iter().filter(|v| v.abs() > 1e-10 * scale.max(1.0)).count()
        };
        if rank < p {
            return Err(Error::Model(format!(
                "design matrix is rank deficient (rank {rank} of {p} columns)"
            )));
        }
        if let RhoMode::Fixed(v) = self.rho_mode {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Model(format!(
                    "fixed rho must lie in [0, 1), got {v}"
                )));
            }
        }
        if let SigmaMode::Fixed(v) = self.sigma_mode {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Model(format!(
                    "fixed sigma must be positive, got {v}"
                )));
            }
        }
        let pr = &self.priors;
        for (name, v) in [
            ("beta_variance", pr.beta_variance),
            ("tau_shape", pr.tau_shape),
            ("tau_rate", pr.tau_rate),
            ("sigma_shape", pr.sigma_shape),
            ("sigma_rate", pr.sigma_rate),
            ("logit_rho_variance", pr.logit_rho_variance),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Model(format!("prior {name} must be positive, got {v}")));
            }
        }
        Ok(())
    }

    /// Checks the degenerate combination rejected at fit time: an isolated
    /// area under a pinned rho at or beyond 0.99, where the area's
    /// conditional autoregression carries essentially no prior information
    /// and the boundary interpretation breaks down.
    pub(crate) fn reject_isolated(&self, w: &crate::graph::NeighbourMatrix) -> Result<()> {
        if let RhoMode::Fixed(v) = self.rho_mode {
            if v >= 0.99 {
                if let Some(area) = w.isolated_area() {
                    return Err(Error::IsolatedArea { area, rho: v });
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spec_builder_validates() {
        let y = vec![1.0, 2.0, 0.0, 4.0];
        let spec = ModelSpec::new(Family::Poisson, y.clone(), None, &[]).unwrap();
        assert_eq!(spec.p(), 1);
        assert_eq!(spec.offset, vec![0.0; 4]);

        // non-integer Poisson response
        assert!(ModelSpec::new(Family::Poisson, vec![1.5, 2.0, 1.0, 0.0], None, &[]).is_err());

        // covariate length mismatch
        assert!(ModelSpec::new(Family::Poisson, y.clone(), None, &[vec![1.0; 3]]).is_err());

        // rank deficiency: covariate equal to the intercept
        assert!(ModelSpec::new(Family::Poisson, y.clone(), None, &[vec![1.0; 4]]).is_err());

        // binomial y > trials
        assert!(ModelSpec::new(
            Family::Binomial { trials: vec![2.0; 4] },
            vec![1.0, 3.0, 0.0, 2.0],
            None,
            &[]
        )
        .is_err());

        // a single area with an intercept is a legal (if minimal) model
        assert!(ModelSpec::new(Family::Poisson, vec![40.0], None, &[]).is_ok());

        // more columns than areas can never have full column rank
        assert!(ModelSpec::new(
            Family::Poisson,
            vec![1.0, 2.0],
            None,
            &[vec![0.5, -0.5], vec![0.3, 0.9]]
        )
        .is_err());
    }

    #[test]
    fn fixed_mode_ranges() {
        let mut spec = ModelSpec::new(Family::Poisson, vec![1.0, 2.0, 3.0], None, &[]).unwrap();
        spec.rho_mode = RhoMode::Fixed(1.0);
        assert!(spec.validate().is_err());
        spec.rho_mode = RhoMode::Fixed(0.99);
        assert!(spec.validate().is_ok());
        spec.sigma_mode = SigmaMode::Fixed(0.0);
        assert!(spec.validate().is_err());
    }

    #[test]
    fn family_scores_match_numerical_derivatives() {
        let fams: Vec<(Family, f64)> = vec![
            (Family::Poisson, 4.0),
            (Family::Binomial { trials: vec![10.0] }, 7.0),
            (Family::Gaussian, 1.3),
        ];
        for (fam, y) in fams {
            for &eta in &[-1.2, 0.0, 0.8, 2.0] {
                let sigma = 1.7;
                let f = |e: f64| fam.log_lik(0, y, e, sigma);
                // first differences tolerate a small h; second differences
                // need a larger one to stay above rounding noise
                let h1 = 1e-6;
                let num_grad = (f(eta + h1) - f(eta - h1)) / (2.0 * h1);
                let h2 = 1e-4;
                let num_curv = -(f(eta + h2) - 2.0 * f(eta) + f(eta - h2)) / (h2 * h2);
                assert!(
                    (fam.score(0, y, eta, sigma) - num_grad).abs() < 1e-5,
                    "score mismatch for {fam:?} at eta={eta}"
                );
                assert!(
                    (fam.curvature(0, eta, sigma) - num_curv).abs() < 1e-4,
                    "curvature mismatch for {fam:?} at eta={eta}"
                );
            }
        }
    }

    #[test]
    fn binomial_loglik_is_a_normalized_pmf() {
        let fam = Family::Binomial { trials: vec![6.0] };
        let eta = 0.4;
        let total: f64 = (0..=6)
            .map(|y| fam.log_lik(0, y as f64, eta, 1.0).exp())
            .sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn poisson_loglik_is_a_normalized_pmf() {
        let fam = Family::Poisson;
        let eta = 1.1;
        let total: f64 = (0..200)
            .map(|y| fam.log_lik(0, y as f64, eta, 1.0).exp())
            .sum();
        assert!((total - 1.0).abs() < 1e-12);
    }
}
