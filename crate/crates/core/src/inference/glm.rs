//! Fixed-effects-only fit: the model with `phi = 0`. Used to center the
//! hyperparameter grid and as the baseline for residual diagnostics.

use nalgebra::{DMatrix, DVector};

use super::{Family, ModelSpec};
use crate::error::{Error, Result};

/// Posterior mode of `beta` with `phi` pinned at zero, plus the quantities
/// diagnostics are built from.
#[derive(Debug, Clone)]
pub struct GlmFit {
    pub beta: Vec<f64>,
    pub eta: Vec<f64>,
    pub mu: Vec<f64>,
    /// Maximum-likelihood observation precision; `None` outside the Gaussian
    /// family or when the spec pins it.
    pub sigma_hat: Option<f64>,
    /// `(y - mu) / sqrt(Var(y))` at the fitted means.
    pub pearson: Vec<f64>,
    pub log_lik: f64,
    pub iterations: usize,
}

/// Newton fit of the fixed effects under the spec's `beta` prior. The
/// Gaussian precision is profiled out (the mode of `beta` does not depend on
/// it up to the weak prior ridge, so the fit runs at `sigma = 1` and the
/// precision is estimated from the residuals afterwards).
pub fn fit_glm(spec: &ModelSpec) -> Result<GlmFit> {
    spec.validate()?;
    let n = spec.n();
    let p = spec.p();
    let x = &spec.design;
    let ridge = 1.0 / spec.priors.beta_variance;

    let mut beta = DVector::zeros(p);
    beta[0] = initial_intercept(spec);

    let sigma_fit = match spec.sigma_mode {
        super::SigmaMode::Fixed(v) if spec.family.needs_sigma() => v,
        _ => 1.0,
    };

    let objective = |beta: &DVector<f64>| -> f64 {
        let eta = spec.eta(beta, &vec![0.0; n]);
        let ll: f64 = (0..n)
            .map(|k| spec.family.log_lik(k, spec.y[k], eta[k], sigma_fit))
            .sum();
        ll - 0.5 * ridge * beta.dot(beta)
    };

    let mut obj = objective(&beta);
    let mut converged = false;
    let mut iterations = 0;
    for iter in 0..100 {
        iterations = iter + 1;
        let eta = spec.eta(&beta, &vec![0.0; n]);
        let mut grad = DVector::zeros(p);
        let mut hess = DMatrix::zeros(p, p);
        for k in 0..n {
            let u = spec.family.score(k, spec.y[k], eta[k], sigma_fit);
            let c = spec.family.curvature(k, eta[k], sigma_fit);
            for j in 0..p {
                grad[j] += x[(k, j)] * u;
                for l in 0..p {
                    hess[(j, l)] += x[(k, j)] * c * x[(k, l)];
                }
            }
        }
        grad -= ridge * &beta;
        for j in 0..p {
            hess[(j, j)] += ridge;
        }
        if grad.amax() < 1e-6 {
            converged = true;
            break;
        }
        let step = hess
            .cholesky()
            .ok_or_else(|| Error::Numerical("GLM Hessian is not positive definite".into()))?
            .solve(&grad);
        // the acceptance allowance keeps full steps viable once the true
        // improvement drops below the floating-point resolution of obj
        let floor = obj - 1e-12 * (1.0 + obj.abs());
        let mut scale = 1.0;
        loop {
            let trial = &beta + scale * &step;
            let trial_obj = objective(&trial);
            if trial_obj.is_finite() && trial_obj >= floor {
                beta = trial;
                obj = trial_obj;
                break;
            }
            scale *= 0.5;
            if scale < 1e-12 {
                return Err(Error::NonConvergence {
                    context: "fixed-effects Newton line search",
                    iterations,
                });
            }
        }
    }
    if !converged {
        return Err(Error::NonConvergence {
            context: "fixed-effects Newton fit",
            iterations,
        });
    }

    let eta = spec.eta(&beta, &vec![0.0; n]);
    let mu: Vec<f64> = (0..n).map(|k| spec.family.mean(k, eta[k])).collect();
    let sigma_hat = if spec.family.needs_sigma() {
        match spec.sigma_mode {
            super::SigmaMode::Fixed(v) => Some(v),
            super::SigmaMode::Estimate => {
                let rss: f64 = (0..n).map(|k| (spec.y[k] - eta[k]).powi(2)).sum();
                if rss <= 0.0 {
                    return Err(Error::Numerical(
                        "Gaussian residuals are identically zero; precision is unbounded".into(),
                    ));
                }
                Some(n as f64 / rss)
            }
        }
    } else {
        None
    };
    let sigma_for_var = sigma_hat.unwrap_or(1.0);
    let pearson: Vec<f64> = (0..n)
        .map(|k| {
            let v = spec.family.variance(k, mu[k], sigma_for_var);
            (spec.y[k] - mu[k]) / v.sqrt()
        })
        .collect();
    let log_lik = (0..n)
        .map(|k| spec.family.log_lik(k, spec.y[k], eta[k], sigma_for_var))
        .sum();

    Ok(GlmFit {
        beta: beta.iter().copied().collect(),
        eta,
        mu,
        sigma_hat,
        pearson,
        log_lik,
        iterations,
    })
}

/// A starting intercept that keeps the first Poisson/binomial Newton step out
/// of the flat or explosive tails.
pub(crate) fn initial_intercept(spec: &ModelSpec) -> f64 {
    let n = spec.n() as f64;
    let mean_offset: f64 = spec.offset.iter().sum::<f64>() / n;
    match &spec.family {
        Family::Poisson => {
            let mean_y: f64 = spec.y.iter().sum::<f64>() / n;
            (mean_y + 0.5).ln() - mean_offset
        }
        Family::Binomial { trials } => {
            let tot_y: f64 = spec.y.iter().sum();
            let tot_n: f64 = trials.iter().sum();
            let p = ((tot_y + 0.5) / (tot_n + 1.0)).clamp(1e-6, 1.0 - 1e-6);
            super::logit(p) - mean_offset
        }
        Family::Gaussian => {
            let mean_y: f64 = spec.y.iter().sum::<f64>() / n;
            mean_y - mean_offset
        }
    }
}
