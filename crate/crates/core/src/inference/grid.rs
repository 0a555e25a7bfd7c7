//! Deterministic grid engine: Laplace evidence at every hyperparameter
//! point, posterior weights from evidence times hyperprior, and marginal
//! summaries as Gaussian mixtures over the grid.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{Continuous, Gamma, Normal};

use super::glm::fit_glm;
use super::latent::{
    HyperPoint, LatentSolver, LevelAdjustment, Marginals, ModeFit, NEWTON_MAX_ITERATIONS,
    NEWTON_TOL,
};
use super::result::{
    mixture_mean_sd, mixture_quantiles, pearson_from_medians, weighted_summary, BackendKind, Dic,
    FitResult, IntervalSummary, ParamSummary, PhiMarginals,
};
use super::{Family, ModelSpec, RhoMode, SigmaMode};
use crate::error::{Error, Result};
use crate::gmrf::{symbolic_for_graph, LerouxPrecision};
use crate::graph::NeighbourMatrix;

/// Grid resolution and reproducibility knobs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridConfig {
    /// Points along logit(rho) when rho is estimated.
    pub n_rho: usize,
    /// Points along log(tau).
    pub n_tau: usize,
    /// Points along log(sigma), Gaussian family with estimated precision.
    pub n_sigma: usize,
    /// Bounds of the logit(rho) axis.
    pub logit_rho_range: (f64, f64),
    /// Half-width of the log(tau) and log(sigma) axes around their centers.
    pub log_spread: f64,
    /// Posterior draws for the DIC computation.
    pub dic_draws: usize,
    /// Seed for the DIC draws (the only randomness in this engine).
    pub seed: u64,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            n_rho: 15,
            n_tau: 15,
            n_sigma: 10,
            logit_rho_range: (-6.0, 6.0),
            log_spread: 4.0,
            dic_draws: 1000,
            seed: 0,
        }
    }
}

/// One evaluated hyperparameter point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridPoint {
    pub rho: f64,
    pub tau: f64,
    pub sigma: Option<f64>,
    /// Laplace log marginal likelihood at this point.
    pub log_evidence: f64,
    /// Unnormalized log posterior: evidence plus hyperprior densities.
    pub log_posterior: f64,
    /// Normalized posterior weight.
    pub weight: f64,
}

/// The evaluated grid. Failed points are excluded from the weights but
/// counted, never silently dropped.
#[derive(Debug, Clone)]
pub struct HyperGrid {
    pub points: Vec<GridPoint>,
    pub failed_points: usize,
}

/// Normalizes log weights to probabilities via max-shifted log-sum-exp, so
/// that well-separated evidence values cannot underflow the total.
pub(crate) fn normalize_log_weights(logw: &mut [f64]) -> Result<()> {
    let max = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::Numerical(
            "every hyperparameter weight vanished; the posterior has no mass on the grid".into(),
        ));
    }
    let sum: f64 = logw.iter().map(|v| (v - max).exp()).sum();
    for v in logw.iter_mut() {
        *v = (*v - max).exp() / sum;
    }
    Ok(())
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![0.5 * (lo + hi)];
    }
    (0..n)
        .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
        .collect()
}

/// Method-of-moments center for the log(tau) axis: the reciprocal variance
/// of crude per-area latent residuals from the fixed-effects fit.
pub(crate) fn tau_center(spec: &ModelSpec, glm_eta: &[f64]) -> f64 {
    let n = spec.n();
    let z: Vec<f64> = (0..n)
        .map(|k| match &spec.family {
            Family::Poisson => (spec.y[k] + 0.5).ln() - glm_eta[k],
            Family::Binomial { trials } => {
                super::logit((spec.y[k] + 0.5) / (trials[k] + 1.0)) - glm_eta[k]
            }
            Family::Gaussian => spec.y[k] - glm_eta[k],
        })
        .collect();
    let mean = z.iter().sum::<f64>() / n as f64;
    let var = z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    1.0 / var.max(1e-4)
}

struct PointFit<'s> {
    mode: ModeFit<'s>,
    marg: Marginals,
    level: LevelAdjustment,
    log_posterior: f64,
}

impl PointFit<'_> {
    /// Centred random-effect component: `phi_k - mean(phi)`.
    fn phi_centred(&self, k: usize) -> (f64, f64) {
        let var = self.marg.phi_sd[k].powi(2) - 2.0 * self.level.cov_phi[k] + self.level.var_bar;
        (self.mode.phi[k] - self.level.mean_bar, var.max(0.0).sqrt())
    }

    /// Intercept with the field level folded in: `beta_0 + mean(phi)`.
    fn intercept_with_level(&self) -> (f64, f64) {
        let var =
            self.marg.beta_sd[0].powi(2) + 2.0 * self.level.cov_beta0 + self.level.var_bar;
        (self.mode.beta[0] + self.level.mean_bar, var.max(0.0).sqrt())
    }
}

/// Fits the model by Laplace approximation over a hyperparameter grid.
///
/// Marginal posteriors of `beta`, `phi`, and the linear predictor are finite
/// Gaussian mixtures over the grid; hyperparameter posteriors are weighted
/// discrete summaries; DIC comes from seeded posterior draws. Individual
/// grid-point failures are tolerated and counted; only a grid with no
/// surviving point is an error.
pub fn fit(spec: &ModelSpec, w: &NeighbourMatrix, config: &GridConfig) -> Result<FitResult> {
    spec.validate()?;
    if w.graph().n_areas() != spec.n() {
        return Err(Error::Model(format!(
            "neighbour matrix is over {} areas, data over {}",
            w.graph().n_areas(),
            spec.n()
        )));
    }
    spec.reject_isolated(w)?;
    if config.n_rho == 0 || config.n_tau == 0 || config.n_sigma == 0 || config.dic_draws == 0 {
        return Err(Error::Model("grid dimensions and DIC draws must be positive".into()));
    }

    let n = spec.n();
    let p = spec.p();
    let glm = fit_glm(spec)?;

    // grid axes; fixed hyperparameters collapse their dimension
    let rho_axis: Vec<(f64, Option<f64>)> = match spec.rho_mode {
        RhoMode::Fixed(v) => vec![(v, None)],
        RhoMode::Estimate => {
            let (lo, hi) = config.logit_rho_range;
            linspace(lo, hi, config.n_rho)
                .into_iter()
                .map(|l| (super::sigmoid(l), Some(l)))
                .collect()
        }
    };
    let t_center = tau_center(spec, &glm.eta).ln();
    let tau_axis: Vec<f64> = linspace(
        t_center - config.log_spread,
        t_center + config.log_spread,
        config.n_tau,
    )
    .into_iter()
    .map(f64::exp)
    .collect();
    let sigma_axis: Vec<(f64, bool)> = if spec.family.needs_sigma() {
        match spec.sigma_mode {
            SigmaMode::Fixed(v) => vec![(v, false)],
            SigmaMode::Estimate => {
                let center = glm
                    .sigma_hat
                    .expect("fixed-effects fit estimates the Gaussian precision")
                    .ln();
                linspace(
                    center - config.log_spread,
                    center + config.log_spread,
                    config.n_sigma,
                )
                .into_iter()
                .map(|l| (l.exp(), true))
                .collect()
            }
        }
    } else {
        vec![(1.0, false)]
    };

    let sym = symbolic_for_graph(w.graph());
    let solver = LatentSolver {
        spec,
        w,
        sym: &sym,
        max_iterations: NEWTON_MAX_ITERATIONS,
        tol: NEWTON_TOL,
    };

    let tau_prior = Gamma::new(spec.priors.tau_shape, spec.priors.tau_rate)
        .expect("validated gamma prior");
    let sigma_prior = Gamma::new(spec.priors.sigma_shape, spec.priors.sigma_rate)
        .expect("validated gamma prior");
    let rho_prior = Normal::new(0.0, spec.priors.logit_rho_variance.sqrt())
        .expect("validated normal prior");

    let glm_beta = DVector::from_column_slice(&glm.beta);
    let zeros = vec![0.0; n];
    let mut points: Vec<PointFit> = Vec::new();
    let mut failed = 0usize;
    let mut last_error: Option<Error> = None;
    let mut warm: Option<(Vec<f64>, DVector<f64>)> = None;

    for &(rho, logit_rho) in &rho_axis {
        let logdet_q = match LerouxPrecision::new(w, rho, 1.0)
            .and_then(|q| Ok(q.factor(&sym)?.log_det()))
        {
            Ok(v) => v,
            Err(e) => {
                failed += tau_axis.len() * sigma_axis.len();
                last_error = Some(e);
                continue;
            }
        };
        for &tau in &tau_axis {
            for &(sigma, sigma_estimated) in &sigma_axis {
                let hyper = HyperPoint { rho, tau, sigma };
                // warm start from the previous point; the first point starts
                // at the fixed-effects fit with a flat field
                let fit = match &warm {
                    Some((f, b)) => solver.mode(hyper, logdet_q, Some((f, b))),
                    None => solver.mode(hyper, logdet_q, Some((&zeros, &glm_beta))),
                };
                match fit {
                    Ok(mode) => {
                        warm = Some((mode.phi.clone(), mode.beta.clone()));
                        let marg = mode.marginal_sds(&spec.design);
                        let level = mode.level_adjustment();
                        let mut log_posterior = mode.log_evidence;
                        // hyperpriors on the scales the grid is uniform in:
                        // log tau and log sigma carry the Jacobian factor,
                        // logit rho uses its own normal prior directly
                        log_posterior += tau_prior.ln_pdf(tau) + tau.ln();
                        if let Some(l) = logit_rho {
                            log_posterior += rho_prior.ln_pdf(l);
                        }
                        if sigma_estimated {
                            log_posterior += sigma_prior.ln_pdf(sigma) + sigma.ln();
                        }
                        points.push(PointFit {
                            mode,
                            marg,
                            level,
                            log_posterior,
                        });
                    }
                    Err(e) => {
                        failed += 1;
                        last_error = Some(e);
                    }
                }
            }
        }
    }

    if points.is_empty() {
        let detail = last_error
            .map(|e| e.to_string())
            .unwrap_or_else(|| "no grid points evaluated".into());
        return Err(Error::Numerical(format!(
            "model is unfittable: all {failed} hyperparameter grid points failed ({detail})"
        )));
    }

    let mut weights: Vec<f64> = points.iter().map(|pt| pt.log_posterior).collect();
    normalize_log_weights(&mut weights)?;

    // parameter marginals as Gaussian mixtures over the surviving points
    let mut comps: Vec<(f64, f64, f64)> = Vec::with_capacity(points.len());
    let mut summarize = |extract_mean: &dyn Fn(&PointFit) -> f64,
                         extract_sd: &dyn Fn(&PointFit) -> f64|
     -> ParamSummary {
        comps.clear();
        for (i, pt) in points.iter().enumerate() {
            comps.push((weights[i], extract_mean(pt), extract_sd(pt)));
        }
        let (mean, sd) = mixture_mean_sd(&comps);
        let q = mixture_quantiles(&comps, &[0.025, 0.5, 0.975]);
        ParamSummary {
            mean,
            sd,
            median: q[1],
            lo: q[0],
            hi: q[2],
        }
    };

    // phi is reported centred with the field level folded into the
    // intercept: the split between the two is identified only by the prior,
    // and under strong smoothing its variance would swamp every per-area
    // summary. The linear predictor is unchanged.
    let beta_summaries: Vec<ParamSummary> = (0..p)
        .map(|j| {
            if j == 0 {
                summarize(&|pt| pt.intercept_with_level().0, &|pt| {
                    pt.intercept_with_level().1
                })
            } else {
                summarize(&|pt| pt.mode.beta[j], &|pt| pt.marg.beta_sd[j])
            }
        })
        .collect();
    let phi_summaries: Vec<ParamSummary> = (0..n)
        .map(|k| summarize(&|pt| pt.phi_centred(k).0, &|pt| pt.phi_centred(k).1))
        .collect();

    // linear predictor, fitted values, and risk all share the eta mixture;
    // the response-scale quantiles are the monotone transform of eta's
    let mut eta_summaries = Vec::with_capacity(n);
    let mut mu_summaries = Vec::with_capacity(n);
    let mut risk_summaries = Vec::with_capacity(n);
    for k in 0..n {
        comps.clear();
        for (i, pt) in points.iter().enumerate() {
            comps.push((weights[i], pt.mode.eta[k], pt.marg.eta_sd[k]));
        }
        let q = mixture_quantiles(&comps, &[0.025, 0.5, 0.975]);
        eta_summaries.push(IntervalSummary {
            median: q[1],
            lo: q[0],
            hi: q[2],
        });
        mu_summaries.push(IntervalSummary {
            median: spec.family.mean(k, q[1]),
            lo: spec.family.mean(k, q[0]),
            hi: spec.family.mean(k, q[2]),
        });
        if matches!(spec.family, Family::Poisson) {
            risk_summaries.push(IntervalSummary {
                median: (q[1] - spec.offset[k]).exp(),
                lo: (q[0] - spec.offset[k]).exp(),
                hi: (q[2] - spec.offset[k]).exp(),
            });
        }
    }

    let tau_summary = weighted_summary(
        &points.iter().map(|pt| pt.mode.hyper.tau).collect::<Vec<_>>(),
        &weights,
    );
    let rho_summary = weighted_summary(
        &points.iter().map(|pt| pt.mode.hyper.rho).collect::<Vec<_>>(),
        &weights,
    );
    let sigma_summary = if spec.family.needs_sigma() {
        Some(weighted_summary(
            &points.iter().map(|pt| pt.mode.hyper.sigma).collect::<Vec<_>>(),
            &weights,
        ))
    } else {
        None
    };

    // DIC from seeded joint draws: grid point by weight, then the exact
    // Gaussian at that point
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut cum = Vec::with_capacity(points.len());
    let mut acc = 0.0;
    for &w_i in &weights {
        acc += w_i;
        cum.push(acc);
    }
    let deviance = |eta: &[f64], sigma: f64| -> f64 {
        -2.0 * (0..n)
            .map(|k| spec.family.log_lik(k, spec.y[k], eta[k], sigma))
            .sum::<f64>()
    };
    let mut mean_deviance = 0.0;
    for _ in 0..config.dic_draws {
        let u: f64 = rng.gen();
        let idx = cum.partition_point(|&c| c < u).min(points.len() - 1);
        let (phi_draw, beta_draw) = points[idx].mode.sample_joint(&mut rng);
        let eta_draw = spec.eta(&beta_draw, &phi_draw);
        mean_deviance += deviance(&eta_draw, points[idx].mode.hyper.sigma);
    }
    mean_deviance /= config.dic_draws as f64;

    let phi_mean: Vec<f64> = (0..n)
        .map(|k| {
            points
                .iter()
                .zip(&weights)
                .map(|(pt, &w_i)| w_i * pt.mode.phi[k])
                .sum()
        })
        .collect();
    let beta_mean = DVector::from_iterator(
        p,
        (0..p).map(|j| {
            points
                .iter()
                .zip(&weights)
                .map(|(pt, &w_i)| w_i * pt.mode.beta[j])
                .sum()
        }),
    );
    let sigma_mean: f64 = points
        .iter()
        .zip(&weights)
        .map(|(pt, &w_i)| w_i * pt.mode.hyper.sigma)
        .sum();
    let eta_at_mean = spec.eta(&beta_mean, &phi_mean);
    let dev_at_mean = deviance(&eta_at_mean, sigma_mean);
    let p_d = mean_deviance - dev_at_mean;
    let dic = Dic {
        dic: mean_deviance + p_d,
        p_d,
        mean_deviance,
    };

    let sigma_for_pearson = sigma_summary.map(|s| s.median).unwrap_or(1.0);
    let mu_medians: Vec<f64> = mu_summaries.iter().map(|m| m.median).collect();
    let pearson = pearson_from_medians(spec, &mu_medians, sigma_for_pearson);

    let marginals = PhiMarginals::Mixture {
        weights: weights.clone(),
        means: points
            .iter()
            .map(|pt| (0..n).map(|k| pt.phi_centred(k).0).collect())
            .collect(),
        sds: points
            .iter()
            .map(|pt| (0..n).map(|k| pt.phi_centred(k).1).collect())
            .collect(),
    };
    let grid = HyperGrid {
        points: points
            .iter()
            .zip(&weights)
            .map(|(pt, &w_i)| GridPoint {
                rho: pt.mode.hyper.rho,
                tau: pt.mode.hyper.tau,
                sigma: spec.family.needs_sigma().then_some(pt.mode.hyper.sigma),
                log_evidence: pt.mode.log_evidence,
                log_posterior: pt.log_posterior,
                weight: w_i,
            })
            .collect(),
        failed_points: failed,
    };

    Ok(FitResult {
        backend: BackendKind::Laplace,
        family: spec.family.kind(),
        beta: beta_summaries,
        phi: phi_summaries,
        eta: eta_summaries,
        mu: mu_summaries,
        risk: matches!(spec.family, Family::Poisson).then_some(risk_summaries),
        tau: tau_summary,
        rho: rho_summary,
        rho_fixed: match spec.rho_mode {
            RhoMode::Fixed(v) => Some(v),
            RhoMode::Estimate => None,
        },
        sigma: sigma_summary,
        pearson,
        dic,
        marginals,
        grid: Some(grid),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::AdjacencyGraph;
    use std::sync::Arc;

    fn small_grid() -> GridConfig {
        GridConfig {
            n_rho: 5,
            n_tau: 5,
            n_sigma: 4,
            dic_draws: 200,
            ..GridConfig::default()
        }
    }

    #[test]
    fn log_weight_normalization() {
        let mut w = vec![-1000.0, -1001.0, -999.0];
        normalize_log_weights(&mut w).unwrap();
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        // shift invariance
        let mut w2 = vec![-2000.0, -2001.0, -1999.0];
        normalize_log_weights(&mut w2).unwrap();
        for (a, b) in w.iter().zip(&w2) {
            assert!((a - b).abs() < 1e-12);
        }
        // a minus-infinity log weight gets exactly zero mass
        let mut w3 = vec![0.0, f64::NEG_INFINITY];
        normalize_log_weights(&mut w3).unwrap();
        assert_eq!(w3, vec![1.0, 0.0]);
        // no mass anywhere is an error
        let mut w4 = vec![f64::NEG_INFINITY, f64::NEG_INFINITY];
        assert!(normalize_log_weights(&mut w4).is_err());
    }

    #[test]
    fn single_area_poisson_recovers_observed_rate() {
        let g = Arc::new(AdjacencyGraph::from_edge_list(1, &[]).unwrap());
        let w = NeighbourMatrix::all_active(g);
        let mut spec = ModelSpec::new(
            Family::Poisson,
            vec![50.0],
            Some(vec![40.0f64.ln()]),
            &[],
        )
        .unwrap();
        spec.rho_mode = RhoMode::Fixed(0.0);
        let fit = fit(&spec, &w, &small_grid()).unwrap();
        let mu = fit.mu[0].median;
        assert!((mu - 50.0).abs() < 3.0, "mu median {mu}");
        let risk = fit.risk.as_ref().unwrap()[0].median;
        assert!((risk - 1.25).abs() < 0.08, "risk median {risk}");
        assert!(fit.mu[0].lo < mu && mu < fit.mu[0].hi);
    }

    #[test]
    fn summaries_are_ordered_and_positive_where_required() {
        let g = Arc::new(AdjacencyGraph::lattice(3, 3));
        let w = NeighbourMatrix::all_active(g);
        let y = vec![3.0, 5.0, 2.0, 8.0, 4.0, 2.0, 6.0, 1.0, 4.0];
        let spec = ModelSpec::new(Family::Poisson, y, None, &[]).unwrap();
        let fit = fit(&spec, &w, &small_grid()).unwrap();
        for s in fit.beta.iter().chain(fit.phi.iter()) {
            assert!(s.lo <= s.median && s.median <= s.hi);
            assert!(s.sd > 0.0);
        }
        for m in &fit.mu {
            assert!(m.lo <= m.median && m.median <= m.hi);
            assert!(m.lo > 0.0, "Poisson fitted values are positive");
        }
        assert!(fit.tau.lo <= fit.tau.median && fit.tau.median <= fit.tau.hi);
        let grid = fit.grid.as_ref().unwrap();
        assert_eq!(grid.failed_points, 0);
        let total: f64 = grid.points.iter().map(|pt| pt.weight).sum();
        assert!((total - 1.0).abs() < 1e-10);
        assert!(fit.dic.dic.is_finite());
        assert!(fit.dic.p_d > 0.0);
    }

    #[test]
    fn fixed_rho_collapses_the_grid_dimension() {
        let g = Arc::new(AdjacencyGraph::lattice(3, 3));
        let w = NeighbourMatrix::all_active(g);
        let y = vec![3.0, 5.0, 2.0, 8.0, 4.0, 2.0, 6.0, 1.0, 4.0];
        let mut spec = ModelSpec::new(Family::Poisson, y, None, &[]).unwrap();
        spec.rho_mode = RhoMode::Fixed(0.0);
        let cfg = small_grid();
        let fit = fit(&spec, &w, &cfg).unwrap();
        let grid = fit.grid.as_ref().unwrap();
        assert_eq!(grid.points.len(), cfg.n_tau);
        assert!(grid.points.iter().all(|pt| pt.rho == 0.0));
        assert_eq!(fit.rho.median, 0.0);
        assert_eq!(fit.rho.sd, 0.0);
        assert_eq!(fit.rho_fixed, Some(0.0));
    }

    #[test]
    fn gaussian_fit_estimates_sigma() {
        let g = Arc::new(AdjacencyGraph::lattice(3, 3));
        let w = NeighbourMatrix::all_active(g);
        let y = vec![0.1, -0.4, 0.3, 1.2, 0.8, -0.2, 0.5, 0.0, -0.6];
        let spec = ModelSpec::new(Family::Gaussian, y, None, &[]).unwrap();
        let fit = fit(&spec, &w, &small_grid()).unwrap();
        let sigma = fit.sigma.expect("Gaussian fit summarizes sigma");
        assert!(sigma.median > 0.0);
        assert!(fit.risk.is_none(), "risk is Poisson-only");
        let grid = fit.grid.as_ref().unwrap();
        assert_eq!(grid.points.len(), 5 * 5 * 4);
    }

    #[test]
    fn repeated_fits_are_identical() {
        let g = Arc::new(AdjacencyGraph::lattice(3, 3));
        let w = NeighbourMatrix::all_active(g);
        let y = vec![3.0, 5.0, 2.0, 8.0, 4.0, 2.0, 6.0, 1.0, 4.0];
        let spec = ModelSpec::new(Family::Poisson, y, None, &[]).unwrap();
        let a = fit(&spec, &w, &small_grid()).unwrap();
        let b = fit(&spec, &w, &small_grid()).unwrap();
        assert_eq!(a.export(), b.export());
        assert_eq!(a.dic.dic, b.dic.dic);
    }
}
