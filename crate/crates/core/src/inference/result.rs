//! Posterior summaries shared by both fitting engines, and the numeric
//! machinery that turns Gaussian mixtures or draw matrices into quantiles.

use statrs::distribution::{ContinuousCDF, Normal};
use std::sync::LazyLock;

use super::{FamilyKind, HyperGrid, ModelSpec};

static STD_NORMAL: LazyLock<Normal> = LazyLock::new(|| Normal::new(0.0, 1.0).unwrap());

pub(crate) fn std_normal_cdf(x: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(-x / std::f64::consts::SQRT_2)
}

pub(crate) fn std_normal_quantile(q: f64) -> f64 {
    STD_NORMAL.inverse_cdf(q)
}

/// Which engine produced a [`FitResult`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackendKind {
    Laplace,
    Mcmc,
}

impl BackendKind {
    pub fn name(&self) -> &'static str {
        match self {
            BackendKind::Laplace => "laplace",
            BackendKind::Mcmc => "mcmc",
        }
    }
}

/// Full summary of one scalar parameter's posterior.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParamSummary {
    pub mean: f64,
    pub sd: f64,
    pub median: f64,
    /// 2.5% quantile.
    pub lo: f64,
    /// 97.5% quantile.
    pub hi: f64,
}

/// Median and 95% interval of a derived per-area quantity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntervalSummary {
    pub median: f64,
    pub lo: f64,
    pub hi: f64,
}

/// Deviance information criterion decomposition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dic {
    pub dic: f64,
    pub p_d: f64,
    pub mean_deviance: f64,
}

/// Marginal posterior representation of the random effects, kept in full so
/// credible intervals at the standard level can be recomputed exactly.
#[derive(Debug, Clone)]
pub enum PhiMarginals {
    /// Gaussian mixture over hyperparameter grid points, indexed
    /// `[point][area]`.
    Mixture {
        weights: Vec<f64>,
        means: Vec<Vec<f64>>,
        sds: Vec<Vec<f64>>,
    },
    /// Retained draws per area, each ascending.
    Draws { sorted: Vec<Vec<f64>> },
    /// Fixed intervals, for hand-built fits in tests of interval consumers.
    Preset { lo: Vec<f64>, hi: Vec<f64> },
}

/// Posterior summaries from either engine.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub backend: BackendKind,
    pub family: FamilyKind,
    /// Per coefficient, intercept first.
    pub beta: Vec<ParamSummary>,
    pub phi: Vec<ParamSummary>,
    /// Linear predictor per area.
    pub eta: Vec<IntervalSummary>,
    /// Fitted values on the response scale.
    pub mu: Vec<IntervalSummary>,
    /// `exp(x_k' beta + phi_k)`, Poisson family only.
    pub risk: Option<Vec<IntervalSummary>>,
    pub tau: ParamSummary,
    pub rho: ParamSummary,
    /// Set when the spatial dependence was pinned rather than estimated.
    pub rho_fixed: Option<f64>,
    /// Gaussian observation precision summary, when estimated or pinned.
    pub sigma: Option<ParamSummary>,
    /// Pearson residuals at the posterior-median fitted values.
    pub pearson: Vec<f64>,
    pub dic: Dic,
    pub marginals: PhiMarginals,
    /// The evaluated hyperparameter grid (Laplace engine only).
    pub grid: Option<HyperGrid>,
}

impl FitResult {
    pub fn n_areas(&self) -> usize {
        self.phi.len()
    }

    /// 95% credible interval (2.5%, 97.5%) of each area's random effect,
    /// the exact quantities the neighbour-matrix update consumes.
    pub fn credible_intervals_phi(&self) -> Vec<(f64, f64)> {
        match &self.marginals {
            PhiMarginals::Mixture {
                weights,
                means,
                sds,
            } => {
                let n = means[0].len();
                let mut out = Vec::with_capacity(n);
                let mut comps = Vec::with_capacity(weights.len());
                for k in 0..n {
                    comps.clear();
                    comps.extend(
                        weights
                            .iter()
                            .enumerate()
                            .map(|(i, &w)| (w, means[i][k], sds[i][k])),
                    );
                    let q = mixture_quantiles(&comps, &[0.025, 0.975]);
                    out.push((q[0], q[1]));
                }
                out
            }
            PhiMarginals::Draws { sorted } => sorted
                .iter()
                .map(|d| (sorted_quantile(d, 0.025), sorted_quantile(d, 0.975)))
                .collect(),
            PhiMarginals::Preset { lo, hi } => {
                lo.iter().zip(hi).map(|(&a, &b)| (a, b)).collect()
            }
        }
    }

    /// Structured text export: a key-value block, a blank line, then the
    /// per-area table. Columns are fixed; `NA` marks quantities the family
    /// does not define.
    pub fn export(&self) -> String {
        let mut s = String::new();
        let f = fmt_num;
        s.push_str(&format!("backend {}\n", self.backend.name()));
        s.push_str(&format!("n_areas {}\n", self.n_areas()));
        s.push_str(&format!("dic {}\n", f(self.dic.dic)));
        s.push_str(&format!("p_d {}\n", f(self.dic.p_d)));
        s.push_str(&format!("mean_deviance {}\n", f(self.dic.mean_deviance)));
        for (j, b) in self.beta.iter().enumerate() {
            s.push_str(&format!(
                "beta{j} mean={} sd={} median={} lo={} hi={}\n",
                f(b.mean),
                f(b.sd),
                f(b.median),
                f(b.lo),
                f(b.hi)
            ));
        }
        let hyper = |s: &mut String, name: &str, p: &ParamSummary| {
            s.push_str(&format!(
                "{name} mean={} sd={} median={} lo={} hi={}\n",
                f(p.mean),
                f(p.sd),
                f(p.median),
                f(p.lo),
                f(p.hi)
            ));
        };
        hyper(&mut s, "tau", &self.tau);
        hyper(&mut s, "rho", &self.rho);
        if let Some(v) = self.rho_fixed {
            s.push_str(&format!("rho_fixed {}\n", f(v)));
        }
        if let Some(sig) = &self.sigma {
            hyper(&mut s, "sigma", sig);
        }
        if let Some(grid) = &self.grid {
            s.push_str(&format!("grid_points {}\n", grid.points.len()));
            s.push_str(&format!("grid_failed_points {}\n", grid.failed_points));
        }
        s.push('\n');
        s.push_str("area_id phi_median phi_lo phi_hi mu_median risk_median\n");
        for k in 0..self.n_areas() {
            let risk = match &self.risk {
                Some(r) => f(r[k].median),
                None => "NA".to_string(),
            };
            s.push_str(&format!(
                "{k} {} {} {} {} {}\n",
                f(self.phi[k].median),
                f(self.phi[k].lo),
                f(self.phi[k].hi),
                f(self.mu[k].median),
                risk
            ));
        }
        s
    }
}

pub(crate) fn fmt_num(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.6}")
    } else {
        "NA".to_string()
    }
}

/// Pearson residuals at given fitted medians; `sigma` is the posterior
/// median precision for the Gaussian family, ignored otherwise.
pub(crate) fn pearson_from_medians(spec: &ModelSpec, mu: &[f64], sigma: f64) -> Vec<f64> {
    (0..spec.n())
        .map(|k| {
            let var = spec.family.variance(k, mu[k], sigma);
            (spec.y[k] - mu[k]) / var.sqrt()
        })
        .collect()
}

/// Quantiles of a Gaussian mixture by bisection on its CDF. Components are
/// `(weight, mean, sd)`; weights need not be normalized. Components carrying
/// less than 1e-12 of the total mass are dropped and the rest renormalized.
/// `probs` must be ascending. Accuracy 1e-6 (absolute, relative for large
/// magnitudes).
pub(crate) fn mixture_quantiles(comps: &[(f64, f64, f64)], probs: &[f64]) -> Vec<f64> {
    let total: f64 = comps.iter().map(|c| c.0).sum();
    assert!(total > 0.0, "mixture has no mass");
    let kept: Vec<(f64, f64, f64)> = comps
        .iter()
        .filter(|c| c.0 > 1e-12 * total)
        .copied()
        .collect();
    let norm: f64 = kept.iter().map(|c| c.0).sum();

    if kept.len() == 1 {
        let (_, m, s) = kept[0];
        return probs.iter().map(|&q| m + s * std_normal_quantile(q)).collect();
    }

    let mut lo0 = f64::INFINITY;
    let mut hi0 = f64::NEG_INFINITY;
    for &(_, m, s) in &kept {
        lo0 = lo0.min(m - 10.0 * s);
        hi0 = hi0.max(m + 10.0 * s);
    }
    let cdf = |x: f64| -> f64 {
        kept.iter()
            .map(|&(w, m, s)| w * std_normal_cdf((x - m) / s))
            .sum::<f64>()
            / norm
    };
    let tol = 1e-6;

    probs
        .iter()
        .map(|&q| {
            let (mut lo, mut hi) = (lo0, hi0);
            for _ in 0..200 {
                if hi - lo < tol {
                    break;
                }
                let mid = 0.5 * (lo + hi);
                if cdf(mid) < q {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            0.5 * (lo + hi)
        })
        .collect()
}

/// Mean and standard deviation of a Gaussian mixture, closed form.
pub(crate) fn mixture_mean_sd(comps: &[(f64, f64, f64)]) -> (f64, f64) {
    let total: f64 = comps.iter().map(|c| c.0).sum();
    let mean: f64 = comps.iter().map(|&(w, m, _)| w * m).sum::<f64>() / total;
    let second: f64 = comps
        .iter()
        .map(|&(w, m, s)| w * (s * s + m * m))
        .sum::<f64>()
        / total;
    (mean, (second - mean * mean).max(0.0).sqrt())
}

/// Linear-interpolation quantile of an ascending slice.
pub(crate) fn sorted_quantile(sorted: &[f64], q: f64) -> f64 {
    let m = sorted.len();
    assert!(m > 0, "empty sample");
    if m == 1 {
        return sorted[0];
    }
    let h = q * (m - 1) as f64;
    let i = h.floor() as usize;
    if i + 1 >= m {
        return sorted[m - 1];
    }
    let frac = h - i as f64;
    sorted[i] + frac * (sorted[i + 1] - sorted[i])
}

/// Summary of an ascending draw vector.
pub(crate) fn summary_from_sorted(sorted: &[f64]) -> ParamSummary {
    let m = sorted.len() as f64;
    let mean = sorted.iter().sum::<f64>() / m;
    let var = sorted.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m;
    ParamSummary {
        mean,
        sd: var.sqrt(),
        median: sorted_quantile(sorted, 0.5),
        lo: sorted_quantile(sorted, 0.025),
        hi: sorted_quantile(sorted, 0.975),
    }
}

/// Summary of a weighted discrete distribution (hyperparameter grids).
/// Quantiles are the smallest value whose cumulative weight reaches the
/// probability.
pub(crate) fn weighted_summary(values: &[f64], weights: &[f64]) -> ParamSummary {
    assert_eq!(values.len(), weights.len());
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let total: f64 = weights.iter().sum();
    let mean: f64 = values.iter().zip(weights).map(|(v, w)| v * w).sum::<f64>() / total;
    let second: f64 = values
        .iter()
        .zip(weights)
        .map(|(v, w)| v * v * w)
        .sum::<f64>()
        / total;
    let quantile = |q: f64| -> f64 {
        let mut cum = 0.0;
        for &i in &idx {
            cum += weights[i] / total;
            if cum >= q {
                return values[i];
            }
        }
        values[idx[idx.len() - 1]]
    };
    ParamSummary {
        mean,
        sd: (second - mean * mean).max(0.0).sqrt(),
        median: quantile(0.5),
        lo: quantile(0.025),
        hi: quantile(0.975),
    }
}

/// Minimal FitResult with preset intervals, for interval consumers.
#[cfg(test)]
pub(crate) fn preset_fit(lo: Vec<f64>, hi: Vec<f64>) -> FitResult {
    let n = lo.len();
    let zero = ParamSummary {
        mean: 0.0,
        sd: 0.0,
        median: 0.0,
        lo: 0.0,
        hi: 0.0,
    };
    let iv = IntervalSummary {
        median: 0.0,
        lo: 0.0,
        hi: 0.0,
    };
    FitResult {
        backend: BackendKind::Laplace,
        family: FamilyKind::Poisson,
        beta: vec![zero],
        phi: vec![zero; n],
        eta: vec![iv; n],
        mu: vec![iv; n],
        risk: None,
        tau: zero,
        rho: zero,
        rho_fixed: None,
        sigma: None,
        pearson: vec![0.0; n],
        dic: Dic {
            dic: 0.0,
            p_d: 0.0,
            mean_deviance: 0.0,
        },
        marginals: PhiMarginals::Preset { lo, hi },
        grid: None,
    }
}
