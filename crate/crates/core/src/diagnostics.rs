//! Spatial autocorrelation statistics, overdispersion, and the scoring
//! machinery for replication studies.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::graph::{BoundarySet, NeighbourMatrix};
use crate::inference::{FitResult, ModelSpec};

/// Moran's I over the active edges:
///
/// ```text
///   I = (n / S0) * sum_kj w_kj (v_k - vbar)(v_j - vbar) / sum_k (v_k - vbar)^2
/// ```
///
/// where the double sum runs over ordered pairs, so S0 counts every active
/// edge twice. Undefined (an error, not a NaN) when the values have zero
/// variance or no edge is active.
pub fn morans_i(values: &[f64], w: &NeighbourMatrix) -> Result<f64> {
    let n = values.len();
    if n != w.graph().n_areas() {
        return Err(Error::Model(format!(
            "{n} values for {} areas",
            w.graph().n_areas()
        )));
    }
    if n < 2 {
        return Err(Error::Undefined(
            "Moran's I needs at least two areas".into(),
        ));
    }
    let s0 = 2.0 * w.active_count() as f64;
    if s0 == 0.0 {
        return Err(Error::Undefined(
            "Moran's I needs at least one active edge".into(),
        ));
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let denom: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
    if denom == 0.0 {
        return Err(Error::Undefined(
            "Moran's I is undefined for constant values".into(),
        ));
    }
    let mut cross = 0.0;
    for (e, &(k, j)) in w.graph().edges().iter().enumerate() {
        if w.edge_active(e) {
            cross += 2.0 * (values[k] - mean) * (values[j] - mean);
        }
    }
    Ok((n as f64 / s0) * cross / denom)
}

/// SplitMix64 step, used to derive independent per-task seeds from a base
/// seed and a stream index.
pub(crate) fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0x9e37_79b9_7f4a_7c15))
        .wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Two-sided permutation test of no spatial autocorrelation:
/// `p = (1 + #{|I_perm| >= |I_obs|}) / (n_perm + 1)`. Deterministic given the
/// seed regardless of scheduling (each permutation draws its own generator).
pub fn moran_permutation_test(
    values: &[f64],
    w: &NeighbourMatrix,
    n_perm: usize,
    seed: u64,
) -> Result<f64> {
    let i_obs = morans_i(values, w)?.abs();
    if n_perm == 0 {
        return Ok(1.0);
    }
    let exceed: usize = (0..n_perm)
        .into_par_iter()
        .map(|p| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, p as u64));
            let mut v = values.to_vec();
            v.shuffle(&mut rng);
            // permutation preserves the value multiset, so the statistic
            // stays defined
            let i_perm = morans_i(&v, w).expect("defined for permuted values");
            usize::from(i_perm.abs() >= i_obs)
        })
        .sum();
    Ok((1 + exceed) as f64 / (n_perm + 1) as f64)
}

/// `sum r_k^2 / (n - p)` over the fit's Pearson residuals; near 1 for a
/// well-specified model, well above it under overdispersion.
pub fn overdispersion(spec: &ModelSpec, fit: &FitResult) -> Result<f64> {
    let n = spec.n();
    let p = spec.p();
    if fit.pearson.len() != n {
        return Err(Error::Model(format!(
            "fit carries {} residuals for {n} areas",
            fit.pearson.len()
        )));
    }
    if n <= p {
        return Err(Error::Model(format!(
            "overdispersion needs n > p, got n = {n}, p = {p}"
        )));
    }
    Ok(fit.pearson.iter().map(|r| r * r).sum::<f64>() / (n - p) as f64)
}

/// Ground truth one replicate is scored against. `beta` holds the covariate
/// effects only (no intercept), matching the coefficients a study reports.
#[derive(Debug, Clone, Copy)]
pub struct ReplicateTruth<'a> {
    pub mu: &'a [f64],
    pub beta: &'a [f64],
    pub boundaries: &'a BoundarySet,
}

/// Per-replicate metric record. `None` marks a metric whose denominator was
/// zero on this replicate: unavailable, deliberately distinct from a zero.
#[derive(Debug, Clone, Copy, Default)]
pub struct ReplicateScore {
    pub pct_bias_mu: Option<f64>,
    pub pct_rmse_mu: Option<f64>,
    pub pct_bias_beta: Option<f64>,
    pub pct_rmse_beta: Option<f64>,
    /// 100 x fraction of covariate effects inside their 95% interval.
    pub coverage_beta: Option<f64>,
    pub ba: Option<f64>,
    pub nba: Option<f64>,
}

/// Scores one fitted replicate against the generating truth.
///
/// Percentages follow the elementwise-relative convention:
/// `%bias = 100 mean((est - true)/true)`, `%RMSE = 100 sqrt(mean(((est -
/// true)/true)^2))`. Boundary agreement (BA) is the percentage of true
/// boundaries the estimate recovers; non-boundary agreement (NBA) the
/// percentage of true non-boundaries kept active.
pub fn score_replicate(
    truth: ReplicateTruth<'_>,
    fit: &FitResult,
    w_hat: &NeighbourMatrix,
) -> Result<ReplicateScore> {
    let n = fit.n_areas();
    if truth.mu.len() != n || w_hat.graph().n_areas() != n {
        return Err(Error::Model(format!(
            "truth over {} areas, fit over {n}, neighbour matrix over {}",
            truth.mu.len(),
            w_hat.graph().n_areas()
        )));
    }
    if truth.beta.len() + 1 != fit.beta.len() {
        return Err(Error::Model(format!(
            "{} true covariate effects for a fit with {} coefficients",
            truth.beta.len(),
            fit.beta.len()
        )));
    }

    let relative = |est: &[f64], tr: &[f64]| -> Option<(f64, f64)> {
        if tr.iter().any(|v| *v == 0.0) {
            return None;
        }
        let rel: Vec<f64> = est.iter().zip(tr).map(|(e, t)| (e - t) / t).collect();
        let bias = 100.0 * rel.iter().sum::<f64>() / rel.len() as f64;
        let rmse = 100.0
            * (rel.iter().map(|r| r * r).sum::<f64>() / rel.len() as f64).sqrt();
        Some((bias, rmse))
    };

    let mu_hat: Vec<f64> = fit.mu.iter().map(|s| s.median).collect();
    let mu_scores = relative(&mu_hat, truth.mu);
    let beta_hat: Vec<f64> = fit.beta[1..].iter().map(|s| s.median).collect();
    let beta_scores = if truth.beta.is_empty() {
        None
    } else {
        relative(&beta_hat, truth.beta)
    };
    let coverage = if truth.beta.is_empty() {
        None
    } else {
        let covered = truth
            .beta
            .iter()
            .zip(&fit.beta[1..])
            .filter(|(t, s)| s.lo <= **t && **t <= s.hi)
            .count();
        Some(100.0 * covered as f64 / truth.beta.len() as f64)
    };

    let est = w_hat.boundary_set();
    let n_true = truth.boundaries.len();
    let ba = (n_true > 0)
        .then(|| 100.0 * est.intersection_count(truth.boundaries) as f64 / n_true as f64);
    let mut non_true = 0usize;
    let mut non_both = 0usize;
    for (e, &(k, j)) in w_hat.graph().edges().iter().enumerate() {
        if !truth.boundaries.contains(k, j) {
            non_true += 1;
            if w_hat.edge_active(e) {
                non_both += 1;
            }
        }
    }
    let nba = (non_true > 0).then(|| 100.0 * non_both as f64 / non_true as f64);

    Ok(ReplicateScore {
        pct_bias_mu: mu_scores.map(|s| s.0),
        pct_rmse_mu: mu_scores.map(|s| s.1),
        pct_bias_beta: beta_scores.map(|s| s.0),
        pct_rmse_beta: beta_scores.map(|s| s.1),
        coverage_beta: coverage,
        ba,
        nba,
    })
}

/// Study-level aggregate: every metric is the mean over the replicates where
/// it was available, with the availability count kept alongside.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub replicates: usize,
    pub pct_bias_mu: Option<f64>,
    pub pct_rmse_mu: Option<f64>,
    pub pct_bias_beta: Option<f64>,
    pub pct_rmse_beta: Option<f64>,
    pub coverage_beta: Option<f64>,
    pub ba: Option<f64>,
    pub nba: Option<f64>,
}

pub fn aggregate(scores: &[ReplicateScore]) -> Result<MetricsReport> {
    if scores.is_empty() {
        return Err(Error::Model("no replicates to aggregate".into()));
    }
    fn mean_of(scores: &[ReplicateScore], f: impl Fn(&ReplicateScore) -> Option<f64>) -> Option<f64> {
        let vals: Vec<f64> = scores.iter().filter_map(f).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }
    Ok(MetricsReport {
        replicates: scores.len(),
        pct_bias_mu: mean_of(scores, |s| s.pct_bias_mu),
        pct_rmse_mu: mean_of(scores, |s| s.pct_rmse_mu),
        pct_bias_beta: mean_of(scores, |s| s.pct_bias_beta),
        pct_rmse_beta: mean_of(scores, |s| s.pct_rmse_beta),
        coverage_beta: mean_of(scores, |s| s.coverage_beta),
        ba: mean_of(scores, |s| s.ba),
        nba: mean_of(scores, |s| s.nba),
    })
}

/// Renders reports as a metric-by-model table, one column per named model.
pub fn metrics_table(reports: &[(&str, &MetricsReport)]) -> String {
    fn cell(v: Option<f64>) -> String {
        match v {
            Some(x) => format!("{x:.3}"),
            None => "NA".into(),
        }
    }
    let mut out = String::from("metric");
    for (name, _) in reports {
        out.push(' ');
        out.push_str(name);
    }
    out.push('\n');
    let rows: [(&str, fn(&MetricsReport) -> Option<f64>); 7] = [
        ("pct_bias_mu", |r| r.pct_bias_mu),
        ("pct_rmse_mu", |r| r.pct_rmse_mu),
        ("pct_bias_beta", |r| r.pct_bias_beta),
        ("pct_rmse_beta", |r| r.pct_rmse_beta),
        ("coverage_beta", |r| r.coverage_beta),
        ("ba", |r| r.ba),
        ("nba", |r| r.nba),
    ];
    for (label, get) in rows {
        out.push_str(label);
        for (_, r) in reports {
            out.push(' ');
            out.push_str(&cell(get(r)));
        }
        out.push('\n');
    }
    out.push_str("replicates");
    for (_, r) in reports {
        out.push_str(&format!(" {}", r.replicates));
    }
    out.push('\n');
    out
}
