//! The iterative boundary-detection loop: alternate between fitting the model
//! and re-deriving the neighbourhood matrix from the fitted random effects
//! until the matrix reproduces itself, a cycle closes, or the iteration cap
//! is hit.

use std::sync::Arc;

use crate::diagnostics::morans_i;
use crate::error::{Error, Result};
use crate::graph::{AdjacencyGraph, BoundarySet, NeighbourMatrix, StateKey};
use crate::inference::{fit, fit_mcmc, FitResult, GridConfig, McmcConfig, ModelSpec, RhoMode};

/// Inference engine the loop drives. Both are deterministic, so repeated
/// fits under the same matrix yield identical results.
#[derive(Debug, Clone)]
pub enum FitBackend {
    Laplace(GridConfig),
    Mcmc(McmcConfig),
}

impl FitBackend {
    fn fit(&self, spec: &ModelSpec, w: &NeighbourMatrix) -> Result<FitResult> {
        match self {
            FitBackend::Laplace(config) => fit(spec, w, config),
            FitBackend::Mcmc(config) => fit_mcmc(spec, w, config),
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdaptiveConfig {
    /// How rho is treated in every fit after the independence fit. Boundary
    /// analysis pins it near one; covariate studies estimate it.
    pub rho_mode: RhoMode,
    pub max_iterations: usize,
    pub backend: FitBackend,
}

impl Default for AdaptiveConfig {
    fn default() -> Self {
        Self {
            rho_mode: RhoMode::Fixed(0.99),
            max_iterations: 50,
            backend: FitBackend::Laplace(GridConfig::default()),
        }
    }
}

/// One recorded iteration: the matrix fitted under, the fit, and the
/// diagnostics the termination rules consume.
#[derive(Debug, Clone)]
pub struct TraceState {
    pub iteration: usize,
    pub key: StateKey,
    /// Inactive edge count of `w`.
    pub boundaries: usize,
    /// Moran's I of this fit's Pearson residuals against this state's own W.
    /// `None` when the statistic is undefined (constant residuals or no
    /// active edge).
    pub moran: Option<f64>,
    pub w: NeighbourMatrix,
    pub fit: FitResult,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    /// The updated matrix equalled the one just fitted under.
    SteadyState,
    /// The updated matrix equalled one seen `length` iterations earlier.
    Cycle { length: usize },
    /// The cap was reached; the least spatially structured state was taken.
    MaxIterations,
}

#[derive(Debug)]
pub struct AdaptiveTrace {
    /// States in visit order; iteration 0 is the independence fit under the
    /// all-active matrix. It is recorded for context only: the termination
    /// rules compare the estimated matrices (iterations >= 1) among
    /// themselves, since the independence fit comes from a different model.
    pub states: Vec<TraceState>,
    pub termination: Termination,
    /// Index into `states` of the selected matrix; always >= 1.
    pub selected: usize,
    /// Fit under the selected matrix with the configured rho mode.
    pub final_fit: FitResult,
}

impl AdaptiveTrace {
    pub fn selected_w(&self) -> &NeighbourMatrix {
        &self.states[self.selected].w
    }

    /// Per-iteration log, one line per recorded state.
    pub fn log(&self) -> String {
        trace_log(&self.states)
    }
}

fn trace_log(states: &[TraceState]) -> String {
    let mut out = String::new();
    for s in states {
        let moran = match s.moran {
            Some(v) => format!("{v:.6}"),
            None => "NA".into(),
        };
        out.push_str(&format!(
            "iter={} state={} boundaries={} moran={}\n",
            s.iteration, s.key, s.boundaries, moran
        ));
    }
    out
}

/// Derives the next neighbourhood matrix from a fit: an edge stays active
/// exactly when the endpoints' 95% credible intervals for the random effect
/// overlap. Intervals are closed, so touching endpoints count as overlap.
pub fn update_w(fit: &FitResult, graph: &Arc<AdjacencyGraph>) -> Result<NeighbourMatrix> {
    if fit.n_areas() != graph.n_areas() {
        return Err(Error::Model(format!(
            "fit over {} areas, graph over {}",
            fit.n_areas(),
            graph.n_areas()
        )));
    }
    let intervals = fit.credible_intervals_phi();
    let mut w = NeighbourMatrix::all_active(graph.clone());
    for (e, &(k, j)) in graph.edges().iter().enumerate() {
        let (lo_k, hi_k) = intervals[k];
        let (lo_j, hi_j) = intervals[j];
        w.set_edge(e, lo_k <= hi_j && lo_j <= hi_k);
    }
    Ok(w)
}

/// Runs the full adaptive algorithm.
///
/// The loop starts from an independence fit (rho fixed at 0, all edges
/// active), then alternates `update_w` with refits under `config.rho_mode`.
/// The independence state takes no part in the termination rules, which
/// compare only the matrices estimated from fits (iterations >= 1):
///
/// * steady state: the new state key equals the immediately previous
///   estimate's; that matrix is selected and its fit is final.
/// * cycle: the new key equals an earlier estimate's; among the states in
///   the cycle the one with minimal |Moran's I| of its Pearson residuals
///   (against its own W) is selected.
/// * iteration cap: the minimal-|Moran's I| estimate over the whole run is
///   selected, flagged as `MaxIterations`.
///
/// Undefined Moran's I sorts after every defined value in those argmins.
pub fn run(
    spec: &ModelSpec,
    graph: &Arc<AdjacencyGraph>,
    config: &AdaptiveConfig,
) -> Result<AdaptiveTrace> {
    run_with(spec, graph, config, |s, w| config.backend.fit(s, w))
}

/// `run` with the fit operation abstracted, which is also the test seam for
/// injecting constructed fits.
fn run_with(
    spec: &ModelSpec,
    graph: &Arc<AdjacencyGraph>,
    config: &AdaptiveConfig,
    mut fit_one: impl FnMut(&ModelSpec, &NeighbourMatrix) -> Result<FitResult>,
) -> Result<AdaptiveTrace> {
    if config.max_iterations == 0 {
        return Err(Error::Model("max_iterations must be at least 1".into()));
    }
    spec.validate()?;

    let mut states: Vec<TraceState> = Vec::new();

    let mut independence = spec.clone();
    independence.rho_mode = RhoMode::Fixed(0.0);
    let mut refit_spec = spec.clone();
    refit_spec.rho_mode = config.rho_mode;

    let w0 = NeighbourMatrix::all_active(graph.clone());
    let fit0 = fit_one(&independence, &w0).map_err(|e| attach_trace(e, &states))?;
    states.push(record_state(0, w0, fit0));

    loop {
        let i = states.len();
        if i > config.max_iterations {
            let selected = argmin_moran(&states, 1, states.len());
            let final_fit = states[selected].fit.clone();
            return Ok(AdaptiveTrace {
                states,
                termination: Termination::MaxIterations,
                selected,
                final_fit,
            });
        }

        let w = update_w(&states[i - 1].fit, graph)?;
        let fit = fit_one(&refit_spec, &w).map_err(|e| attach_trace(e, &states))?;
        states.push(record_state(i, w, fit));

        let last = states.len() - 1;
        if last >= 2 && states[last].key == states[last - 1].key {
            let final_fit = states[last].fit.clone();
            return Ok(AdaptiveTrace {
                states,
                termination: Termination::SteadyState,
                selected: last,
                final_fit,
            });
        }
        if let Some(start) = (1..last - 1).find(|&j| states[j].key == states[last].key) {
            let selected = argmin_moran(&states, start, last);
            let final_fit = states[selected].fit.clone();
            return Ok(AdaptiveTrace {
                states,
                termination: Termination::Cycle { length: last - start },
                selected,
                final_fit,
            });
        }
    }
}

fn record_state(iteration: usize, w: NeighbourMatrix, fit: FitResult) -> TraceState {
    let moran = morans_i(&fit.pearson, &w).ok();
    TraceState {
        iteration,
        key: w.state_key(),
        boundaries: w.graph().edge_count() - w.active_count(),
        moran,
        w,
        fit,
    }
}

fn attach_trace(source: Error, states: &[TraceState]) -> Error {
    Error::Adaptive {
        states: states.len(),
        trace_log: trace_log(states),
        source: Box::new(source),
    }
}

/// Index of the minimal |Moran's I| among `states[from..to]`; states with an
/// undefined statistic rank after all defined ones.
fn argmin_moran(states: &[TraceState], from: usize, to: usize) -> usize {
    let rank = |i: usize| match states[i].moran {
        Some(v) => (0, v.abs()),
        None => (1, 0.0),
    };
    (from..to)
        .min_by(|&a, &b| {
            let (ga, va) = rank(a);
            let (gb, vb) = rank(b);
            ga.cmp(&gb).then(va.total_cmp(&vb))
        })
        .expect("non-empty state range")
}

/// One detected boundary with the absolute difference of the posterior
/// medians of the fitted level on its two sides (disease risk where the
/// model has one, fitted mean otherwise).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundaryRow {
    pub areas: (usize, usize),
    pub difference: f64,
}

#[derive(Debug, Clone)]
pub struct BoundaryReport {
    pub boundaries: BoundarySet,
    /// One row per boundary, sorted by descending difference.
    pub rows: Vec<BoundaryRow>,
    /// Set when rho was estimated and its posterior median fell below 0.5:
    /// with weak spatial dependence an inactive edge no longer reads as a
    /// step change in the underlying level.
    pub weak_dependence_warning: bool,
}

impl BoundaryReport {
    /// Delimited table, one boundary per line.
    pub fn table(&self) -> String {
        let mut out = String::from("area_k area_j difference\n");
        for row in &self.rows {
            out.push_str(&format!(
                "{} {} {:.6}\n",
                row.areas.0, row.areas.1, row.difference
            ));
        }
        out
    }
}

/// Summarizes the selected matrix's boundaries against the final fit.
pub fn boundary_report(trace: &AdaptiveTrace) -> BoundaryReport {
    let w = trace.selected_w();
    let fit = &trace.final_fit;
    let level: Vec<f64> = match &fit.risk {
        Some(risk) => risk.iter().map(|s| s.median).collect(),
        None => fit.mu.iter().map(|s| s.median).collect(),
    };
    let boundaries = w.boundary_set();
    let mut rows: Vec<BoundaryRow> = boundaries
        .edges()
        .iter()
        .map(|&(k, j)| BoundaryRow {
            areas: (k, j),
            difference: (level[k] - level[j]).abs(),
        })
        .collect();
    rows.sort_by(|a, b| b.difference.total_cmp(&a.difference).then(a.areas.cmp(&b.areas)));
    let weak_dependence_warning = fit.rho_fixed.is_none() && fit.rho.median < 0.5;
    BoundaryReport {
        boundaries,
        rows,
        weak_dependence_warning,
    }
}
