//! Synthetic data with known boundaries: piecewise-constant group means,
//! Matérn-correlated random effect fields, Poisson counts, and the
//! multi-replicate studies comparing the global and adaptive models.

use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use rayon::prelude::*;

use crate::adaptive::{self, AdaptiveConfig, Termination};
use crate::diagnostics::{
    aggregate, derive_seed, score_replicate, MetricsReport, ReplicateScore, ReplicateTruth,
};
use crate::error::{Error, Result};
use crate::graph::{AdjacencyGraph, BoundarySet, NeighbourMatrix};
use crate::inference::{fit, DataSet, Family, GridConfig, ModelSpec, RhoMode};

/// Study geography plus the group labels that define the true boundaries:
/// label 0 is the background region, labels `1..=G` are the elevated
/// clusters. A graph edge is a true boundary exactly when one endpoint is
/// background and the other is not; edges between two clusters are not.
#[derive(Debug, Clone)]
pub struct Template {
    graph: Arc<AdjacencyGraph>,
    group: Vec<usize>,
}

impl Template {
    pub fn new(graph: Arc<AdjacencyGraph>, group: Vec<usize>) -> Result<Self> {
        if group.len() != graph.n_areas() {
            return Err(Error::Model(format!(
                "{} group labels for {} areas",
                group.len(),
                graph.n_areas()
            )));
        }
        if graph.centroids().is_none() {
            return Err(Error::Model(
                "template graph needs centroids for the correlation kernel".into(),
            ));
        }
        Ok(Self { graph, group })
    }

    /// The default desk-scale geography: a 20 by 20 unit-spaced lattice
    /// (400 areas, 760 edges) with five rectangular clusters of sizes 3x3,
    /// 3x3, 4x4, 3x4, and 2x3, none touching each other or the outer rim.
    /// That is 52 elevated areas (13.0%) and 64 true boundary edges (8.4%
    /// of all edges), the perimeter sum `2(w+h)` over the clusters.
    pub fn default_lattice() -> Self {
        const NX: usize = 20;
        // (x0, y0, width, height)
        const CLUSTERS: [(usize, usize, usize, usize); 5] = [
            (2, 2, 3, 3),
            (14, 2, 3, 3),
            (7, 8, 4, 4),
            (2, 13, 3, 4),
            (15, 14, 2, 3),
        ];
        let graph = Arc::new(AdjacencyGraph::lattice(NX, NX));
        let mut group = vec![0usize; NX * NX];
        for (label, &(x0, y0, w, h)) in CLUSTERS.iter().enumerate() {
            for y in y0..y0 + h {
                for x in x0..x0 + w {
                    group[y * NX + x] = label + 1;
                }
            }
        }
        Self { graph, group }
    }

    pub fn graph(&self) -> &Arc<AdjacencyGraph> {
        &self.graph
    }

    pub fn group(&self) -> &[usize] {
        &self.group
    }

    pub fn n_areas(&self) -> usize {
        self.graph.n_areas()
    }

    /// Edges whose endpoints differ in background-vs-cluster membership.
    pub fn true_boundaries(&self) -> BoundarySet {
        BoundarySet::from_pairs(
            self.graph
                .edges()
                .iter()
                .filter(|&&(k, j)| (self.group[k] == 0) != (self.group[j] == 0))
                .copied(),
        )
    }

    /// Reads a template from a `area_id x y group` file plus the standard
    /// edge-list file.
    pub fn read(template_path: &Path, edges_path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(template_path)?;
        let mut rows: Vec<(usize, f64, f64, usize)> = Vec::new();
        let mut header_seen = false;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let toks: Vec<&str> = line.split_whitespace().collect();
            if !header_seen {
                if toks != ["area_id", "x", "y", "group"] {
                    return Err(Error::parse(
                        template_path,
                        lineno + 1,
                        "expected header `area_id x y group`",
                    ));
                }
                header_seen = true;
                continue;
            }
            if toks.len() != 4 {
                return Err(Error::parse(
                    template_path,
                    lineno + 1,
                    "expected `area_id x y group`",
                ));
            }
            let id: usize = toks[0].parse().map_err(|_| {
                Error::parse(template_path, lineno + 1, format!("bad area id {:?}", toks[0]))
            })?;
            let x: f64 = toks[1].parse().map_err(|_| {
                Error::parse(template_path, lineno + 1, format!("bad coordinate {:?}", toks[1]))
            })?;
            let y: f64 = toks[2].parse().map_err(|_| {
                Error::parse(template_path, lineno + 1, format!("bad coordinate {:?}", toks[2]))
            })?;
            let g: usize = toks[3].parse().map_err(|_| {
                Error::parse(template_path, lineno + 1, format!("bad group label {:?}", toks[3]))
            })?;
            rows.push((id, x, y, g));
        }
        let n = rows.len();
        let mut coords = vec![None; n];
        let mut group = vec![0usize; n];
        for (id, x, y, g) in rows {
            if id >= n {
                return Err(Error::Model(format!(
                    "area id {id} out of range for {n} template rows"
                )));
            }
            if coords[id].is_some() {
                return Err(Error::Model(format!("area {id} repeated in template")));
            }
            coords[id] = Some((x, y));
            group[id] = g;
        }
        let coords: Vec<(f64, f64)> = coords
            .into_iter()
            .enumerate()
            .map(|(k, c)| c.ok_or_else(|| Error::Model(format!("area {k} missing from template"))))
            .collect::<Result<_>>()?;
        let mut graph = AdjacencyGraph::read_edge_list(edges_path, Some(n))?;
        graph.set_centroids(coords)?;
        Template::new(Arc::new(graph), group)
    }

    /// Serializes the label/centroid table (the edge list is written with
    /// [`Template::edge_list_string`]).
    pub fn template_string(&self) -> String {
        let coords = self.graph.centroids().expect("template graphs carry centroids");
        let mut out = String::from("area_id x y group\n");
        for (k, &(x, y)) in coords.iter().enumerate() {
            out.push_str(&format!("{k} {x} {y} {}\n", self.group[k]));
        }
        out
    }

    pub fn edge_list_string(&self) -> String {
        let mut out = String::new();
        for &(k, j) in self.graph.edges() {
            out.push_str(&format!("{k} {j}\n"));
        }
        out
    }
}

/// Matérn covariance with smoothness 2.5 over Euclidean distances:
///
/// ```text
///   C(d) = variance * (1 + a + a^2/3) * exp(-a),   a = sqrt(5) d / range
/// ```
///
/// Returns the dense matrix and a flag set when two coordinates coincide
/// (their correlation is exactly 1, which collapses the field's rank).
pub fn matern_covariance(
    coords: &[(f64, f64)],
    range: f64,
    variance: f64,
) -> Result<(DMatrix<f64>, bool)> {
    if range <= 0.0 {
        return Err(Error::Model(format!("range must be positive, got {range}")));
    }
    if variance < 0.0 {
        return Err(Error::Model(format!(
            "variance must be nonnegative, got {variance}"
        )));
    }
    let n = coords.len();
    let mut cov = DMatrix::zeros(n, n);
    let mut duplicates = false;
    for k in 0..n {
        cov[(k, k)] = variance;
        for j in 0..k {
            let d = ((coords[k].0 - coords[j].0).powi(2) + (coords[k].1 - coords[j].1).powi(2))
                .sqrt();
            if d == 0.0 {
                duplicates = true;
            }
            let a = 5.0f64.sqrt() * d / range;
            let c = variance * (1.0 + a + a * a / 3.0) * (-a).exp();
            cov[(k, j)] = c;
            cov[(j, k)] = c;
        }
    }
    Ok((cov, duplicates))
}

/// Mean off-diagonal Matérn correlation at the given range.
fn mean_correlation(coords: &[(f64, f64)], range: f64) -> f64 {
    let n = coords.len();
    let (corr, _) = matern_covariance(coords, range, 1.0).expect("positive range");
    let mut sum = 0.0;
    for k in 0..n {
        for j in 0..k {
            sum += corr[(k, j)];
        }
    }
    sum / (n * (n - 1) / 2) as f64
}

/// Finds the range at which the mean off-diagonal correlation hits the
/// target, by bisection to within 1e-3. The mean is monotone increasing in
/// the range, so a target outside what the bracket can reach (for example a
/// target of 1 over distinct points, or a target below the floor set by
/// coincident points) is an error.
pub fn calibrate_range(coords: &[(f64, f64)], target: f64) -> Result<f64> {
    if coords.len() < 2 {
        return Err(Error::Model(
            "range calibration needs at least two areas".into(),
        ));
    }
    let diameter = {
        let mut d2max = 0.0f64;
        for k in 0..coords.len() {
            for j in 0..k {
                let d2 = (coords[k].0 - coords[j].0).powi(2)
                    + (coords[k].1 - coords[j].1).powi(2);
                d2max = d2max.max(d2);
            }
        }
        d2max.sqrt()
    };
    if diameter == 0.0 {
        return Err(Error::Model(
            "range calibration needs at least two distinct coordinates".into(),
        ));
    }

    const TOL: f64 = 1e-3;
    let mut lo = 1e-9 * diameter;
    let mut hi = 1e3 * diameter;
    if mean_correlation(coords, lo) > target {
        return Err(Error::Numerical(format!(
            "mean correlation exceeds {target} for every range on this geometry"
        )));
    }
    if mean_correlation(coords, hi) < target {
        return Err(Error::Numerical(format!(
            "mean correlation stays below {target} for every range on this geometry"
        )));
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let f = mean_correlation(coords, mid);
        if (f - target).abs() <= TOL {
            return Ok(mid);
        }
        if f < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Err(Error::Numerical(
        "range calibration bisection failed to converge".into(),
    ))
}

/// Generating parameters for one study scenario. The elevation `m` is the
/// mean of the random effects inside the clusters (background mean 0);
/// scenario A sets it to 1, scenario B to 0.
#[derive(Debug, Clone, Copy)]
pub struct SimScenario {
    pub m: f64,
    pub include_covariate: bool,
    pub intercept: f64,
    pub beta: f64,
    /// Matérn range, usually from [`calibrate_range`].
    pub range: f64,
    pub variance: f64,
    pub seed: u64,
}

impl SimScenario {
    pub fn scenario_a(range: f64, seed: u64) -> Self {
        Self {
            m: 1.0,
            include_covariate: true,
            intercept: 40.0f64.ln(),
            beta: 0.1,
            range,
            variance: 1.0,
            seed,
        }
    }

    pub fn scenario_b(range: f64, seed: u64) -> Self {
        Self {
            m: 0.0,
            ..Self::scenario_a(range, seed)
        }
    }

    fn validate(&self) -> Result<()> {
        if self.m < 0.0 {
            return Err(Error::Model(format!("elevation must be >= 0, got {}", self.m)));
        }
        if self.range <= 0.0 {
            return Err(Error::Model(format!(
                "range must be positive, got {}",
                self.range
            )));
        }
        Ok(())
    }
}

/// One generated dataset with its ground truth.
#[derive(Debug, Clone)]
pub struct Replicate {
    pub y: Vec<f64>,
    pub offset: Vec<f64>,
    pub covariate: Option<Vec<f64>>,
    pub phi_true: Vec<f64>,
    pub mu_true: Vec<f64>,
    pub boundaries: BoundarySet,
}

impl Replicate {
    /// The dataset in the inference module's file format, covariate column
    /// named `x`.
    pub fn dataset(&self) -> DataSet {
        DataSet {
            y: self.y.clone(),
            offset: self.offset.clone(),
            trials: None,
            covariate_names: self.covariate.iter().map(|_| "x".to_string()).collect(),
            covariates: self.covariate.iter().cloned().collect(),
        }
    }
}

/// Draws one replicate: `phi ~ N(group means, Matérn)` by dense Cholesky,
/// covariate (when included) iid standard normal and fresh per call,
/// `y_k ~ Poisson(exp(intercept + beta x_k + phi_k))`, offset zero.
///
/// Draw order is fixed (field, then covariate, then counts), so one seeded
/// generator yields bit-identical replicates across runs.
pub fn generate(
    template: &Template,
    scenario: &SimScenario,
    rng: &mut ChaCha8Rng,
) -> Result<Replicate> {
    scenario.validate()?;
    let n = template.n_areas();
    let coords = template
        .graph()
        .centroids()
        .expect("template graphs carry centroids");
    let (cov, _) = matern_covariance(coords, scenario.range, scenario.variance)?;
    let chol = match cov.clone().cholesky() {
        Some(c) => c,
        // one jitter retry covers the semidefinite edge (duplicate points,
        // vanishing variance)
        None => (cov + DMatrix::identity(n, n) * 1e-10)
            .cholesky()
            .ok_or_else(|| {
                Error::Numerical("Matérn covariance is not positive definite".into())
            })?,
    };

    let std_normal = Normal::new(0.0, 1.0).expect("valid parameters");
    let z = DVector::from_iterator(n, (0..n).map(|_| std_normal.sample(rng)));
    let spatial = chol.l() * z;
    let phi_true: Vec<f64> = (0..n)
        .map(|k| {
            let mean = if template.group[k] == 0 { 0.0 } else { scenario.m };
            mean + spatial[k]
        })
        .collect();

    let covariate: Option<Vec<f64>> = scenario
        .include_covariate
        .then(|| (0..n).map(|_| std_normal.sample(rng)).collect());

    let mu_true: Vec<f64> = (0..n)
        .map(|k| {
            let x_term = covariate.as_ref().map_or(0.0, |x| scenario.beta * x[k]);
            (scenario.intercept + x_term + phi_true[k]).exp()
        })
        .collect();
    let y: Vec<f64> = mu_true
        .iter()
        .map(|&mu| {
            let draw = Poisson::new(mu).map_err(|_| {
                Error::Numerical(format!("Poisson mean {mu} out of range"))
            })?;
            Ok(draw.sample(rng))
        })
        .collect::<Result<_>>()?;

    // with m = 0 the group means coincide, so the surface has no true steps
    // and boundary agreement is undefined for the replicate
    let boundaries = if scenario.m == 0.0 {
        BoundarySet::from_pairs([])
    } else {
        template.true_boundaries()
    };

    Ok(Replicate {
        y,
        offset: vec![0.0; n],
        covariate,
        phi_true,
        mu_true,
        boundaries,
    })
}

/// The two models a study compares.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StudyModel {
    /// One fit under the all-active neighbour matrix, rho estimated.
    GlobalLeroux,
    /// The full adaptive loop.
    Adaptive,
}

impl StudyModel {
    pub fn name(self) -> &'static str {
        match self {
            StudyModel::GlobalLeroux => "global",
            StudyModel::Adaptive => "adaptive",
        }
    }
}

/// How the models are fitted inside a study.
#[derive(Debug, Clone)]
pub struct StudyConfig {
    /// Grid for the global model's single fit.
    pub grid: GridConfig,
    /// Configuration of the adaptive runs (rho mode, cap, backend).
    pub adaptive: AdaptiveConfig,
}

impl Default for StudyConfig {
    fn default() -> Self {
        // The estimation arm compares like with like: both models treat rho
        // as unknown. Boundary analysis overrides rho_mode to a fixed value
        // near one before calling run_study.
        let mut adaptive = AdaptiveConfig::default();
        adaptive.rho_mode = RhoMode::Estimate;
        Self {
            grid: GridConfig::default(),
            adaptive,
        }
    }
}

/// How the adaptive runs of a study terminated.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TerminationStats {
    pub steady_state: usize,
    pub cycle: usize,
    pub max_iterations: usize,
    /// `iterations[i]` counts runs that used `i + 1` refits after the
    /// initial independence fit.
    pub iterations: Vec<usize>,
}

impl TerminationStats {
    fn record(&mut self, termination: Termination, refits: usize) {
        match termination {
            Termination::SteadyState => self.steady_state += 1,
            Termination::Cycle { .. } => self.cycle += 1,
            Termination::MaxIterations => self.max_iterations += 1,
        }
        if self.iterations.len() < refits {
            self.iterations.resize(refits, 0);
        }
        self.iterations[refits - 1] += 1;
    }

    pub fn total(&self) -> usize {
        self.steady_state + self.cycle + self.max_iterations
    }

    /// Histogram with one line per refit-count bin from 1 to `max_bin`.
    pub fn table(&self, max_bin: usize) -> String {
        let mut out = format!(
            "termination steady_state={} cycle={} max_iterations={}\n",
            self.steady_state, self.cycle, self.max_iterations
        );
        for i in 0..max_bin {
            let count = self.iterations.get(i).copied().unwrap_or(0);
            out.push_str(&format!("iterations={} count={}\n", i + 1, count));
        }
        out
    }
}

/// Aggregated study result: one report per requested model plus the failure
/// count and, when the adaptive model ran, its termination statistics.
#[derive(Debug, Clone)]
pub struct StudyOutcome {
    pub reports: Vec<(StudyModel, MetricsReport)>,
    /// Replicates dropped because generation or any model fit failed; they
    /// are excluded from every report.
    pub failures: usize,
    pub termination: Option<TerminationStats>,
}

struct ReplicateRecord {
    scores: Vec<(StudyModel, ReplicateScore)>,
    termination: Option<(Termination, usize)>,
}

/// Runs the full study: generate, fit each model, score, aggregate.
/// Replicates run concurrently with seeds derived per replicate, and the
/// aggregation is a sequential reduction in replicate order, so the outcome
/// does not depend on scheduling.
pub fn run_study(
    template: &Template,
    scenario: &SimScenario,
    n_replicates: usize,
    models: &[StudyModel],
    config: &StudyConfig,
) -> Result<StudyOutcome> {
    if n_replicates == 0 {
        return Err(Error::Model("a study needs at least one replicate".into()));
    }
    if models.is_empty() {
        return Err(Error::Model("a study needs at least one model".into()));
    }
    scenario.validate()?;

    let results: Vec<Result<ReplicateRecord>> = (0..n_replicates)
        .into_par_iter()
        .map(|r| one_replicate(template, scenario, r as u64, models, config))
        .collect();

    let mut failures = 0usize;
    let mut per_model: Vec<Vec<ReplicateScore>> = vec![Vec::new(); models.len()];
    let mut termination: Option<TerminationStats> = None;
    for record in results {
        match record {
            Ok(rec) => {
                for (slot, (_, score)) in rec.scores.iter().enumerate() {
                    per_model[slot].push(*score);
                }
                if let Some((t, refits)) = rec.termination {
                    termination
                        .get_or_insert_with(TerminationStats::default)
                        .record(t, refits);
                }
            }
            Err(_) => failures += 1,
        }
    }
    if per_model.iter().any(|s| s.is_empty()) {
        return Err(Error::Model(format!(
            "all {n_replicates} replicates failed"
        )));
    }

    let mut reports = Vec::with_capacity(models.len());
    for (slot, &model) in models.iter().enumerate() {
        reports.push((model, aggregate(&per_model[slot])?));
    }
    Ok(StudyOutcome {
        reports,
        failures,
        termination,
    })
}

fn one_replicate(
    template: &Template,
    scenario: &SimScenario,
    index: u64,
    models: &[StudyModel],
    config: &StudyConfig,
) -> Result<ReplicateRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(scenario.seed, index));
    let rep = generate(template, scenario, &mut rng)?;
    let covariates: Vec<Vec<f64>> = rep.covariate.iter().cloned().collect();
    let spec = ModelSpec::new(Family::Poisson, rep.y.clone(), None, &covariates)?;
    let beta_true: &[f64] = if rep.covariate.is_some() {
        std::slice::from_ref(&scenario.beta)
    } else {
        &[]
    };
    let truth = ReplicateTruth {
        mu: &rep.mu_true,
        beta: beta_true,
        boundaries: &rep.boundaries,
    };

    let mut scores = Vec::with_capacity(models.len());
    let mut termination = None;
    for &model in models {
        match model {
            StudyModel::GlobalLeroux => {
                let w = NeighbourMatrix::all_active(template.graph().clone());
                let fit_res = fit(&spec, &w, &config.grid)?;
                scores.push((model, score_replicate(truth, &fit_res, &w)?));
            }
            StudyModel::Adaptive => {
                let trace = adaptive::run(&spec, template.graph(), &config.adaptive)?;
                scores.push((
                    model,
                    score_replicate(truth, &trace.final_fit, trace.selected_w())?,
                ));
                termination = Some((trace.termination, trace.states.len() - 1));
            }
        }
    }
    Ok(ReplicateRecord {
        scores,
        termination,
    })
}
