//! The Leroux conditional autoregressive precision and its factorization.
//!
//! For a binary neighbour matrix W over n areas, spatial dependence rho in
//! [0, 1), and overall precision tau > 0, the random effect vector phi has
//! the Gaussian Markov random field density
//!
//! ```text
//!   phi ~ N(0, [tau Q(rho, W)]^{-1})
//!   Q(rho, W) = rho (diag(w_k+) - W) + (1 - rho) I
//! ```
//!
//! so `Q_kk = rho w_k+ + 1 - rho` and `Q_kj = -rho w_kj` off the diagonal.
//! rho = 0 gives independent effects, rho -> 1 approaches the intrinsic
//! autoregression; Q is positive definite on the whole half-open interval.
//! The implied full conditional of one effect given the rest is
//!
//! ```text
//!   phi_k | phi_-k ~ N( rho sum_i w_ki phi_i / (rho w_k+ + 1 - rho),
//!                       1 / (tau (rho w_k+ + 1 - rho)) )
//! ```
//!
//! which degenerates only when rho = 1 and area k has no active neighbours.

pub mod sparse;

use crate::error::{Error, Result};
use crate::graph::NeighbourMatrix;

pub use sparse::{NumericFactor, SymbolicFactor};

use std::f64::consts::PI;

/// Builds the symbolic factorization for any precision over this neighbour
/// structure. The pattern covers every geography edge whether or not it is
/// active, so one analysis serves every W state, every rho, and every tau
/// on the same graph.
pub fn symbolic_for_graph(graph: &crate::graph::AdjacencyGraph) -> SymbolicFactor {
    let adj: Vec<Vec<(usize, usize)>> = (0..graph.n_areas())
        .map(|k| graph.neighbours(k).to_vec())
        .collect();
    SymbolicFactor::new(&adj)
}

/// The scaled precision matrix `tau * Q(rho, W)` in graph-sparse form.
#[derive(Debug, Clone)]
pub struct LerouxPrecision {
    n: usize,
    rho: f64,
    tau: f64,
    /// `tau (rho w_k+ + 1 - rho)` per area
    diag: Vec<f64>,
    /// `-tau rho w_kj` per graph edge (0 on inactive edges)
    offdiag: Vec<f64>,
    /// `(k, j, active)` per graph edge for quadratic forms
    edges: Vec<(usize, usize, bool)>,
}

impl LerouxPrecision {
    /// Requires rho in [0, 1) so the joint distribution is proper, and
    /// tau > 0. rho = 1 is rejected here even though conditionals exist
    /// there, because this type represents the invertible joint precision.
    pub fn new(w: &NeighbourMatrix, rho: f64, tau: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&rho) {
            return Err(Error::Model(format!(
                "rho must lie in [0, 1), got {rho}"
            )));
        }
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::Model(format!("tau must be positive, got {tau}")));
        }
        let n = w.graph().n_areas();
        let diag = (0..n)
            .map(|k| tau * (rho * w.active_degree(k) + 1.0 - rho))
            .collect();
        let edges: Vec<(usize, usize, bool)> = w
            .graph()
            .edges()
            .iter()
            .enumerate()
            .map(|(e, &(k, j))| (k, j, w.edge_active(e)))
            .collect();
        let offdiag = edges
            .iter()
            .map(|&(_, _, active)| if active { -tau * rho } else { 0.0 })
            .collect();
        Ok(Self {
            n,
            rho,
            tau,
            diag,
            offdiag,
            edges,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    /// Diagonal values, old (graph) indexing.
    pub fn diag(&self) -> &[f64] {
        &self.diag
    }

    /// Per-graph-edge off-diagonal values, aligned with `graph.edges()`.
    pub fn offdiag(&self) -> &[f64] {
        &self.offdiag
    }

    /// Dense-entry accessor for oracle comparisons: `tau Q` at (k, j).
    pub fn entry(&self, k: usize, j: usize, w: &NeighbourMatrix) -> f64 {
        if k == j {
            self.diag[k]
        } else {
            -self.tau * self.rho * w.weight(k, j)
        }
    }

    /// `phi' (tau Q) phi` via the edge decomposition
    /// `phi' Q phi = rho sum_active (phi_k - phi_j)^2 + (1 - rho) |phi|^2`.
    pub fn quad_form(&self, phi: &[f64]) -> f64 {
        assert_eq!(phi.len(), self.n, "phi length mismatch");
        let pair: f64 = self
            .edges
            .iter()
            .filter(|&&(_, _, active)| active)
            .map(|&(k, j, _)| {
                let d = phi[k] - phi[j];
                d * d
            })
            .sum();
        let sq: f64 = phi.iter().map(|v| v * v).sum();
        self.tau * (self.rho * pair + (1.0 - self.rho) * sq)
    }

    /// `(tau Q) phi`.
    pub fn mul_vec(&self, phi: &[f64]) -> Vec<f64> {
        assert_eq!(phi.len(), self.n, "phi length mismatch");
        let mut out: Vec<f64> = (0..self.n).map(|k| self.diag[k] * phi[k]).collect();
        for (e, &(k, j, active)) in self.edges.iter().enumerate() {
            if active {
                out[k] += self.offdiag[e] * phi[j];
                out[j] += self.offdiag[e] * phi[k];
            }
        }
        out
    }

    /// Numeric factorization reusing a graph-level symbolic analysis.
    pub fn factor<'s>(&self, sym: &'s SymbolicFactor) -> Result<NumericFactor<'s>> {
        assert_eq!(sym.n(), self.n, "symbolic analysis is for a different graph");
        sym.factor(&self.diag, &self.offdiag)
    }

    /// Exact log density of the zero-mean GMRF at `phi`, given this
    /// precision's factorization (for the determinant).
    pub fn log_density(&self, phi: &[f64], factor: &NumericFactor<'_>) -> f64 {
        0.5 * factor.log_det() - 0.5 * self.n as f64 * (2.0 * PI).ln()
            - 0.5 * self.quad_form(phi)
    }

    /// Draws phi ~ N(0, (tau Q)^{-1}) from iid standard normals.
    pub fn sample<R: rand::Rng>(
        &self,
        factor: &NumericFactor<'_>,
        rng: &mut R,
    ) -> Vec<f64> {
        use rand_distr::StandardNormal;
        let z: Vec<f64> = (0..self.n).map(|_| rng.sample(StandardNormal)).collect();
        factor.sample_from_std_normals(&z)
    }
}

/// Full conditional of `phi_k` given the rest: `(mean, variance)`.
///
/// Accepts rho in the closed interval [0, 1]; at rho = 1 the conditional is
/// still defined whenever area k has an active neighbour, and the single
/// degenerate combination (rho = 1 with an isolated area) is an error
/// rather than an infinity.
pub fn full_conditional(
    phi: &[f64],
    w: &NeighbourMatrix,
    rho: f64,
    tau: f64,
    k: usize,
) -> Result<(f64, f64)> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::Model(format!("rho must lie in [0, 1], got {rho}")));
    }
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::Model(format!("tau must be positive, got {tau}")));
    }
    assert_eq!(phi.len(), w.graph().n_areas(), "phi length mismatch");
    let wk = w.active_degree(k);
    let denom = rho * wk + 1.0 - rho;
    if denom <= 0.0 {
        return Err(Error::IsolatedArea { area: k, rho });
    }
    let nbr_sum: f64 = w.active_neighbours(k).map(|j| phi[j]).sum();
    Ok((rho * nbr_sum / denom, 1.0 / (tau * denom)))
}

/// Partial correlation between `phi_k` and `phi_j` implied by `Q(rho, W)`:
///
/// ```text
///   corr(phi_k, phi_j | rest) = rho w_kj /
///       sqrt((rho w_k+ + 1 - rho)(rho w_j+ + 1 - rho))
/// ```
///
/// tau cancels. Zero whenever the pair is not an active edge.
pub fn partial_correlation(w: &NeighbourMatrix, rho: f64, k: usize, j: usize) -> Result<f64> {
    if !(0.0..1.0).contains(&rho) {
        return Err(Error::Model(format!("rho must lie in [0, 1), got {rho}")));
    }
    if k == j {
        return Err(Error::Model(format!(
            "partial correlation needs two distinct areas, got k = j = {k}"
        )));
    }
    let dk = rho * w.active_degree(k) + 1.0 - rho;
    let dj = rho * w.active_degree(j) + 1.0 - rho;
    Ok(rho * w.weight(k, j) / (dk * dj).sqrt())
}
