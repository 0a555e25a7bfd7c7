//! Joint mode of `(phi, beta)` at fixed hyperparameters and the Laplace
//! approximation around it.
//!
//! The negated Hessian of the log joint density at the mode has the block
//! form
//!
//! ```text
//!   H = [ A   U ]    A = tau Q + diag(c)   (graph-sparse)
//!       [ U'  B ]    U = diag(c) X
//!                    B = X' diag(c) X + I / v_beta
//! ```
//!
//! with `c_k` the per-area likelihood curvatures. Newton steps, the log
//! determinant, marginal variances, and exact joint Gaussian draws all run
//! through one block elimination: `T = A^{-1} U` (p sparse solves) and the
//! dense p x p Schur complement `S = B - U' T`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use super::ModelSpec;
use crate::error::{Error, Result};
use crate::gmrf::{symbolic_for_graph, LerouxPrecision, NumericFactor, SymbolicFactor};
use crate::graph::NeighbourMatrix;

const LN_2PI: f64 = 1.8378770664093453;

pub(crate) const NEWTON_MAX_ITERATIONS: usize = 100;
pub(crate) const NEWTON_TOL: f64 = 1e-6;

/// One hyperparameter configuration. `sigma` is the Gaussian observation
/// precision and is carried (but ignored) as 1.0 for the other families.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct HyperPoint {
    pub rho: f64,
    pub tau: f64,
    pub sigma: f64,
}

/// Mode finder for one model on one neighbour matrix. Holds the symbolic
/// analysis so every hyperparameter point reuses it.
pub(crate) struct LatentSolver<'a> {
    pub spec: &'a ModelSpec,
    pub w: &'a NeighbourMatrix,
    pub sym: &'a SymbolicFactor,
    pub max_iterations: usize,
    pub tol: f64,
}

/// Converged mode plus the factorized Hessian blocks, which are everything
/// the Gaussian approximation at this point needs: marginal variances,
/// evidence, and exact joint draws.
pub(crate) struct ModeFit<'s> {
    pub hyper: HyperPoint,
    pub phi: Vec<f64>,
    pub beta: DVector<f64>,
    pub eta: Vec<f64>,
    pub factor: NumericFactor<'s>,
    /// `A^{-1} U`, n x p.
    pub t_mat: DMatrix<f64>,
    /// Lower Cholesky factor of the Schur complement S.
    pub schur_l: DMatrix<f64>,
    /// Log marginal likelihood of the data at these hyperparameters.
    pub log_evidence: f64,
    pub newton_iterations: usize,
}

/// Per-coordinate posterior standard deviations under the Gaussian
/// approximation.
pub(crate) struct Marginals {
    pub phi_sd: Vec<f64>,
    pub beta_sd: Vec<f64>,
    pub eta_sd: Vec<f64>,
}

/// Moments of `mean(phi)` and its covariances with the coordinates, for the
/// centred reporting of the random effects (see `level_adjustment`).
pub(crate) struct LevelAdjustment {
    pub mean_bar: f64,
    pub var_bar: f64,
    /// `Cov(phi_k, mean(phi))` per area.
    pub cov_phi: Vec<f64>,
    /// `Cov(beta_0, mean(phi))`.
    pub cov_beta0: f64,
}

struct HessianPack<'s> {
    factor: NumericFactor<'s>,
    t_mat: DMatrix<f64>,
    schur_l: DMatrix<f64>,
    log_det: f64,
}

impl<'a> LatentSolver<'a> {
    /// Newton ascent to the joint mode, then the Laplace evidence
    ///
    /// ```text
    ///   log f(y | rho, tau, sigma) ~= h(mode) + (n+p)/2 ln 2pi - 1/2 ln det H
    /// ```
    ///
    /// where `h` is the log joint density of (y, phi, beta). `logdet_q` is
    /// `ln det Q(rho, W)` at unit tau, computed once per rho by the caller.
    /// `init` warm-starts from a nearby hyperparameter point.
    pub fn mode(
        &self,
        hyper: HyperPoint,
        logdet_q: f64,
        init: Option<(&[f64], &DVector<f64>)>,
    ) -> Result<ModeFit<'a>> {
        let spec = self.spec;
        let n = spec.n();
        let p = spec.p();
        let q = LerouxPrecision::new(self.w, hyper.rho, hyper.tau)?;

        let (mut phi, mut beta) = match init {
            Some((f, b)) => (f.to_vec(), b.clone()),
            None => {
                let mut b = DVector::zeros(p);
                b[0] = super::glm::initial_intercept(spec);
                (vec![0.0; n], b)
            }
        };

        let mut obj = log_joint_value(spec, &q, logdet_q, hyper.sigma, &phi, &beta);
        if !obj.is_finite() {
            // a warm start can land outside the representable range at
            // extreme hyperparameters; fall back to the cold start
            phi = vec![0.0; n];
            beta = DVector::zeros(p);
            beta[0] = super::glm::initial_intercept(spec);
            obj = log_joint_value(spec, &q, logdet_q, hyper.sigma, &phi, &beta);
            if !obj.is_finite() {
                return Err(Error::Numerical(
                    "log joint density is not finite at the starting point".into(),
                ));
            }
        }

        let mut iterations = 0;
        loop {
            iterations += 1;
            if iterations > self.max_iterations {
                return Err(Error::NonConvergence {
                    context: "latent Newton",
                    iterations: self.max_iterations,
                });
            }

            let eta = spec.eta(&beta, &phi);
            let mut u = vec![0.0; n];
            let mut c = vec![0.0; n];
            for k in 0..n {
                u[k] = spec.family.score(k, spec.y[k], eta[k], hyper.sigma);
                c[k] = spec.family.curvature(k, eta[k], hyper.sigma);
            }
            let q_phi = q.mul_vec(&phi);
            let g_phi: Vec<f64> = (0..n).map(|k| u[k] - q_phi[k]).collect();
            let mut g_beta = DVector::zeros(p);
            for k in 0..n {
                for j in 0..p {
                    g_beta[j] += spec.design[(k, j)] * u[k];
                }
            }
            g_beta -= &beta / spec.priors.beta_variance;

            let gmax = g_phi
                .iter()
                .chain(g_beta.iter())
                .fold(0.0f64, |a, v| a.max(v.abs()));

            let pack = self.build_hessian(&q, &c)?;

            if gmax < self.tol {
                let np = (n + p) as f64;
                let log_evidence = obj + 0.5 * np * LN_2PI - 0.5 * pack.log_det;
                return Ok(ModeFit {
                    hyper,
                    phi,
                    beta,
                    eta,
                    factor: pack.factor,
                    t_mat: pack.t_mat,
                    schur_l: pack.schur_l,
                    log_evidence,
                    newton_iterations: iterations - 1,
                });
            }

            // block-eliminated Newton direction
            let a1 = pack.factor.solve(&g_phi);
            let mut rhs = g_beta.clone();
            for k in 0..n {
                let ck = c[k];
                for j in 0..p {
                    // U' a1 with U = diag(c) X
                    rhs[j] -= ck * spec.design[(k, j)] * a1[k];
                }
            }
            let d_beta = cholesky_solve(&pack.schur_l, &rhs);
            let t_db = &pack.t_mat * &d_beta;
            let d_phi: Vec<f64> = (0..n).map(|k| a1[k] - t_db[k]).collect();

            // step halving on the exact objective
            let mut step = 1.0;
            let mut accepted = false;
            while step >= 1e-10 {
                let trial_phi: Vec<f64> =
                    (0..n).map(|k| phi[k] + step * d_phi[k]).collect();
                let trial_beta = &beta + step * &d_beta;
                let trial =
                    log_joint_value(spec, &q, logdet_q, hyper.sigma, &trial_phi, &trial_beta);
                if trial.is_finite() && trial >= obj - 1e-12 * (1.0 + obj.abs()) {
                    phi = trial_phi;
                    beta = trial_beta;
                    obj = trial;
                    accepted = true;
                    break;
                }
                step *= 0.5;
            }
            if !accepted {
                return Err(Error::NonConvergence {
                    context: "latent Newton line search",
                    iterations,
                });
            }
        }
    }

    fn build_hessian(&self, q: &LerouxPrecision, c: &[f64]) -> Result<HessianPack<'a>> {
        let spec = self.spec;
        let n = spec.n();
        let p = spec.p();
        let a_diag: Vec<f64> = (0..n).map(|k| q.diag()[k] + c[k]).collect();
        let factor = self.sym.factor(&a_diag, q.offdiag())?;

        // U = diag(c) X, T = A^{-1} U column by column
        let mut t_mat = DMatrix::zeros(n, p);
        let mut col = vec![0.0; n];
        for j in 0..p {
            for k in 0..n {
                col[k] = c[k] * spec.design[(k, j)];
            }
            let solved = factor.solve(&col);
            for k in 0..n {
                t_mat[(k, j)] = solved[k];
            }
        }

        // S = X' diag(c) X + I / v_beta - U' T
        let mut s = DMatrix::<f64>::zeros(p, p);
        for k in 0..n {
            let ck = c[k];
            for i in 0..p {
                let xi = spec.design[(k, i)];
                for j in i..p {
                    s[(i, j)] += ck * xi * (spec.design[(k, j)] - t_mat[(k, j)]);
                }
            }
        }
        for i in 0..p {
            s[(i, i)] += 1.0 / spec.priors.beta_variance;
            for j in 0..i {
                s[(i, j)] = s[(j, i)];
            }
        }
        let chol = s.clone().cholesky().ok_or_else(|| {
            Error::Numerical("coefficient block of the Hessian is not positive definite".into())
        })?;
        let schur_l = chol.l();
        let log_det_s: f64 = 2.0 * (0..p).map(|i| schur_l[(i, i)].ln()).sum::<f64>();
        let log_det = factor.log_det() + log_det_s;
        Ok(HessianPack {
            factor,
            t_mat,
            schur_l,
            log_det,
        })
    }
}

impl ModeFit<'_> {
    /// Marginal standard deviations of `phi_k`, `beta_j`, and the linear
    /// predictor `eta_k` under the Gaussian approximation, from the block
    /// inverse
    ///
    /// ```text
    ///   Var(phi_k)  = [A^{-1}]_kk + t_k' S^{-1} t_k
    ///   Var(beta)   = S^{-1}
    ///   Var(eta_k)  = [A^{-1}]_kk + (t_k - x_k)' S^{-1} (t_k - x_k)
    /// ```
    ///
    /// with `t_k` the k-th row of `T = A^{-1} U`. The `A^{-1}` diagonal is
    /// exact via the Takahashi recurrences, no per-area solves.
    pub fn marginal_sds(&self, design: &DMatrix<f64>) -> Marginals {
        let n = self.phi.len();
        let p = self.beta.len();
        let a_inv = self.factor.inv_diag();

        let mut phi_sd = Vec::with_capacity(n);
        let mut eta_sd = Vec::with_capacity(n);
        let mut v = DVector::zeros(p);
        for k in 0..n {
            for j in 0..p {
                v[j] = self.t_mat[(k, j)];
            }
            forward_solve(&self.schur_l, &mut v);
            phi_sd.push((a_inv[k] + v.norm_squared()).sqrt());
            for j in 0..p {
                v[j] = self.t_mat[(k, j)] - design[(k, j)];
            }
            forward_solve(&self.schur_l, &mut v);
            eta_sd.push((a_inv[k] + v.norm_squared()).sqrt());
        }

        let mut beta_sd = Vec::with_capacity(p);
        for j in 0..p {
            let mut e = DVector::zeros(p);
            e[j] = 1.0;
            forward_solve(&self.schur_l, &mut e);
            beta_sd.push(e.norm_squared().sqrt());
        }
        Marginals {
            phi_sd,
            beta_sd,
            eta_sd,
        }
    }

    /// The pieces needed to report `phi` centred (`phi_k - mean(phi)`) with
    /// the level folded into the intercept. Under a nearly intrinsic prior
    /// the common level of the field trades off against the intercept and is
    /// identified only by the prior, so the raw `phi` marginals carry a large
    /// shared variance term that says nothing about differences between
    /// areas. The centred split reports the identified quantities; the
    /// linear predictor is unchanged because the design has an intercept
    /// column.
    ///
    /// With `a` the averaging vector over the `phi` block,
    ///
    /// ```text
    ///   Var(mean(phi))       = a' A^{-1} a + g' S^{-1} g,   g = T' a
    ///   Cov(phi_k, mean(phi)) = (A^{-1} a)_k + t_k' S^{-1} g
    ///   Cov(beta_0, mean(phi)) = -(S^{-1} g)_0
    /// ```
    pub fn level_adjustment(&self) -> LevelAdjustment {
        let n = self.phi.len();
        let p = self.beta.len();
        let a = vec![1.0 / n as f64; n];
        let x = self.factor.solve(&a);

        let mut g = DVector::zeros(p);
        for j in 0..p {
            g[j] = (0..n).map(|k| self.t_mat[(k, j)]).sum::<f64>() / n as f64;
        }
        let mut h = g.clone();
        forward_solve(&self.schur_l, &mut h);
        backward_solve_t(&self.schur_l, &mut h);

        let var_bar = a.iter().zip(&x).map(|(ai, xi)| ai * xi).sum::<f64>() + g.dot(&h);
        let cov_phi: Vec<f64> = (0..n)
            .map(|k| x[k] + (0..p).map(|j| self.t_mat[(k, j)] * h[j]).sum::<f64>())
            .collect();
        LevelAdjustment {
            mean_bar: self.phi.iter().sum::<f64>() / n as f64,
            var_bar,
            cov_phi,
            cov_beta0: -h[0],
        }
    }

    /// One exact draw from the Gaussian approximation: `beta` from its
    /// marginal, then `phi` from its conditional given `beta`.
    pub fn sample_joint<R: Rng>(&self, rng: &mut R) -> (Vec<f64>, DVector<f64>) {
        let n = self.phi.len();
        let p = self.beta.len();
        let mut zb = DVector::zeros(p);
        for j in 0..p {
            zb[j] = rng.sample(StandardNormal);
        }
        backward_solve_t(&self.schur_l, &mut zb);
        let beta = &self.beta + &zb;

        let zn: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let noise = self.factor.sample_from_std_normals(&zn);
        let shift = &self.t_mat * &zb;
        let phi: Vec<f64> = (0..n)
            .map(|k| self.phi[k] - shift[k] + noise[k])
            .collect();
        (phi, beta)
    }
}

/// Log joint density `ln f(y, phi, beta | rho, tau, sigma)` with all
/// normalizing constants, so that Laplace evidence values are absolute.
fn log_joint_value(
    spec: &ModelSpec,
    q: &LerouxPrecision,
    logdet_q: f64,
    sigma: f64,
    phi: &[f64],
    beta: &DVector<f64>,
) -> f64 {
    let n = spec.n() as f64;
    let eta = spec.eta(beta, phi);
    let ll: f64 = (0..spec.n())
        .map(|k| spec.family.log_lik(k, spec.y[k], eta[k], sigma))
        .sum();
    let gmrf = 0.5 * (n * q.tau().ln() + logdet_q) - 0.5 * n * LN_2PI - 0.5 * q.quad_form(phi);
    let vb = spec.priors.beta_variance;
    let pb = beta.len() as f64;
    let beta_prior = -0.5 * pb * (LN_2PI + vb.ln()) - beta.dot(beta) / (2.0 * vb);
    ll + gmrf + beta_prior
}

/// Log joint density of data, random effects, and coefficients at one point,
/// for a model on the given neighbour matrix. Public so approximations built
/// on this density can be checked against it directly.
pub fn log_joint_density(
    spec: &ModelSpec,
    w: &NeighbourMatrix,
    rho: f64,
    tau: f64,
    sigma: Option<f64>,
    phi: &[f64],
    beta: &[f64],
) -> Result<f64> {
    spec.validate()?;
    let (q, logdet_q, sigma) = density_parts(spec, w, rho, tau, sigma)?;
    check_lengths(spec, phi, beta)?;
    let beta = DVector::from_column_slice(beta);
    Ok(log_joint_value(spec, &q, logdet_q, sigma, phi, &beta))
}

/// Analytic gradient of [`log_joint_density`] in `(phi, beta)`.
pub fn log_joint_gradient(
    spec: &ModelSpec,
    w: &NeighbourMatrix,
    rho: f64,
    tau: f64,
    sigma: Option<f64>,
    phi: &[f64],
    beta: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    spec.validate()?;
    let (q, _, sigma) = density_parts(spec, w, rho, tau, sigma)?;
    check_lengths(spec, phi, beta)?;
    let n = spec.n();
    let p = spec.p();
    let beta_v = DVector::from_column_slice(beta);
    let eta = spec.eta(&beta_v, phi);
    let q_phi = q.mul_vec(phi);
    let mut g_phi = Vec::with_capacity(n);
    let mut g_beta = vec![0.0; p];
    for k in 0..n {
        let u = spec.family.score(k, spec.y[k], eta[k], sigma);
        g_phi.push(u - q_phi[k]);
        for j in 0..p {
            g_beta[j] += spec.design[(k, j)] * u;
        }
    }
    for j in 0..p {
        g_beta[j] -= beta[j] / spec.priors.beta_variance;
    }
    Ok((g_phi, g_beta))
}

/// Joint posterior mode of the random effects and coefficients at fixed
/// hyperparameters.
#[derive(Debug, Clone)]
pub struct LatentMode {
    pub phi: Vec<f64>,
    pub beta: Vec<f64>,
    pub eta: Vec<f64>,
    pub newton_iterations: usize,
}

/// Finds the joint mode of `(phi, beta)` by Newton ascent on the log joint
/// density. The gradient at the returned point is below 1e-6 in max norm.
pub fn latent_mode(
    spec: &ModelSpec,
    w: &NeighbourMatrix,
    rho: f64,
    tau: f64,
    sigma: Option<f64>,
) -> Result<LatentMode> {
    spec.validate()?;
    let (_, logdet_q, sigma) = density_parts(spec, w, rho, tau, sigma)?;
    let sym = symbolic_for_graph(w.graph());
    let solver = LatentSolver {
        spec,
        w,
        sym: &sym,
        max_iterations: NEWTON_MAX_ITERATIONS,
        tol: NEWTON_TOL,
    };
    let fit = solver.mode(HyperPoint { rho, tau, sigma }, logdet_q, None)?;
    Ok(LatentMode {
        phi: fit.phi,
        beta: fit.beta.iter().copied().collect(),
        eta: fit.eta,
        newton_iterations: fit.newton_iterations,
    })
}

/// Laplace approximation to the log marginal likelihood
/// `ln f(y | rho, tau, sigma)` with the latent field and coefficients
/// integrated out. Exact for the Gaussian family. Hyperpriors are not
/// included; this is the evidence factor that posterior weights multiply
/// with the hyperprior.
pub fn laplace_log_marginal(
    spec: &ModelSpec,
    w: &NeighbourMatrix,
    rho: f64,
    tau: f64,
    sigma: Option<f64>,
) -> Result<f64> {
    spec.validate()?;
    let (_, logdet_q, sigma) = density_parts(spec, w, rho, tau, sigma)?;
    let sym = symbolic_for_graph(w.graph());
    let solver = LatentSolver {
        spec,
        w,
        sym: &sym,
        max_iterations: NEWTON_MAX_ITERATIONS,
        tol: NEWTON_TOL,
    };
    let hyper = HyperPoint { rho, tau, sigma };
    Ok(solver.mode(hyper, logdet_q, None)?.log_evidence)
}

fn density_parts(
    spec: &ModelSpec,
    w: &NeighbourMatrix,
    rho: f64,
    tau: f64,
    sigma: Option<f64>,
) -> Result<(LerouxPrecision, f64, f64)> {
    if w.graph().n_areas() != spec.n() {
        return Err(Error::Model(format!(
            "neighbour matrix is over {} areas, data over {}",
            w.graph().n_areas(),
            spec.n()
        )));
    }
    let sigma = match (spec.family.needs_sigma(), sigma) {
        (true, Some(v)) if v > 0.0 && v.is_finite() => v,
        (true, Some(v)) => {
            return Err(Error::Model(format!(
                "observation precision must be positive, got {v}"
            )))
        }
        (true, None) => {
            return Err(Error::Model(
                "the Gaussian family needs an observation precision".into(),
            ))
        }
        (false, _) => 1.0,
    };
    let q = LerouxPrecision::new(w, rho, tau)?;
    let unit = LerouxPrecision::new(w, rho, 1.0)?;
    let sym = symbolic_for_graph(w.graph());
    let logdet_q = unit.factor(&sym)?.log_det();
    Ok((q, logdet_q, sigma))
}

fn check_lengths(spec: &ModelSpec, phi: &[f64], beta: &[f64]) -> Result<()> {
    if phi.len() != spec.n() || beta.len() != spec.p() {
        return Err(Error::Model(format!(
            "point has {} effects and {} coefficients; model needs {} and {}",
            phi.len(),
            beta.len(),
            spec.n(),
            spec.p()
        )));
    }
    Ok(())
}

/// `L x = v` in place, L lower triangular.
pub(crate) fn forward_solve(l: &DMatrix<f64>, v: &mut DVector<f64>) {
    let p = l.nrows();
    for i in 0..p {
        let mut s = v[i];
        for j in 0..i {
            s -= l[(i, j)] * v[j];
        }
        v[i] = s / l[(i, i)];
    }
}

/// `L' x = v` in place, L lower triangular.
pub(crate) fn backward_solve_t(l: &DMatrix<f64>, v: &mut DVector<f64>) {
    let p = l.nrows();
    for i in (0..p).rev() {
        let mut s = v[i];
        for j in i + 1..p {
            s -= l[(j, i)] * v[j];
        }
        v[i] = s / l[(i, i)];
    }
}

/// Solves `S x = b` given the lower Cholesky factor of S.
pub(crate) fn cholesky_solve(l: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let mut x = b.clone();
    forward_solve(l, &mut x);
    backward_solve_t(l, &mut x);
    x
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::AdjacencyGraph;
    use crate::inference::{Family, ModelSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn lattice_w(nx: usize, ny: usize) -> NeighbourMatrix {
        NeighbourMatrix::all_active(Arc::new(AdjacencyGraph::lattice(nx, ny)))
    }

    fn covariate(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
    }

    fn poisson_spec(n: usize, seed: u64) -> ModelSpec {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = covariate(n, seed + 1);
        let y: Vec<f64> = x
            .iter()
            .map(|&v| {
                let mu = (1.2 + 0.3 * v).exp();
                // crude Poisson draw, adequate for fixtures
                let mut k = 0.0;
                let mut p = rng.gen::<f64>();
                let mut cdf = (-mu).exp();
                let mut pmf = cdf;
                while p > cdf && k < 1000.0 {
                    k += 1.0;
                    pmf *= mu / k;
                    cdf += pmf;
                    p = p.min(1.0);
                }
                k
            })
            .collect();
        ModelSpec::new(Family::Poisson, y, None, &[x]).unwrap()
    }

    #[test]
    fn analytic_gradients_match_finite_differences() {
        let w = lattice_w(3, 4);
        let n = 12;
        let x = covariate(n, 4);
        let specs = vec![
            ModelSpec::new(Family::Poisson, vec![2.0; n], None, &[x.clone()]).unwrap(),
            ModelSpec::new(
                Family::Binomial {
                    trials: vec![9.0; n],
                },
                vec![4.0; n],
                None,
                &[x.clone()],
            )
            .unwrap(),
            ModelSpec::new(Family::Gaussian, covariate(n, 9), None, &[x]).unwrap(),
        ];
        let phi: Vec<f64> = (0..n).map(|k| ((k * 7 + 1) as f64 * 0.17).sin() * 0.4).collect();
        let beta = [0.6, -0.2];
        let (rho, tau, sigma) = (0.55, 1.8, Some(2.2));
        let h = 1e-5;
        for spec in &specs {
            let (g_phi, g_beta) =
                log_joint_gradient(spec, &w, rho, tau, sigma, &phi, &beta).unwrap();
            for k in 0..n {
                let mut hi = phi.clone();
                let mut lo = phi.clone();
                hi[k] += h;
                lo[k] -= h;
                let num = (log_joint_density(spec, &w, rho, tau, sigma, &hi, &beta).unwrap()
                    - log_joint_density(spec, &w, rho, tau, sigma, &lo, &beta).unwrap())
                    / (2.0 * h);
                assert!(
                    (g_phi[k] - num).abs() <= 1e-6 * (1.0 + num.abs()),
                    "phi gradient {k}: {} vs {num}",
                    g_phi[k]
                );
            }
            for j in 0..2 {
                let mut hi = beta;
                let mut lo = beta;
                hi[j] += h;
                lo[j] -= h;
                let num = (log_joint_density(spec, &w, rho, tau, sigma, &phi, &hi).unwrap()
                    - log_joint_density(spec, &w, rho, tau, sigma, &phi, &lo).unwrap())
                    / (2.0 * h);
                assert!(
                    (g_beta[j] - num).abs() <= 1e-6 * (1.0 + num.abs()),
                    "beta gradient {j}: {} vs {num}",
                    g_beta[j]
                );
            }
        }
    }

    /// For the Gaussian family the joint density is quadratic, so the
    /// Laplace evidence must equal the closed-form marginal likelihood
    /// `y ~ N(offset, sigma^{-1} I + v_beta X X' + (tau Q)^{-1})`.
    #[test]
    fn gaussian_evidence_is_exact() {
        let w = lattice_w(3, 4);
        let n = 12;
        let x = covariate(n, 31);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let y: Vec<f64> = (0..n)
            .map(|k| 0.8 - 0.5 * x[k] + 0.3 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let offset: Vec<f64> = (0..n).map(|k| 0.05 * k as f64).collect();
        let spec =
            ModelSpec::new(Family::Gaussian, y.clone(), Some(offset.clone()), &[x]).unwrap();
        let (rho, tau, sigma) = (0.4, 1.3, 2.0);

        let got = laplace_log_marginal(&spec, &w, rho, tau, Some(sigma)).unwrap();

        // dense reference
        let mut q = DMatrix::zeros(n, n);
        for k in 0..n {
            q[(k, k)] = rho * w.active_degree(k) + 1.0 - rho;
            for j in w.active_neighbours(k) {
                q[(k, j)] = -rho;
            }
        }
        let qinv = (tau * q).try_inverse().unwrap();
        let xx = &spec.design * spec.design.transpose();
        let mut cov = qinv + spec.priors.beta_variance * xx;
        for k in 0..n {
            cov[(k, k)] += 1.0 / sigma;
        }
        let chol = cov.clone().cholesky().unwrap();
        let resid = DVector::from_iterator(n, (0..n).map(|k| y[k] - offset[k]));
        let alpha = chol.solve(&resid);
        let logdet: f64 = 2.0 * (0..n).map(|i| chol.l()[(i, i)].ln()).sum::<f64>();
        let expect = -0.5 * (n as f64) * LN_2PI - 0.5 * logdet - 0.5 * resid.dot(&alpha);

        assert!(
            (got - expect).abs() < 1e-8,
            "laplace {got} vs analytic {expect}"
        );
    }

    /// Full `(n+p) x (n+p)` Hessian of the negative log joint at the mode.
    fn dense_hessian(
        spec: &ModelSpec,
        w: &NeighbourMatrix,
        hyper: HyperPoint,
        fit: &ModeFit,
    ) -> DMatrix<f64> {
        let n = spec.n();
        let p = spec.p();
        let q = LerouxPrecision::new(w, hyper.rho, hyper.tau).unwrap();
        let mut h = DMatrix::zeros(n + p, n + p);
        for k in 0..n {
            let ck = spec.family.curvature(k, fit.eta[k], hyper.sigma);
            h[(k, k)] = q.entry(k, k, w) + ck;
            for j in w.active_neighbours(k) {
                h[(k, j)] = q.entry(k, j, w);
            }
            for j in 0..p {
                h[(k, n + j)] = ck * spec.design[(k, j)];
                h[(n + j, k)] = h[(k, n + j)];
            }
        }
        for i in 0..p {
            for j in 0..p {
                let v: f64 = (0..n)
                    .map(|k| {
                        spec.design[(k, i)]
                            * spec.family.curvature(k, fit.eta[k], hyper.sigma)
                            * spec.design[(k, j)]
                    })
                    .sum();
                h[(n + i, n + j)] = v;
            }
            h[(n + i, n + i)] += 1.0 / spec.priors.beta_variance;
        }
        h
    }

    /// The Gaussian-approximation covariance diag must match the dense
    /// inverse of the full (n+p) Hessian, whatever the family.
    #[test]
    fn marginal_sds_match_dense_block_inverse() {
        let w = lattice_w(3, 3);
        let spec = poisson_spec(9, 77);
        let sym = symbolic_for_graph(w.graph());
        let solver = LatentSolver {
            spec: &spec,
            w: &w,
            sym: &sym,
            max_iterations: NEWTON_MAX_ITERATIONS,
            tol: NEWTON_TOL,
        };
        let hyper = HyperPoint {
            rho: 0.6,
            tau: 1.4,
            sigma: 1.0,
        };
        let unit = LerouxPrecision::new(&w, hyper.rho, 1.0).unwrap();
        let logdet_q = unit.factor(&sym).unwrap().log_det();
        let fit = solver.mode(hyper, logdet_q, None).unwrap();
        let marg = fit.marginal_sds(&spec.design);

        // dense H at the mode
        let n = 9;
        let p = 2;
        let hinv = dense_hessian(&spec, &w, hyper, &fit).try_inverse().unwrap();
        for k in 0..n {
            let expect = hinv[(k, k)].sqrt();
            assert!(
                (marg.phi_sd[k] - expect).abs() < 1e-8 * (1.0 + expect),
                "phi sd {k}"
            );
            // eta_k = phi_k + x_k' beta (+ fixed offset)
            let mut var = hinv[(k, k)];
            for i in 0..p {
                for j in 0..p {
                    var += spec.design[(k, i)] * hinv[(n + i, n + j)] * spec.design[(k, j)];
                }
                var += 2.0 * spec.design[(k, i)] * hinv[(k, n + i)];
            }
            assert!(
                (marg.eta_sd[k] - var.sqrt()).abs() < 1e-8 * (1.0 + var.sqrt()),
                "eta sd {k}"
            );
        }
        for j in 0..p {
            let expect = hinv[(n + j, n + j)].sqrt();
            assert!((marg.beta_sd[j] - expect).abs() < 1e-8 * (1.0 + expect));
        }
    }

    /// The level functional is linear in `(phi, beta)`, so its moments are
    /// plain contractions of the dense inverse Hessian: with
    /// `a = (1/n, .., 1/n, 0, .., 0)`, `Var(mean(phi)) = a' H^{-1} a`,
    /// `Cov(phi_k, mean(phi)) = (H^{-1} a)_k` and
    /// `Cov(beta_0, mean(phi)) = (H^{-1} a)_n`.
    #[test]
    fn level_adjustment_matches_dense_inverse() {
        let w = lattice_w(3, 3);
        let spec = poisson_spec(9, 41);
        let sym = symbolic_for_graph(w.graph());
        let solver = LatentSolver {
            spec: &spec,
            w: &w,
            sym: &sym,
            max_iterations: NEWTON_MAX_ITERATIONS,
            tol: NEWTON_TOL,
        };
        let hyper = HyperPoint {
            rho: 0.8,
            tau: 2.1,
            sigma: 1.0,
        };
        let unit = LerouxPrecision::new(&w, hyper.rho, 1.0).unwrap();
        let logdet_q = unit.factor(&sym).unwrap().log_det();
        let fit = solver.mode(hyper, logdet_q, None).unwrap();
        let level = fit.level_adjustment();

        let n = 9;
        let hinv = dense_hessian(&spec, &w, hyper, &fit).try_inverse().unwrap();
        let col: Vec<f64> = (0..n + spec.p())
            .map(|i| (0..n).map(|l| hinv[(i, l)]).sum::<f64>() / n as f64)
            .collect();
        let var: f64 = col.iter().take(n).sum::<f64>() / n as f64;

        let mean = fit.phi.iter().sum::<f64>() / n as f64;
        assert!((level.mean_bar - mean).abs() < 1e-12);
        assert!(
            (level.var_bar - var).abs() < 1e-8 * (1.0 + var),
            "var {} vs dense {var}",
            level.var_bar
        );
        for k in 0..n {
            assert!(
                (level.cov_phi[k] - col[k]).abs() < 1e-8 * (1.0 + col[k].abs()),
                "cov_phi {k}: {} vs dense {}",
                level.cov_phi[k],
                col[k]
            );
        }
        assert!(
            (level.cov_beta0 - col[n]).abs() < 1e-8 * (1.0 + col[n].abs()),
            "cov_beta0 {} vs dense {}",
            level.cov_beta0,
            col[n]
        );
    }

    #[test]
    fn mode_gradient_vanishes_and_warm_start_agrees() {
        let w = lattice_w(4, 4);
        let spec = poisson_spec(16, 123);
        let sym = symbolic_for_graph(w.graph());
        let solver = LatentSolver {
            spec: &spec,
            w: &w,
            sym: &sym,
            max_iterations: NEWTON_MAX_ITERATIONS,
            tol: NEWTON_TOL,
        };
        let unit = LerouxPrecision::new(&w, 0.3, 1.0).unwrap();
        let logdet_q = unit.factor(&sym).unwrap().log_det();
        let hyper = HyperPoint {
            rho: 0.3,
            tau: 0.9,
            sigma: 1.0,
        };
        let cold = solver.mode(hyper, logdet_q, None).unwrap();
        let beta_slice: Vec<f64> = cold.beta.iter().copied().collect();
        let (g_phi, g_beta) =
            log_joint_gradient(&spec, &w, 0.3, 0.9, None, &cold.phi, &beta_slice).unwrap();
        for g in g_phi.iter().chain(g_beta.iter()) {
            assert!(g.abs() < NEWTON_TOL);
        }

        // warm start from a perturbed point reaches the same mode
        let near_phi: Vec<f64> = cold.phi.iter().map(|v| v + 0.01).collect();
        let near_beta = cold.beta.clone().add_scalar(-0.02);
        let warm = solver
            .mode(hyper, logdet_q, Some((&near_phi, &near_beta)))
            .unwrap();
        assert!(warm.newton_iterations <= cold.newton_iterations);
        for k in 0..16 {
            assert!((warm.phi[k] - cold.phi[k]).abs() < 1e-7);
        }
        // both runs stop at gradient tol 1e-6; the evidence difference is
        // dominated by the log-det term's sensitivity to the residual mode
        // error, so agreement is a few orders looser than the mode itself
        assert!((warm.log_evidence - cold.log_evidence).abs() < 1e-5);
    }

    #[test]
    fn joint_samples_are_seeded_and_centred() {
        let w = lattice_w(3, 3);
        let spec = poisson_spec(9, 55);
        let sym = symbolic_for_graph(w.graph());
        let solver = LatentSolver {
            spec: &spec,
            w: &w,
            sym: &sym,
            max_iterations: NEWTON_MAX_ITERATIONS,
            tol: NEWTON_TOL,
        };
        let unit = LerouxPrecision::new(&w, 0.5, 1.0).unwrap();
        let logdet_q = unit.factor(&sym).unwrap().log_det();
        let fit = solver
            .mode(
                HyperPoint {
                    rho: 0.5,
                    tau: 2.0,
                    sigma: 1.0,
                },
                logdet_q,
                None,
            )
            .unwrap();

        let mut r1 = ChaCha8Rng::seed_from_u64(2);
        let mut r2 = ChaCha8Rng::seed_from_u64(2);
        let (p1, b1) = fit.sample_joint(&mut r1);
        let (p2, b2) = fit.sample_joint(&mut r2);
        assert_eq!(p1, p2);
        assert_eq!(b1, b2);

        // draw means stay near the mode
        let marg = fit.marginal_sds(&spec.design);
        let draws = 4000;
        let mut mean_phi0 = 0.0;
        let mut mean_b0 = 0.0;
        for _ in 0..draws {
            let (phi, beta) = fit.sample_joint(&mut r1);
            mean_phi0 += phi[0];
            mean_b0 += beta[0];
        }
        mean_phi0 /= draws as f64;
        mean_b0 /= draws as f64;
        let se_phi = marg.phi_sd[0] / (draws as f64).sqrt();
        let se_b = marg.beta_sd[0] / (draws as f64).sqrt();
        assert!((mean_phi0 - fit.phi[0]).abs() < 5.0 * se_phi);
        assert!((mean_b0 - fit.beta[0]).abs() < 5.0 * se_b);
    }
}
