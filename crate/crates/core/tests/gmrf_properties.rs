//! Property tests pinning the precision structure to dense linear-algebra
//! oracles on small random instances.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::SeedableRng;

use carbound::gmrf::{
    full_conditional, partial_correlation, symbolic_for_graph, LerouxPrecision,
};
use carbound::graph::{AdjacencyGraph, NeighbourMatrix};

/// A random neighbour matrix over n areas: every pair is a candidate edge,
/// each candidate kept with the given mask bit, and a random subset of the
/// kept edges is active.
fn random_w(n: usize, edge_bits: &[bool], active_bits: &[bool]) -> NeighbourMatrix {
    let mut edges = Vec::new();
    let mut b = 0;
    for k in 0..n {
        for j in (k + 1)..n {
            if edge_bits[b % edge_bits.len()] {
                edges.push((k, j));
            }
            b += 1;
        }
    }
    let graph = Arc::new(AdjacencyGraph::from_edge_list(n, &edges).unwrap());
    let mut w = NeighbourMatrix::all_active(graph);
    for e in 0..w.graph().edge_count() {
        if !active_bits[e % active_bits.len()] {
            w.set_edge(e, false);
        }
    }
    w
}

/// Dense `tau Q(rho, W)` built the textbook way.
fn dense_precision(w: &NeighbourMatrix, rho: f64, tau: f64) -> DMatrix<f64> {
    let n = w.graph().n_areas();
    let mut m = DMatrix::zeros(n, n);
    for k in 0..n {
        m[(k, k)] = tau * (rho * w.active_degree(k) + 1.0 - rho);
        for j in 0..n {
            if j != k {
                m[(k, j)] = -tau * rho * w.weight(k, j);
            }
        }
    }
    m
}

fn params() -> impl Strategy<Value = (usize, Vec<bool>, Vec<bool>, f64, f64)> {
    (
        2usize..=20,
        prop::collection::vec(any::<bool>(), 190),
        prop::collection::vec(any::<bool>(), 190),
        0.0f64..0.999,
        0.01f64..100.0,
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn entries_match_dense_construction((n, eb, ab, rho, tau) in params()) {
        let w = random_w(n, &eb, &ab);
        let q = LerouxPrecision::new(&w, rho, tau).unwrap();
        let dense = dense_precision(&w, rho, tau);
        for k in 0..n {
            for j in 0..n {
                prop_assert!((q.entry(k, j, &w) - dense[(k, j)]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn precision_is_positive_definite((n, eb, ab, rho, tau) in params()) {
        let w = random_w(n, &eb, &ab);
        let dense = dense_precision(&w, rho, tau);
        let min_eig = dense
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min);
        // analytic floor: tau (1 - rho) > 0 for rho < 1
        prop_assert!(min_eig > 0.0, "min eigenvalue {min_eig}");
        prop_assert!(min_eig >= tau * (1.0 - rho) - 1e-9 * tau);
    }

    #[test]
    fn log_density_matches_dense_gaussian((n, eb, ab, rho, tau) in params()) {
        let w = random_w(n, &eb, &ab);
        let q = LerouxPrecision::new(&w, rho, tau).unwrap();
        let sym = symbolic_for_graph(w.graph());
        let factor = q.factor(&sym).unwrap();

        let phi: Vec<f64> = (0..n).map(|k| ((k * 7 + 3) as f64 * 0.23).sin()).collect();
        let dense = dense_precision(&w, rho, tau);
        let chol = dense.clone().cholesky().unwrap();
        let log_det: f64 = 2.0 * (0..n).map(|i| chol.l()[(i, i)].ln()).sum::<f64>();
        let v = DVector::from_column_slice(&phi);
        let quad = (&dense * &v).dot(&v);
        let expect =
            0.5 * log_det - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln() - 0.5 * quad;

        prop_assert!(
            (q.log_density(&phi, &factor) - expect).abs() < 1e-8 * (1.0 + expect.abs()),
            "sparse {} dense {expect}", q.log_density(&phi, &factor)
        );
    }

    #[test]
    fn full_conditional_agrees_with_precision_identity((n, eb, ab, rho, tau) in params()) {
        let w = random_w(n, &eb, &ab);
        let q = LerouxPrecision::new(&w, rho, tau).unwrap();
        let phi: Vec<f64> = (0..n).map(|k| ((k * 5 + 1) as f64 * 0.41).cos()).collect();
        for k in 0..n {
            let (mean, var) = full_conditional(&phi, &w, rho, tau, k).unwrap();
            // mean = -Q_kk^{-1} sum_{j != k} Q_kj phi_j, var = 1 / (tau Q_kk)
            let qkk = q.entry(k, k, &w);
            let cross: f64 = (0..n)
                .filter(|&j| j != k)
                .map(|j| q.entry(k, j, &w) * phi[j])
                .sum();
            prop_assert!((mean - (-cross / qkk)).abs() < 1e-10);
            prop_assert!((var - 1.0 / qkk).abs() < 1e-10 * (1.0 + 1.0 / qkk));
        }
    }

    #[test]
    fn partial_correlation_matches_normalized_precision((n, eb, ab, rho, _tau) in params()) {
        let w = random_w(n, &eb, &ab);
        let q = LerouxPrecision::new(&w, rho, 1.0).unwrap();
        for k in 0..n {
            for j in 0..n {
                if j == k {
                    continue;
                }
                let got = partial_correlation(&w, rho, k, j).unwrap();
                let expect =
                    -q.entry(k, j, &w) / (q.entry(k, k, &w) * q.entry(j, j, &w)).sqrt();
                prop_assert!((got - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn log_density_is_invariant_under_relabelling((n, eb, ab, rho, tau) in params()) {
        let w = random_w(n, &eb, &ab);
        let phi: Vec<f64> = (0..n).map(|k| ((k * 11 + 2) as f64 * 0.31).sin()).collect();

        // relabel areas by reversal; rebuild the graph and carry the active
        // pattern across
        let perm = |k: usize| n - 1 - k;
        let edges2: Vec<(usize, usize)> = w
            .graph()
            .edges()
            .iter()
            .map(|&(k, j)| (perm(k), perm(j)))
            .collect();
        let g2 = Arc::new(AdjacencyGraph::from_edge_list(n, &edges2).unwrap());
        let mut w2 = NeighbourMatrix::all_active(g2);
        for (e, &(k, j)) in w.graph().edges().iter().enumerate() {
            if !w.edge_active(e) {
                w2.set_pair(perm(k), perm(j), false).unwrap();
            }
        }
        let mut phi2 = vec![0.0; n];
        for k in 0..n {
            phi2[perm(k)] = phi[k];
        }

        let q1 = LerouxPrecision::new(&w, rho, tau).unwrap();
        let sym1 = symbolic_for_graph(w.graph());
        let d1 = q1.log_density(&phi, &q1.factor(&sym1).unwrap());
        let q2 = LerouxPrecision::new(&w2, rho, tau).unwrap();
        let sym2 = symbolic_for_graph(w2.graph());
        let d2 = q2.log_density(&phi2, &q2.factor(&sym2).unwrap());
        prop_assert!((d1 - d2).abs() < 1e-9 * (1.0 + d1.abs()));
    }
}

/// Monte Carlo check that `sample` draws from N(0, (tau Q)^{-1}): empirical
/// covariance of 10^5 draws within three standard errors of the dense
/// inverse, entry by entry.
#[test]
fn sample_covariance_matches_inverse_precision() {
    let graph = Arc::new(AdjacencyGraph::from_edge_list(3, &[(0, 1), (1, 2)]).unwrap());
    let w = NeighbourMatrix::all_active(graph);
    let (rho, tau) = (0.6, 2.0);
    let q = LerouxPrecision::new(&w, rho, tau).unwrap();
    let sym = symbolic_for_graph(w.graph());
    let factor = q.factor(&sym).unwrap();

    let cov = dense_precision(&w, rho, tau).try_inverse().unwrap();

    let m = 100_000usize;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
    let mut acc = DMatrix::<f64>::zeros(3, 3);
    for _ in 0..m {
        let s = q.sample(&factor, &mut rng);
        for i in 0..3 {
            for j in 0..3 {
                acc[(i, j)] += s[i] * s[j];
            }
        }
    }
    acc /= m as f64;

    for i in 0..3 {
        for j in 0..3 {
            // Var(x_i x_j) = C_ii C_jj + C_ij^2 for a zero-mean Gaussian
            let se = ((cov[(i, i)] * cov[(j, j)] + cov[(i, j)].powi(2)) / m as f64).sqrt();
            assert!(
                (acc[(i, j)] - cov[(i, j)]).abs() < 3.0 * se,
                "covariance ({i},{j}): sample {} expected {} se {se}",
                acc[(i, j)],
                cov[(i, j)]
            );
        }
    }
}
