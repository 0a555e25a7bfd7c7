//! Areal adjacency and the binary neighbour relation.
//!
//! [`AdjacencyGraph`] is the fixed geography: areas `0..n` and an undirected
//! edge set of border-sharing pairs. [`NeighbourMatrix`] overlays one
//! active/inactive flag per edge; the implied binary matrix W has
//! `w_kj = 1` exactly when `{k, j}` is an active edge, so W is symmetric by
//! construction and never gains entries the geography does not have.
//! Inactive edges are the detected boundaries, collected in a
//! [`BoundarySet`].

use std::fmt;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use crate::error::{Error, Result};

/// Immutable area adjacency: areas `0..n`, undirected edges stored once with
/// `k < j`, optional centroid coordinates.
#[derive(Debug, Clone)]
pub struct AdjacencyGraph {
    n: usize,
    edges: Vec<(usize, usize)>,
    /// Per area: `(neighbour, edge index)`, sorted by neighbour.
    incident: Vec<Vec<(usize, usize)>>,
    centroids: Option<Vec<(f64, f64)>>,
}

impl AdjacencyGraph {
    /// Builds a graph from raw undirected pairs. Pairs may come in either
    /// orientation; self-edges, duplicates, and out-of-range indices are
    /// rejected. Areas with no edges are allowed.
    pub fn from_edge_list(n: usize, raw: &[(usize, usize)]) -> Result<Self> {
        let mut edges = Vec::with_capacity(raw.len());
        for &(a, b) in raw {
            if a == b {
                return Err(Error::Graph(format!("self edge at area {a}")));
            }
            if a >= n || b >= n {
                return Err(Error::Graph(format!(
                    "edge ({a}, {b}) out of range for {n} areas"
                )));
            }
            edges.push((a.min(b), a.max(b)));
        }
        edges.sort_unstable();
        if let Some(w) = edges.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::Graph(format!(
                "duplicate edge ({}, {})",
                w[0].0, w[0].1
            )));
        }
        let mut incident = vec![Vec::new(); n];
        for (idx, &(k, j)) in edges.iter().enumerate() {
            incident[k].push((j, idx));
            incident[j].push((k, idx));
        }
        for list in &mut incident {
            list.sort_unstable();
        }
        Ok(Self {
            n,
            edges,
            incident,
            centroids: None,
        })
    }

    /// Regular `nx` by `ny` rook-adjacency lattice with unit-spaced centroids.
    /// Area `(ix, iy)` has index `iy * nx + ix` and centroid `(ix, iy)`.
    pub fn lattice(nx: usize, ny: usize) -> Self {
        assert!(nx > 0 && ny > 0, "lattice dimensions must be positive");
        let mut raw = Vec::with_capacity(2 * nx * ny);
        for iy in 0..ny {
            for ix in 0..nx {
                let k = iy * nx + ix;
                if ix + 1 < nx {
                    raw.push((k, k + 1));
                }
                if iy + 1 < ny {
                    raw.push((k, k + nx));
                }
            }
        }
        let mut g = Self::from_edge_list(nx * ny, &raw).expect("lattice edges are valid");
        g.centroids = Some(
            (0..nx * ny)
                .map(|k| ((k % nx) as f64, (k / nx) as f64))
                .collect(),
        );
        g
    }

    pub fn n_areas(&self) -> usize {
        self.n
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    /// All edges, sorted, each once with `k < j`.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    /// Index of the undirected edge `{k, j}`, if present.
    pub fn edge_index(&self, k: usize, j: usize) -> Option<usize> {
        let (lo, hi) = (k.min(j), k.max(j));
        self.edges.binary_search(&(lo, hi)).ok()
    }

    /// Neighbours of `k` as `(neighbour, edge index)`, sorted by neighbour.
    pub fn neighbours(&self, k: usize) -> &[(usize, usize)] {
        &self.incident[k]
    }

    pub fn degree(&self, k: usize) -> usize {
        self.incident[k].len()
    }

    pub fn centroids(&self) -> Option<&[(f64, f64)]> {
        self.centroids.as_deref()
    }

    pub fn set_centroids(&mut self, coords: Vec<(f64, f64)>) -> Result<()> {
        if coords.len() != self.n {
            return Err(Error::Graph(format!(
                "{} centroids for {} areas",
                coords.len(),
                self.n
            )));
        }
        self.centroids = Some(coords);
        Ok(())
    }

    /// Reads a plain edge-list file: one `k j` pair per line, 0-based area
    /// indices, `#` starts a comment line, blank lines ignored. When `n` is
    /// not given it is taken as `max index + 1`.
    pub fn read_edge_list(path: &Path, n: Option<usize>) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut raw = Vec::new();
        let mut max_idx = 0usize;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut it = line.split_whitespace();
            let (a, b) = match (it.next(), it.next()) {
                (Some(a), Some(b)) => (a, b),
                _ => {
                    return Err(Error::parse(
                        path,
                        lineno + 1,
                        "expected two area indices `k j`",
                    ))
                }
            };
            if let Some(extra) = it.next() {
                return Err(Error::parse(
                    path,
                    lineno + 1,
                    format!("unexpected trailing token {extra:?}"),
                ));
            }
            let parse_idx = |s: &str| -> Result<usize> {
                s.parse().map_err(|_| {
                    Error::parse(path, lineno + 1, format!("bad area index {s:?}"))
                })
            };
            let (a, b) = (parse_idx(a)?, parse_idx(b)?);
            max_idx = max_idx.max(a).max(b);
            raw.push((a, b));
        }
        let n = n.unwrap_or(if raw.is_empty() { 0 } else { max_idx + 1 });
        Self::from_edge_list(n, &raw)
    }

    /// Reads a centroid file: one `k x y` line per area, every area exactly
    /// once, any order. `#` comments and blank lines ignored.
    pub fn read_centroids(path: &Path, n: usize) -> Result<Vec<(f64, f64)>> {
        let text = fs::read_to_string(path)?;
        let mut coords = vec![None; n];
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let toks: Vec<&str> = line.split_whitespace().collect();
            if toks.len() != 3 {
                return Err(Error::parse(path, lineno + 1, "expected `k x y`"));
            }
            let k: usize = toks[0]
                .parse()
                .map_err(|_| Error::parse(path, lineno + 1, format!("bad area index {:?}", toks[0])))?;
            if k >= n {
                return Err(Error::parse(
                    path,
                    lineno + 1,
                    format!("area index {k} out of range for {n} areas"),
                ));
            }
            if coords[k].is_some() {
                return Err(Error::parse(path, lineno + 1, format!("area {k} repeated")));
            }
            let parse_f = |s: &str| -> Result<f64> {
                s.parse()
                    .map_err(|_| Error::parse(path, lineno + 1, format!("bad coordinate {s:?}")))
            };
            coords[k] = Some((parse_f(toks[1])?, parse_f(toks[2])?));
        }
        coords
            .into_iter()
            .enumerate()
            .map(|(k, c)| c.ok_or_else(|| Error::Graph(format!("centroid for area {k} missing"))))
            .collect()
    }
}

/// Binary neighbour matrix W over a fixed adjacency graph: one flag per
/// graph edge. `w_kj = 1` iff `{k, j}` is a graph edge with its flag active.
#[derive(Debug, Clone)]
pub struct NeighbourMatrix {
    graph: Arc<AdjacencyGraph>,
    active: Vec<bool>,
}

impl NeighbourMatrix {
    /// All geography edges active: the conventional CAR neighbour matrix.
    pub fn all_active(graph: Arc<AdjacencyGraph>) -> Self {
        let active = vec![true; graph.edge_count()];
        Self { graph, active }
    }

    pub fn graph(&self) -> &AdjacencyGraph {
        &self.graph
    }

    pub fn graph_arc(&self) -> &Arc<AdjacencyGraph> {
        &self.graph
    }

    /// Sets the flag on edge `{k, j}`. Pairs that are not graph edges cannot
    /// be activated or deactivated.
    pub fn set_pair(&mut self, k: usize, j: usize, active: bool) -> Result<()> {
        match self.graph.edge_index(k, j) {
            Some(idx) => {
                self.active[idx] = active;
                Ok(())
            }
            None => Err(Error::Graph(format!("({k}, {j}) is not a graph edge"))),
        }
    }

    pub fn edge_active(&self, edge_idx: usize) -> bool {
        self.active[edge_idx]
    }

    pub fn set_edge(&mut self, edge_idx: usize, active: bool) {
        self.active[edge_idx] = active;
    }

    /// `w_kj` as a weight: 1.0 for an active edge, 0.0 otherwise (including
    /// pairs that are not graph edges).
    pub fn weight(&self, k: usize, j: usize) -> f64 {
        match self.graph.edge_index(k, j) {
            Some(idx) if self.active[idx] => 1.0,
            _ => 0.0,
        }
    }

    /// Row sum `w_k+`: the number of active neighbours of `k`.
    pub fn active_degree(&self, k: usize) -> f64 {
        self.graph
            .neighbours(k)
            .iter()
            .filter(|&&(_, e)| self.active[e])
            .count() as f64
    }

    pub fn active_neighbours(&self, k: usize) -> impl Iterator<Item = usize> + '_ {
        self.graph
            .neighbours(k)
            .iter()
            .filter(move |&&(_, e)| self.active[e])
            .map(|&(j, _)| j)
    }

    pub fn active_count(&self) -> usize {
        self.active.iter().filter(|&&a| a).count()
    }

    /// First area with zero active neighbours, if any. Areas with zero graph
    /// degree count as isolated.
    pub fn isolated_area(&self) -> Option<usize> {
        (0..self.graph.n_areas()).find(|&k| {
            self.graph
                .neighbours(k)
                .iter()
                .all(|&(_, e)| !self.active[e])
        })
    }

    /// Opaque hashable key identifying the active set exactly: two matrices
    /// over the same graph compare equal iff their active sets are equal.
    /// Stable across processes (no per-run hash seeding).
    pub fn state_key(&self) -> StateKey {
        let mut bits = vec![0u64; self.active.len().div_ceil(64)];
        for (i, &a) in self.active.iter().enumerate() {
            if a {
                bits[i / 64] |= 1 << (i % 64);
            }
        }
        StateKey { bits: bits.into() }
    }

    /// The inactive edges, i.e. the boundaries this matrix encodes.
    pub fn boundary_set(&self) -> BoundarySet {
        BoundarySet {
            edges: self
                .graph
                .edges()
                .iter()
                .zip(&self.active)
                .filter(|(_, &a)| !a)
                .map(|(&e, _)| e)
                .collect(),
        }
    }
}

/// Exact identifier for a neighbour-matrix state: the bit-packed active
/// flags. Equality and hashing see the full bit pattern, so distinct active
/// sets never collide.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct StateKey {
    bits: Box<[u64]>,
}

impl StateKey {
    /// 64-bit FNV-1a digest of the bit pattern, for compact logging. Display
    /// only; cycle detection always compares full keys.
    pub fn short_hash(&self) -> u64 {
        const OFFSET: u64 = 0xcbf29ce484222325;
        const PRIME: u64 = 0x100000001b3;
        let mut h = OFFSET;
        for word in &self.bits {
            for byte in word.to_le_bytes() {
                h ^= byte as u64;
                h = h.wrapping_mul(PRIME);
            }
        }
        h
    }
}

impl fmt::Display for StateKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:016x}", self.short_hash())
    }
}

/// A set of undirected boundary edges, sorted, each once with `k < j`.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct BoundarySet {
    edges: Vec<(usize, usize)>,
}

impl BoundarySet {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let mut edges: Vec<(usize, usize)> = pairs
            .into_iter()
            .map(|(a, b)| (a.min(b), a.max(b)))
            .collect();
        edges.sort_unstable();
        edges.dedup();
        Self { edges }
    }

    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    pub fn contains(&self, k: usize, j: usize) -> bool {
        let (lo, hi) = (k.min(j), k.max(j));
        self.edges.binary_search(&(lo, hi)).is_ok()
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn intersection_count(&self, other: &BoundarySet) -> usize {
        self.edges.iter().filter(|&&(k, j)| other.contains(k, j)).count()
    }

    /// Edge-list text in the same `k j` format the adjacency reader accepts.
    pub fn to_edge_list_string(&self) -> String {
        let mut s = String::new();
        for &(k, j) in &self.edges {
            s.push_str(&format!("{k} {j}\n"));
        }
        s
    }
}

/// Deterministic test fixtures shared across the workspace.
pub mod fixtures {
    use super::AdjacencyGraph;

    /// Irregular synthetic graph with 271 areas and exactly 701 edges:
    /// a path plus chords at strides 9 and 17. Degrees range from 2 to 6,
    /// loosely mimicking an urban adjacency structure.
    pub fn irregular_271() -> AdjacencyGraph {
        let n = 271;
        let mut raw = Vec::new();
        for i in 0..n - 1 {
            raw.push((i, i + 1));
        }
        for i in 0..n - 17 {
            raw.push((i, i + 17));
        }
        for i in 0..177 {
            raw.push((i, i + 9));
        }
        AdjacencyGraph::from_edge_list(n, &raw).expect("fixture edges are valid")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_self_edges_duplicates_and_range() {
        assert!(matches!(
            AdjacencyGraph::from_edge_list(3, &[(1, 1)]),
            Err(Error::Graph(_))
        ));
        assert!(matches!(
            AdjacencyGraph::from_edge_list(3, &[(0, 1), (1, 0)]),
            Err(Error::Graph(_))
        ));
        assert!(matches!(
            AdjacencyGraph::from_edge_list(3, &[(0, 3)]),
            Err(Error::Graph(_))
        ));
    }

    #[test]
    fn zero_degree_areas_are_allowed() {
        let g = AdjacencyGraph::from_edge_list(3, &[(0, 1)]).unwrap();
        assert_eq!(g.degree(2), 0);
        let w = NeighbourMatrix::all_active(Arc::new(g));
        assert_eq!(w.isolated_area(), Some(2));
    }

    #[test]
    fn lattice_counts_and_neighbours() {
        let g = AdjacencyGraph::lattice(3, 3);
        assert_eq!(g.n_areas(), 9);
        assert_eq!(g.edge_count(), 12);
        // corner, edge, interior degrees
        assert_eq!(g.degree(0), 2);
        assert_eq!(g.degree(1), 3);
        assert_eq!(g.degree(4), 4);
        assert_eq!(g.centroids().unwrap()[5], (2.0, 1.0));
        assert_eq!(g.edge_index(4, 5), g.edge_index(5, 4));
        assert!(g.edge_index(0, 4).is_none());
    }

    #[test]
    fn irregular_fixture_has_701_edges() {
        let g = fixtures::irregular_271();
        assert_eq!(g.n_areas(), 271);
        assert_eq!(g.edge_count(), 701);
        assert!((0..271).all(|k| g.degree(k) >= 2));
    }

    #[test]
    fn neighbour_matrix_flags_and_boundaries() {
        let g = Arc::new(AdjacencyGraph::lattice(3, 3));
        let mut w = NeighbourMatrix::all_active(g);
        assert_eq!(w.active_count(), 12);
        assert_eq!(w.weight(0, 1), 1.0);
        assert_eq!(w.weight(0, 4), 0.0); // diagonal pair, not an edge
        assert_eq!(w.active_degree(4), 4.0);

        w.set_pair(0, 1, false).unwrap();
        assert_eq!(w.weight(0, 1), 0.0);
        assert_eq!(w.weight(1, 0), 0.0);
        assert_eq!(w.active_degree(0), 1.0);
        assert_eq!(w.active_count(), 11);
        let b = w.boundary_set();
        assert_eq!(b.len(), 1);
        assert!(b.contains(1, 0));

        assert!(matches!(w.set_pair(0, 4, true), Err(Error::Graph(_))));
    }

    #[test]
    fn state_keys_identify_active_sets_exactly() {
        let g = Arc::new(AdjacencyGraph::lattice(4, 4));
        let mut a = NeighbourMatrix::all_active(g.clone());
        let mut b = NeighbourMatrix::all_active(g);
        assert_eq!(a.state_key(), b.state_key());

        a.set_pair(0, 1, false).unwrap();
        assert_ne!(a.state_key(), b.state_key());

        b.set_pair(0, 1, false).unwrap();
        assert_eq!(a.state_key(), b.state_key());

        // distinct single-edge states never share a key
        a.set_pair(0, 1, true).unwrap();
        a.set_pair(0, 4, false).unwrap();
        assert_ne!(a.state_key(), b.state_key());
    }

    #[test]
    fn state_key_display_is_stable() {
        // FNV-1a recomputed independently over the expected bit pattern.
        let g = Arc::new(AdjacencyGraph::lattice(2, 2));
        let mut w = NeighbourMatrix::all_active(g);
        w.set_pair(0, 1, false).unwrap();
        // edges of the 2x2 lattice in sorted order: (0,1) (0,2) (1,3) (2,3)
        let bits: u64 = 0b1110;
        let mut h = 0xcbf29ce484222325u64;
        for byte in bits.to_le_bytes() {
            h ^= byte as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        assert_eq!(format!("{}", w.state_key()), format!("{h:016x}"));
    }

    #[test]
    fn boundary_set_operations() {
        let a = BoundarySet::from_pairs([(3, 1), (1, 3), (0, 2)]);
        assert_eq!(a.len(), 2);
        assert_eq!(a.edges(), &[(0, 2), (1, 3)]);
        let b = BoundarySet::from_pairs([(1, 3), (4, 5)]);
        assert_eq!(a.intersection_count(&b), 1);
        assert_eq!(a.to_edge_list_string(), "0 2\n1 3\n");
    }

    #[test]
    fn edge_list_file_roundtrip_and_diagnostics() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("adj.txt");

        std::fs::write(&path, "# comment\n0 1\n\n1 2\n").unwrap();
        let g = AdjacencyGraph::read_edge_list(&path, None).unwrap();
        assert_eq!(g.n_areas(), 3);
        assert_eq!(g.edge_count(), 2);

        std::fs::write(&path, "0 1\n1 2 7\n").unwrap();
        let err = AdjacencyGraph::read_edge_list(&path, None).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }

        std::fs::write(&path, "0 x\n").unwrap();
        assert!(matches!(
            AdjacencyGraph::read_edge_list(&path, None),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn centroid_file_requires_every_area_once() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("xy.txt");

        std::fs::write(&path, "1 0.5 1.5\n0 0.0 1.0\n").unwrap();
        let c = AdjacencyGraph::read_centroids(&path, 2).unwrap();
        assert_eq!(c, vec![(0.0, 1.0), (0.5, 1.5)]);

        std::fs::write(&path, "0 0.0 1.0\n0 0.5 1.5\n").unwrap();
        assert!(matches!(
            AdjacencyGraph::read_centroids(&path, 2),
            Err(Error::Parse { line: 2, .. })
        ));

        std::fs::write(&path, "0 0.0 1.0\n").unwrap();
        assert!(matches!(
            AdjacencyGraph::read_centroids(&path, 2),
            Err(Error::Graph(_))
        ));
    }
}
