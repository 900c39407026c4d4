//! Spanning trees and the Chow-Liu maximum-weight tree step.

use std::collections::VecDeque;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TcaError};

/// An undirected spanning tree over vertices `0..m`.
///
/// Edges are stored as `(u, v)` with `u < v`, sorted lexicographically, so
/// two trees with the same edge set compare equal.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "TreeRepr", into = "TreeRepr")]
pub struct SpanningTree {
    m: usize,
    edges: Vec<(usize, usize)>,
    degree: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct TreeRepr {
    m: usize,
    edges: Vec<(usize, usize)>,
}

impl TryFrom<TreeRepr> for SpanningTree {
    type Error = TcaError;
    fn try_from(r: TreeRepr) -> Result<Self> {
        SpanningTree::new(r.m, r.edges)
    }
}

impl From<SpanningTree> for TreeRepr {
    fn from(t: SpanningTree) -> Self {
        TreeRepr { m: t.m, edges: t.edges }
    }
}

impl SpanningTree {
    pub fn new(m: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        if m < 1 {
            return Err(TcaError::InvalidTree("tree needs at least one vertex".into()));
        }
        let mut norm: Vec<(usize, usize)> = Vec::new();
        for (u, v) in edges {
            if u >= m || v >= m {
                return Err(TcaError::InvalidVertex { vertex: u.max(v), m });
            }
            if u == v {
                return Err(TcaError::InvalidTree(format!("self loop at {u}")));
            }
            norm.push((u.min(v), u.max(v)));
        }
        norm.sort_unstable();
        norm.dedup();
        if norm.len() != m - 1 {
            return Err(TcaError::InvalidTree(format!(
                "expected {} distinct edges, got {}",
                m - 1,
                norm.len()
            )));
        }
        let mut dsu = DisjointSets::new(m);
        for &(u, v) in &norm {
            if !dsu.union(u, v) {
                return Err(TcaError::InvalidTree(format!("edge ({u}, {v}) closes a cycle")));
            }
        }
        let mut degree = vec![0; m];
        for &(u, v) in &norm {
            degree[u] += 1;
            degree[v] += 1;
        }
        Ok(Self { m, edges: norm, degree })
    }

    /// The path `0 - 1 - ... - (m-1)`.
    pub fn chain(m: usize) -> Self {
        Self::new(m, (1..m).map(|v| (v - 1, v))).expect("chain is a tree")
    }

    /// Star centred at `center`.
    pub fn star(m: usize, center: usize) -> Result<Self> {
        Self::new(m, (0..m).filter(|&v| v != center).map(|v| (center, v)))
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn degree(&self, u: usize) -> usize {
        self.degree[u]
    }

    pub fn degrees(&self) -> &[usize] {
        &self.degree
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        self.edges.binary_search(&(u.min(v), u.max(v))).is_ok()
    }

    pub fn adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.m];
        for &(u, v) in &self.edges {
            adj[u].push(v);
            adj[v].push(u);
        }
        adj
    }

    pub fn neighbors(&self, u: usize) -> Vec<usize> {
        self.edges
            .iter()
            .filter_map(|&(a, b)| {
                if a == u {
                    Some(b)
                } else if b == u {
                    Some(a)
                } else {
                    None
                }
            })
            .collect()
    }

    /// Vertices of degree one, ascending.
    pub fn leaves(&self) -> Vec<usize> {
        (0..self.m).filter(|&u| self.degree[u] == 1).collect()
    }

    /// Image of the tree under the vertex map `u -> perm[u]`.
    pub fn relabel(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.m {
            return Err(TcaError::DimensionMismatch {
                expected: self.m,
                actual: perm.len(),
            });
        }
        Self::new(self.m, self.edges.iter().map(|&(u, v)| (perm[u], perm[v])))
    }

    /// Sum of `weights[u][v]` over tree edges.
    pub fn weight(&self, weights: &WeightMatrix) -> f64 {
        self.edges.iter().map(|&(u, v)| weights.get(u, v)).sum()
    }

    /// Vertices reachable from `start` without entering `blocked`.
    pub(crate) fn component_avoiding(&self, start: usize, blocked: &[bool]) -> Vec<usize> {
        let adj = self.adjacency();
        let mut seen = vec![false; self.m];
        let mut out = Vec::new();
        let mut queue = VecDeque::from([start]);
        seen[start] = true;
        while let Some(u) = queue.pop_front() {
            out.push(u);
            for &v in &adj[u] {
                if !seen[v] && !blocked[v] {
                    seen[v] = true;
                    queue.push_back(v);
                }
            }
        }
        out.sort_unstable();
        out
    }

    /// True when `vertices` induce a connected subgraph.
    pub fn is_connected_subset(&self, vertices: &[usize]) -> bool {
        if vertices.is_empty() {
            return false;
        }
        let mut blocked = vec![true; self.m];
        for &v in vertices {
            if v >= self.m {
                return false;
            }
            blocked[v] = false;
        }
        let reach = self.component_avoiding(vertices[0], &blocked);
        let mut want: Vec<usize> = vertices.to_vec();
        want.sort_unstable();
        want.dedup();
        reach == want
    }
}

/// Symmetric table of pairwise weights; the diagonal is ignored.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMatrix {
    w: DMatrix<f64>,
}

impl WeightMatrix {
    pub fn new(w: DMatrix<f64>) -> Result<Self> {
        if !w.is_square() {
            return Err(TcaError::DimensionMismatch {
                expected: w.nrows(),
                actual: w.ncols(),
            });
        }
        let m = w.nrows();
        for u in 0..m {
            for v in 0..u {
                let (a, b) = (w[(u, v)], w[(v, u)]);
                if !a.is_finite() || !b.is_finite() {
                    return Err(TcaError::InvalidData(format!("non-finite weight at ({u}, {v})")));
                }
                if a != b {
                    return Err(TcaError::InvalidData(format!("weights not symmetric at ({u}, {v})")));
                }
            }
        }
        Ok(Self { w })
    }

    /// Builds a symmetric matrix from `f(u, v)` evaluated for `u < v`.
    pub fn from_fn(m: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let mut w = DMatrix::zeros(m, m);
        for u in 0..m {
            for v in (u + 1)..m {
                let x = f(u, v);
                w[(u, v)] = x;
                w[(v, u)] = x;
            }
        }
        Self::new(w)
    }

    pub fn m(&self) -> usize {
        self.w.nrows()
    }

    pub fn get(&self, u: usize, v: usize) -> f64 {
        self.w[(u, v)]
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.w
    }
}

/// Kruskal's algorithm on edges sorted by weight descending, ties broken by
/// ascending `(u, v)`. Negative weights are kept: the result always spans.
pub fn max_weight_spanning_tree(weights: &WeightMatrix) -> Result<SpanningTree> {
    let m = weights.m();
    if m < 2 {
        return Err(TcaError::InvalidTree(format!("need m >= 2, got {m}")));
    }
    let mut candidates: Vec<(f64, usize, usize)> = Vec::with_capacity(m * (m - 1) / 2);
    for u in 0..m {
        for v in (u + 1)..m {
            candidates.push((weights.get(u, v), u, v));
        }
    }
    candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then((a.1, a.2).cmp(&(b.1, b.2))));
    let mut dsu = DisjointSets::new(m);
    let mut edges = Vec::with_capacity(m - 1);
    for (_, u, v) in candidates {
        if dsu.union(u, v) {
            edges.push((u, v));
            if edges.len() == m - 1 {
                break;
            }
        }
    }
    SpanningTree::new(m, edges)
}

/// `I^T = I(x_1, ..., x_m) - sum over tree edges of I(x_u, x_v)`.
pub fn t_mutual_information_decomposition(
    total_mi: f64,
    weights: &WeightMatrix,
    tree: &SpanningTree,
) -> f64 {
    total_mi - tree.weight(weights)
}

/// All `m^(m-2)` labeled spanning trees, decoded from Prüfer sequences.
pub fn enumerate_spanning_trees(m: usize) -> Vec<SpanningTree> {
    match m {
        0 => Vec::new(),
        1 => vec![SpanningTree::new(1, []).unwrap()],
        2 => vec![SpanningTree::new(2, [(0, 1)]).unwrap()],
        _ => {
            let len = m - 2;
            let total = m.pow(len as u32);
            let mut seq = vec![0usize; len];
            (0..total)
                .map(|mut code| {
                    for s in seq.iter_mut() {
                        *s = code % m;
                        code /= m;
                    }
                    prufer_decode(m, &seq)
                })
                .collect()
        }
    }
}

/// Decodes a Prüfer sequence of length `m - 2` into its labeled tree.
pub fn prufer_decode(m: usize, seq: &[usize]) -> SpanningTree {
    debug_assert_eq!(seq.len() + 2, m);
    let mut degree = vec![1usize; m];
    for &s in seq {
        degree[s] += 1;
    }
    let mut edges = Vec::with_capacity(m - 1);
    for &s in seq {
        let leaf = (0..m).find(|&v| degree[v] == 1).expect("a leaf always exists");
        edges.push((leaf, s));
        degree[leaf] -= 1;
        degree[s] -= 1;
    }
    let rest: Vec<usize> = (0..m).filter(|&v| degree[v] == 1).collect();
    edges.push((rest[0], rest[1]));
    SpanningTree::new(m, edges).expect("Prüfer decoding yields a tree")
}

pub(crate) struct DisjointSets {
    parent: Vec<usize>,
    rank: Vec<u8>,
}

impl DisjointSets {
    pub(crate) fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
            rank: vec![0; n],
        }
    }

    pub(crate) fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    /// Merges the sets of `a` and `b`; false if they were already joined.
    pub(crate) fn union(&mut self, a: usize, b: usize) -> bool {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        match self.rank[ra].cmp(&self.rank[rb]) {
            std::cmp::Ordering::Less => self.parent[ra] = rb,
            std::cmp::Ordering::Greater => self.parent[rb] = ra,
            std::cmp::Ordering::Equal => {
                self.parent[rb] = ra;
                self.rank[ra] += 1;
            }
        }
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Independent oracle: every (m-1)-subset of the complete graph's edges
    /// that is acyclic is a spanning tree.
    fn brute_force_best(weights: &WeightMatrix) -> (f64, usize) {
        let m = weights.m();
        let all: Vec<(usize, usize)> =
            (0..m).flat_map(|u| ((u + 1)..m).map(move |v| (u, v))).collect();
        let mut best = f64::NEG_INFINITY;
        let mut count = 0;
        for mask in 0u32..(1 << all.len()) {
            if mask.count_ones() as usize != m - 1 {
                continue;
            }
            let chosen: Vec<_> = (0..all.len()).filter(|i| mask >> i & 1 == 1).map(|i| all[i]).collect();
            let mut parent: Vec<usize> = (0..m).collect();
            fn root(p: &mut Vec<usize>, x: usize) -> usize {
                if p[x] == x { x } else { let r = root(p, p[x]); p[x] = r; r }
            }
            let acyclic = chosen.iter().all(|&(u, v)| {
                let (a, b) = (root(&mut parent, u), root(&mut parent, v));
                parent[a] = b;
                a != b
            });
            if acyclic {
                count += 1;
                best = best.max(chosen.iter().map(|&(u, v)| weights.get(u, v)).sum());
            }
        }
        (best, count)
    }

    #[test]
    fn two_vertices_single_edge() {
        let w = WeightMatrix::from_fn(2, |_, _| -3.0).unwrap();
        assert_eq!(max_weight_spanning_tree(&w).unwrap().edges(), &[(0, 1)]);
    }

    #[test]
    fn three_vertex_example() {
        let w = WeightMatrix::from_fn(3, |u, v| match (u, v) {
            (0, 1) => 0.5,
            (0, 2) => 0.2,
            _ => 0.4,
        })
        .unwrap();
        let t = max_weight_spanning_tree(&w).unwrap();
        assert_eq!(t.edges(), &[(0, 1), (1, 2)]);
        assert!((t.weight(&w) - 0.9).abs() < 1e-15);
        assert_eq!(brute_force_best(&w), (t.weight(&w), 3));
    }

    #[test]
    fn matches_enumeration_for_m5() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let w = WeightMatrix::from_fn(5, |_, _| rng.gen_range(-1.0..1.0)).unwrap();
            let (best, count) = brute_force_best(&w);
            assert_eq!(count, 125);
            assert_eq!(max_weight_spanning_tree(&w).unwrap().weight(&w), best);
        }
    }

    #[test]
    fn prufer_enumeration_is_complete() {
        for m in 2..=6 {
            let trees = enumerate_spanning_trees(m);
            let mut set = trees.clone();
            set.sort_by(|a, b| a.edges().cmp(b.edges()));
            set.dedup();
            assert_eq!(set.len(), m.pow(m as u32 - 2));
            assert_eq!(trees.len(), set.len());
        }
    }

    #[test]
    fn t_mi_decomposition_values() {
        let zero = WeightMatrix::from_fn(4, |_, _| 0.0).unwrap();
        let chain = SpanningTree::chain(4);
        assert_eq!(t_mutual_information_decomposition(0.0, &zero, &chain), 0.0);
        let w = WeightMatrix::from_fn(3, |u, v| if (u, v) == (0, 1) { 0.4 } else { 0.3 }).unwrap();
        let t = SpanningTree::new(3, [(0, 1), (1, 2)]).unwrap();
        assert!((t_mutual_information_decomposition(1.0, &w, &t) - 0.3).abs() < 1e-15);
    }

    #[test]
    fn chow_liu_minimizes_t_mi_exhaustively() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..20 {
            let w = WeightMatrix::from_fn(4, |_, _| rng.gen_range(0.0..1.0)).unwrap();
            let best = max_weight_spanning_tree(&w).unwrap();
            let v = t_mutual_information_decomposition(2.0, &w, &best);
            for t in enumerate_spanning_trees(4) {
                assert!(v <= t_mutual_information_decomposition(2.0, &w, &t));
            }
        }
    }

    #[test]
    fn invalid_trees_rejected() {
        assert!(SpanningTree::new(3, [(0, 1)]).is_err());
        assert!(SpanningTree::new(4, [(0, 1), (1, 2), (0, 2)]).is_err());
        assert!(SpanningTree::new(3, [(0, 3), (1, 2)]).is_err());
        assert!(SpanningTree::new(3, [(1, 1), (1, 2)]).is_err());
    }

    #[test]
    fn degrees_and_leaves() {
        let t = SpanningTree::star(5, 2).unwrap();
        assert_eq!(t.degrees(), &[1, 1, 4, 1, 1]);
        assert_eq!(t.leaves(), vec![0, 1, 3, 4]);
        assert!(t.is_connected_subset(&[2, 4]));
        assert!(!t.is_connected_subset(&[0, 4]));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn weights(m: usize) -> impl Strategy<Value = WeightMatrix> {
            proptest::collection::vec(-1.0f64..1.0, m * (m - 1) / 2).prop_map(move |v| {
                let mut it = v.into_iter();
                WeightMatrix::from_fn(m, |_, _| it.next().unwrap()).unwrap()
            })
        }

        proptest! {
            #[test]
            fn output_is_spanning_tree(w in weights(7)) {
                let t = max_weight_spanning_tree(&w).unwrap();
                prop_assert_eq!(t.edges().len(), 6);
                prop_assert!(t.is_connected_subset(&(0..7).collect::<Vec<_>>()));
            }

            #[test]
            fn constant_shift_keeps_tree(w in weights(6), c in -5.0f64..5.0) {
                let shifted = WeightMatrix::from_fn(6, |u, v| w.get(u, v) + c).unwrap();
                let a = max_weight_spanning_tree(&w).unwrap();
                let b = max_weight_spanning_tree(&shifted).unwrap();
                prop_assert_eq!(&a, &b);
            }

            #[test]
            fn relabeling_commutes(w in weights(6), perm in Just((0..6).collect::<Vec<usize>>()).prop_shuffle()) {
                // perm maps old vertex -> new vertex
                let mut inv = vec![0; 6];
                for (old, &new) in perm.iter().enumerate() { inv[new] = old; }
                let relabeled = WeightMatrix::from_fn(6, |a, b| w.get(inv[a], inv[b])).unwrap();
                let a = max_weight_spanning_tree(&w).unwrap().relabel(&perm).unwrap();
                let b = max_weight_spanning_tree(&relabeled).unwrap();
                prop_assert_eq!(a, b);
            }
        }
    }
}
