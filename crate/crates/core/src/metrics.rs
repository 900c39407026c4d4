//! Evaluation measures: Amari distance between demixing matrices after
//! leaf normalization, and the tree error from the largest common
//! connected subtree.

use nalgebra::DMatrix;
use pathfinding::kuhn_munkres::kuhn_munkres;
use pathfinding::matrix::Matrix;
use serde::{Deserialize, Serialize};

use crate::data::{CovarianceMatrix, DemixingMatrix};
use crate::error::{Result, TcaError};
use crate::tree::SpanningTree;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// Amari distance after leaf normalization, in `[0, 100]`.
    pub e_w: f64,
    /// `1 - (s_t - 1) / (m - 1)`.
    pub e_t: f64,
    /// Size of the largest common connected subtree.
    pub s_t: usize,
}

/// How vertices of the two trees may be matched.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum TreeMatchMode {
    /// Structure only: subtrees are compared up to isomorphism.
    #[default]
    Unlabeled,
    /// Vertex identities must agree: the largest connected set of shared edges.
    Labeled,
}

/// Amari distance of `A = w_hat w_true^{-1}`, scaled to `[0, 100]`.
pub fn amari_distance(w_hat: &DMatrix<f64>, w_true: &DMatrix<f64>) -> Result<f64> {
    let m = w_true.nrows();
    if w_hat.shape() != w_true.shape() || !w_true.is_square() {
        return Err(TcaError::DimensionMismatch {
            expected: m,
            actual: w_hat.nrows(),
        });
    }
    if m < 2 || w_hat == w_true {
        return Ok(0.0);
    }
    for w in [w_hat, w_true] {
        let det = w.determinant();
        if !(det.abs() > 1e-300) || !det.is_finite() {
            return Err(TcaError::SingularMatrix { det });
        }
    }
    let inv = w_true
        .clone()
        .try_inverse()
        .ok_or(TcaError::SingularMatrix { det: 0.0 })?;
    let a = (w_hat * inv).abs();
    let rows: f64 = a.row_iter().map(|r| r.sum() / r.max()).sum();
    let cols: f64 = a.column_iter().map(|c| c.sum() / c.max()).sum();
    let mf = m as f64;
    let d = 100.0 / (2.0 * mf * (mf - 1.0)) * (rows + cols - 2.0 * mf);
    Ok(d.clamp(0.0, 100.0))
}

/// Removes from every leaf row its regression on the parent row under
/// `sigma`, then rescales the row to unit variance. Leaves are processed
/// once in ascending order; other rows are untouched.
pub fn leaf_normalize(
    w: &DemixingMatrix,
    tree: &SpanningTree,
    sigma: &CovarianceMatrix,
) -> Result<DemixingMatrix> {
    let m = w.dim();
    if tree.m() != m || sigma.dim() != m {
        return Err(TcaError::DimensionMismatch {
            expected: m,
            actual: tree.m(),
        });
    }
    let s = sigma.sigma();
    let mut out = w.matrix().clone();
    for c in tree.leaves() {
        let p = tree.neighbors(c)[0];
        let rc = out.row(c).transpose();
        let rp = out.row(p).transpose();
        let var_p = (rp.transpose() * s * &rp)[(0, 0)];
        let cov = (rc.transpose() * s * &rp)[(0, 0)];
        let resid = &rc - &rp * (cov / var_p);
        let var = (resid.transpose() * s * &resid)[(0, 0)];
        if !(var > 0.0) {
            return Err(TcaError::SingularMatrix { det: 0.0 });
        }
        out.set_row(c, &(resid / var.sqrt()).transpose());
    }
    DemixingMatrix::new(out)
}

/// Demixing error: Amari distance between the leaf-normalized estimates.
pub fn e_w(
    w_hat: &DemixingMatrix,
    tree_hat: &SpanningTree,
    w_true: &DemixingMatrix,
    tree_true: &SpanningTree,
    sigma: &CovarianceMatrix,
) -> Result<f64> {
    let a = leaf_normalize(w_hat, tree_hat, sigma)?;
    let b = leaf_normalize(w_true, tree_true, sigma)?;
    amari_distance(a.matrix(), b.matrix())
}

/// Largest common connected subtree size `s_t` and `e_t`.
pub fn tree_error(t1: &SpanningTree, t2: &SpanningTree) -> Result<(usize, f64)> {
    tree_error_with(t1, t2, TreeMatchMode::Unlabeled)
}

pub fn tree_error_with(t1: &SpanningTree, t2: &SpanningTree, mode: TreeMatchMode) -> Result<(usize, f64)> {
    let m = t1.m();
    if t2.m() != m {
        return Err(TcaError::DimensionMismatch {
            expected: m,
            actual: t2.m(),
        });
    }
    let s = match mode {
        TreeMatchMode::Unlabeled => CommonSubtree::new(t1, t2).solve(),
        TreeMatchMode::Labeled => largest_shared_component(t1, t2),
    };
    let e = if m > 1 {
        1.0 - (s as f64 - 1.0) / (m as f64 - 1.0)
    } else {
        0.0
    };
    Ok((s, e))
}

fn largest_shared_component(t1: &SpanningTree, t2: &SpanningTree) -> usize {
    let mut sets = crate::tree::DisjointSets::new(t1.m());
    for &(u, v) in t1.edges() {
        if t2.has_edge(u, v) {
            sets.union(u, v);
        }
    }
    let mut counts = vec![0usize; t1.m()];
    for v in 0..t1.m() {
        counts[sets.find(v)] += 1;
    }
    counts.into_iter().max().unwrap_or(0)
}

/// Rooted-pair dynamic program: `best(u | pu, v | pv)` is the largest
/// common subtree containing `u` mapped to `v`, restricted to the side of
/// `u` away from `pu` (and of `v` away from `pv`). Children are paired by
/// maximum-weight bipartite matching.
struct CommonSubtree {
    adj1: Vec<Vec<usize>>,
    adj2: Vec<Vec<usize>>,
    m: usize,
    memo: Vec<Option<usize>>,
}

impl CommonSubtree {
    fn new(t1: &SpanningTree, t2: &SpanningTree) -> Self {
        let m = t1.m();
        Self {
            adj1: t1.adjacency(),
            adj2: t2.adjacency(),
            m,
            memo: vec![None; m * (m + 1) * m * (m + 1)],
        }
    }

    fn solve(&mut self) -> usize {
        let m = self.m;
        let mut best = 1.min(m);
        for u in 0..m {
            for v in 0..m {
                best = best.max(self.best(u, m, v, m));
            }
        }
        best
    }

    // parent index `m` means "no parent"
    fn best(&mut self, u: usize, pu: usize, v: usize, pv: usize) -> usize {
        let m = self.m;
        let key = ((u * (m + 1) + pu) * m + v) * (m + 1) + pv;
        if let Some(s) = self.memo[key] {
            return s;
        }
        let cu: Vec<usize> = self.adj1[u].iter().copied().filter(|&x| x != pu).collect();
        let cv: Vec<usize> = self.adj2[v].iter().copied().filter(|&x| x != pv).collect();
        let mut s = 1;
        if !cu.is_empty() && !cv.is_empty() {
            let mut weights = vec![vec![0i64; cv.len()]; cu.len()];
            for (i, &a) in cu.iter().enumerate() {
                for (j, &b) in cv.iter().enumerate() {
                    weights[i][j] = self.best(a, u, b, v) as i64;
                }
            }
            s += max_weight_matching(&weights) as usize;
        }
        self.memo[key] = Some(s);
        s
    }
}

fn max_weight_matching(weights: &[Vec<i64>]) -> i64 {
    let rows = weights.len();
    let cols = weights[0].len();
    // kuhn_munkres needs rows <= columns
    let (r, c, get): (usize, usize, Box<dyn Fn(usize, usize) -> i64>) = if rows <= cols {
        (rows, cols, Box::new(|i, j| weights[i][j]))
    } else {
        (cols, rows, Box::new(|i, j| weights[j][i]))
    };
    let matrix = Matrix::from_fn(r, c, |(i, j)| get(i, j));
    kuhn_munkres(&matrix).0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tree::prufer_decode;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn random_tree(m: usize, rng: &mut ChaCha8Rng) -> SpanningTree {
        let seq: Vec<usize> = (0..m.saturating_sub(2)).map(|_| rng.gen_range(0..m)).collect();
        prufer_decode(m, &seq)
    }

    fn random_matrix(m: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        DMatrix::from_fn(m, m, |_, _| -> f64 { StandardNormal.sample(rng) })
    }

    /// Largest common connected subtree by enumerating connected vertex
    /// subsets of both trees and trying every bijection.
    fn brute_force_common(t1: &SpanningTree, t2: &SpanningTree) -> usize {
        let m = t1.m();
        let subsets = |t: &SpanningTree| -> Vec<Vec<usize>> {
            (1u32..(1 << m))
                .map(|mask| (0..m).filter(|&v| mask & (1 << v) != 0).collect::<Vec<_>>())
                .filter(|s| t.is_connected_subset(s))
                .collect()
        };
        let s1 = subsets(t1);
        let s2 = subsets(t2);
        for size in (1..=m).rev() {
            for a in s1.iter().filter(|s| s.len() == size) {
                for b in s2.iter().filter(|s| s.len() == size) {
                    if isomorphic(t1, a, t2, b) {
                        return size;
                    }
                }
            }
        }
        0
    }

    fn isomorphic(t1: &SpanningTree, a: &[usize], t2: &SpanningTree, b: &[usize]) -> bool {
        let mut perm: Vec<usize> = (0..b.len()).collect();
        loop {
            let ok = t1.edges().iter().filter(|(u, v)| a.contains(u) && a.contains(v)).all(|(u, v)| {
                let iu = a.iter().position(|x| x == u).unwrap();
                let iv = a.iter().position(|x| x == v).unwrap();
                t2.has_edge(b[perm[iu]], b[perm[iv]])
            });
            if ok {
                return true;
            }
            // next permutation
            let n = perm.len();
            let Some(i) = (1..n).rev().find(|&i| perm[i - 1] < perm[i]) else {
                return false;
            };
            let j = (i..n).rev().find(|&j| perm[j] > perm[i - 1]).unwrap();
            perm.swap(i - 1, j);
            perm[i..].reverse();
        }
    }

    #[test]
    fn amari_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = random_matrix(4, &mut rng);
        assert_eq!(amari_distance(&w, &w).unwrap(), 0.0);
        let p = DMatrix::from_row_slice(4, 4, &[0., 1., 0., 0., 0., 0., 0., 1., 1., 0., 0., 0., 0., 0., 1., 0.]);
        let d = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![2.0, -0.5, 3.0, 0.1]));
        assert!(amari_distance(&(p * d * &w), &w).unwrap() < 1e-10);
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0]);
        assert!((amari_distance(&a, &DMatrix::identity(2, 2)).unwrap() - 50.0).abs() < 1e-12);
        assert!(matches!(
            amari_distance(&DMatrix::zeros(2, 2), &a),
            Err(TcaError::SingularMatrix { .. })
        ));
    }

    #[test]
    fn random_demixing_is_far() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let sigma = CovarianceMatrix::from_sigma(DMatrix::identity(4, 4)).unwrap();
        let tree = SpanningTree::chain(4);
        let mut total = 0.0;
        for _ in 0..20 {
            let a = DemixingMatrix::new(random_matrix(4, &mut rng)).unwrap();
            let b = DemixingMatrix::new(random_matrix(4, &mut rng)).unwrap();
            total += e_w(&a, &tree, &b, &tree, &sigma).unwrap();
        }
        assert!(total / 20.0 > 20.0, "{}", total / 20.0);
    }

    fn sigma_and_w(rng: &mut ChaCha8Rng) -> (CovarianceMatrix, DemixingMatrix) {
        let a = random_matrix(3, rng);
        let sigma = CovarianceMatrix::from_sigma(&a * a.transpose() + DMatrix::identity(3, 3)).unwrap();
        let w = DemixingMatrix::new(random_matrix(3, rng)).unwrap();
        (sigma, w)
    }

    #[test]
    fn leaf_normalization_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (sigma, w) = sigma_and_w(&mut rng);
        let chain = SpanningTree::chain(3);
        let n = leaf_normalize(&w, &chain, &sigma).unwrap();
        let cov = n.matrix() * sigma.sigma() * n.matrix().transpose();
        for c in [0, 2] {
            assert!((cov[(c, c)] - 1.0).abs() < 1e-10);
            assert!(cov[(c, 1)].abs() < 1e-10);
        }
        assert_eq!(n.matrix().row(1), w.matrix().row(1));
        // fixed point
        let again = leaf_normalize(&n, &chain, &sigma).unwrap();
        assert!((again.matrix() - n.matrix()).amax() < 1e-12);
    }

    #[test]
    fn leaf_mixing_is_quotiented_out() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (sigma, w) = sigma_and_w(&mut rng);
        let chain = SpanningTree::chain(3);
        let base = leaf_normalize(&w, &chain, &sigma).unwrap();
        let mut mixed = base.matrix().clone();
        let r1 = mixed.row(1).clone_owned();
        let new2 = mixed.row(2) + r1 * 0.5;
        mixed.set_row(2, &new2);
        let mixed = DemixingMatrix::new(mixed).unwrap();
        let recovered = leaf_normalize(&mixed, &chain, &sigma).unwrap();
        let pair = |m: &DMatrix<f64>| DMatrix::from_fn(1, 3, |_, j| m[(2, j)]);
        let ratio: Vec<f64> = (0..3).map(|j| pair(recovered.matrix())[(0, j)] / pair(base.matrix())[(0, j)]).collect();
        assert!(ratio.iter().all(|r| (r.abs() - ratio[0].abs()).abs() < 1e-10));
        assert!(e_w(&mixed, &chain, &w, &chain, &sigma).unwrap() < 1e-8);
        assert!(e_w(&w, &chain, &w, &chain, &sigma).unwrap() == 0.0);
    }

    #[test]
    fn tree_error_examples() {
        let path = SpanningTree::chain(4);
        let star = SpanningTree::star(4, 0).unwrap();
        assert_eq!(tree_error(&path, &path).unwrap(), (4, 0.0));
        let (s, e) = tree_error(&star, &path).unwrap();
        assert_eq!(s, 3);
        assert!((e - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(brute_force_common(&star, &path), 3);
    }

    #[test]
    fn labeled_mode_requires_shared_edges() {
        let a = SpanningTree::chain(4);
        let b = SpanningTree::new(4, [(0, 1), (1, 3), (2, 3)]).unwrap();
        assert_eq!(tree_error_with(&a, &b, TreeMatchMode::Labeled).unwrap().0, 2);
        assert_eq!(tree_error(&a, &b).unwrap().0, 4);
    }

    #[test]
    fn dp_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for m in 2..=7 {
            for _ in 0..15 {
                let a = random_tree(m, &mut rng);
                let b = random_tree(m, &mut rng);
                let (s, _) = tree_error(&a, &b).unwrap();
                assert_eq!(s, brute_force_common(&a, &b), "{:?} vs {:?}", a.edges(), b.edges());
            }
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use rand::seq::SliceRandom;

        proptest! {
            #[test]
            fn symmetric_and_relabel_invariant(seed in any::<u64>(), m in 2usize..=12) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let a = random_tree(m, &mut rng);
                let b = random_tree(m, &mut rng);
                let ab = tree_error(&a, &b).unwrap();
                prop_assert_eq!(ab, tree_error(&b, &a).unwrap());
                prop_assert!(ab.0 >= 2);
                let mut perm: Vec<usize> = (0..m).collect();
                perm.shuffle(&mut rng);
                prop_assert_eq!(ab, tree_error(&a.relabel(&perm).unwrap(), &b).unwrap());
            }

            #[test]
            fn amari_nonnegative(seed in any::<u64>(), m in 2usize..=6) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let a = random_matrix(m, &mut rng);
                let b = random_matrix(m, &mut rng);
                let d = amari_distance(&a, &b).unwrap();
                prop_assert!((0.0..=100.0).contains(&d));
            }
        }
    }
}
