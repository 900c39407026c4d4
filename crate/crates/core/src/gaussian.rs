//! Closed-form Gaussian quantities: Gaussian mutual informations, the
//! T-mutual information of a covariance, tree-structured covariances and
//! the demixing matrices that map a covariance onto one of them.

use nalgebra::DMatrix;
use rand::Rng;

use crate::data::{CovarianceMatrix, DemixingMatrix};
use crate::error::{Result, TcaError};
use crate::linalg::{check_spd, spd_log_det, spd_sqrt};
use crate::tree::{SpanningTree, WeightMatrix};

/// Default magnitude range of sampled edge correlations.
pub const DEFAULT_CORRELATION_RANGE: (f64, f64) = (0.3, 0.9);

/// SPD matrix whose precision matrix vanishes off the tree edges.
#[derive(Debug, Clone, PartialEq)]
pub struct TreeStructuredCovariance {
    c: DMatrix<f64>,
    tree: SpanningTree,
}

impl TreeStructuredCovariance {
    /// Checks SPD and that off-tree precision entries are zero relative to
    /// the largest precision entry.
    pub fn new(c: DMatrix<f64>, tree: SpanningTree) -> Result<Self> {
        if c.nrows() != tree.m() {
            return Err(TcaError::DimensionMismatch {
                expected: tree.m(),
                actual: c.nrows(),
            });
        }
        check_spd(&c)?;
        let precision = c.clone().try_inverse().ok_or(TcaError::NotSpd)?;
        let scale = precision.amax();
        for u in 0..tree.m() {
            for v in (u + 1)..tree.m() {
                if !tree.has_edge(u, v) && precision[(u, v)].abs() > 1e-8 * scale {
                    return Err(TcaError::InvalidTree(format!(
                        "precision entry ({u}, {v}) = {} is not zero off the tree",
                        precision[(u, v)]
                    )));
                }
            }
        }
        Ok(Self { c, tree })
    }

    /// Unit-diagonal covariance of the linear-Gaussian tree model whose
    /// edge `tree.edges()[k]` has correlation `rho[k]`: every entry is the
    /// product of correlations along the tree path.
    pub fn from_edge_correlations(tree: &SpanningTree, rho: &[f64]) -> Result<Self> {
        if rho.len() != tree.edges().len() {
            return Err(TcaError::DimensionMismatch {
                expected: tree.edges().len(),
                actual: rho.len(),
            });
        }
        if let Some(r) = rho.iter().find(|r| !(r.abs() < 1.0)) {
            return Err(TcaError::InvalidConfig(format!("edge correlation {r} outside (-1, 1)")));
        }
        let m = tree.m();
        let mut weight = DMatrix::zeros(m, m);
        for (&(u, v), &r) in tree.edges().iter().zip(rho) {
            weight[(u, v)] = r;
            weight[(v, u)] = r;
        }
        let adj = tree.adjacency();
        let mut c = DMatrix::identity(m, m);
        for root in 0..m {
            let mut stack = vec![(root, usize::MAX, 1.0)];
            while let Some((u, parent, prod)) = stack.pop() {
                c[(root, u)] = prod;
                for &v in &adj[u] {
                    if v != parent {
                        stack.push((v, u, prod * weight[(u, v)]));
                    }
                }
            }
        }
        Ok(Self { c, tree: tree.clone() })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.c
    }

    pub fn tree(&self) -> &SpanningTree {
        &self.tree
    }
}

/// `I^G(Σ) = -1/2 log(det Σ / prod Σ_ii)`.
pub fn gaussian_total_mi(sigma: &DMatrix<f64>) -> Result<f64> {
    check_spd(sigma)?;
    let log_diag: f64 = sigma.diagonal().iter().map(|d| d.ln()).sum();
    Ok((-0.5 * (spd_log_det(sigma)? - log_diag)).max(0.0))
}

/// `I^G_uv(Σ) = -1/2 log(1 - ρ_uv^2)`.
pub fn gaussian_pairwise_mi(sigma: &DMatrix<f64>, u: usize, v: usize) -> Result<f64> {
    check_spd(sigma)?;
    let m = sigma.nrows();
    for x in [u, v] {
        if x >= m {
            return Err(TcaError::InvalidVertex { vertex: x, m });
        }
    }
    if u == v {
        return Err(TcaError::InvalidVertex { vertex: v, m });
    }
    Ok(pair_mi_unchecked(sigma, u, v))
}

fn pair_mi_unchecked(sigma: &DMatrix<f64>, u: usize, v: usize) -> f64 {
    let (a, b, c) = (sigma[(u, u)], sigma[(v, v)], sigma[(u, v)]);
    (-0.5 * ((a * b - c * c) / (a * b)).ln()).max(0.0)
}

/// Pairwise Gaussian mutual informations of all pairs.
pub fn gaussian_pairwise_weights(sigma: &DMatrix<f64>) -> Result<WeightMatrix> {
    check_spd(sigma)?;
    WeightMatrix::from_fn(sigma.nrows(), |u, v| pair_mi_unchecked(sigma, u, v))
}

/// `I^T(Σ) = I^G(Σ) - sum over tree edges of I^G_uv(Σ)`.
pub fn gaussian_t_mi(sigma: &DMatrix<f64>, tree: &SpanningTree) -> Result<f64> {
    if sigma.nrows() != tree.m() {
        return Err(TcaError::DimensionMismatch {
            expected: tree.m(),
            actual: sigma.nrows(),
        });
    }
    let total = gaussian_total_mi(sigma)?;
    let edges: f64 = tree.edges().iter().map(|&(u, v)| pair_mi_unchecked(sigma, u, v)).sum();
    Ok(total - edges)
}

/// Random unit-variance covariance that factorizes in `tree`; edge
/// correlation magnitudes are uniform in `range` with random signs.
pub fn sample_tree_covariance<R: Rng + ?Sized>(
    tree: &SpanningTree,
    rng: &mut R,
    range: (f64, f64),
) -> Result<TreeStructuredCovariance> {
    let (lo, hi) = range;
    if !(0.0 <= lo && lo <= hi && hi < 1.0) {
        return Err(TcaError::InvalidConfig(format!("correlation range {range:?} not within [0, 1)")));
    }
    let rho: Vec<f64> = tree
        .edges()
        .iter()
        .map(|_| {
            let mag = if hi > lo { rng.gen_range(lo..hi) } else { lo };
            if rng.gen_bool(0.5) {
                mag
            } else {
                -mag
            }
        })
        .collect();
    TreeStructuredCovariance::from_edge_correlations(tree, &rho)
}

/// `W = C^{1/2} R Σ^{-1/2}`, so that `W Σ W^T = C`.
pub fn tree_covariance_demixing(
    sigma: &CovarianceMatrix,
    c: &TreeStructuredCovariance,
    rotation: &DMatrix<f64>,
) -> Result<DemixingMatrix> {
    let m = sigma.dim();
    if c.matrix().nrows() != m || rotation.nrows() != m || rotation.ncols() != m {
        return Err(TcaError::DimensionMismatch {
            expected: m,
            actual: rotation.nrows(),
        });
    }
    let deviation = (rotation.transpose() * rotation - DMatrix::identity(m, m)).amax();
    if deviation > 1e-10 {
        return Err(TcaError::NotOrthogonal { deviation });
    }
    let w = spd_sqrt(c.matrix())? * rotation * sigma.inv_sqrt();
    // rows have norm sqrt(C_ii) under Σ; rescale to unit norm
    let scaled = DMatrix::from_fn(m, m, |i, j| w[(i, j)] / c.matrix()[(i, i)].sqrt());
    DemixingMatrix::new(scaled)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::nearest_orthogonal;
    use crate::tree::{enumerate_spanning_trees, max_weight_spanning_tree};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn random_rotation(m: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        nearest_orthogonal(&DMatrix::from_fn(m, m, |_, _| -> f64 { StandardNormal.sample(rng) }))
    }

    fn random_spd(m: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        let a = DMatrix::from_fn(m, m, |_, _| -> f64 { StandardNormal.sample(rng) });
        &a * a.transpose() + DMatrix::identity(m, m) * 0.5
    }

    #[test]
    fn total_and_pairwise_values() {
        let s = DMatrix::from_row_slice(2, 2, &[1.0, 0.6, 0.6, 1.0]);
        let expected = -0.5 * (1.0f64 - 0.36).ln();
        assert!((gaussian_total_mi(&s).unwrap() - 0.22314).abs() < 1e-5);
        assert!((gaussian_pairwise_mi(&s, 0, 1).unwrap() - expected).abs() < 1e-12);
        assert!((gaussian_total_mi(&s).unwrap() - gaussian_pairwise_mi(&s, 1, 0).unwrap()).abs() < 1e-12);
        assert_eq!(gaussian_total_mi(&DMatrix::identity(3, 3)).unwrap(), 0.0);
        assert!(matches!(gaussian_total_mi(&DMatrix::zeros(2, 2)), Err(TcaError::NotSpd)));
    }

    #[test]
    fn diagonal_rescaling_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = random_spd(4, &mut rng);
        let d = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![0.3, 2.0, 5.0, 0.7]));
        let scaled = &d * &s * &d;
        assert!((gaussian_total_mi(&s).unwrap() - gaussian_total_mi(&scaled).unwrap()).abs() < 1e-10);
    }

    #[test]
    fn path_product_rule() {
        let chain = SpanningTree::chain(3);
        let c = TreeStructuredCovariance::from_edge_correlations(&chain, &[0.5, 0.5]).unwrap();
        assert!((c.matrix()[(0, 2)] - 0.25).abs() < 1e-15);
        // 3x3 inversion: precision (0, 2) vanishes
        let p = c.matrix().clone().try_inverse().unwrap();
        assert!(p[(0, 2)].abs() < 1e-12);
    }

    #[test]
    fn ar1_chain_versus_star() {
        let rho: f64 = 0.7;
        let m = 5;
        let s = DMatrix::from_fn(m, m, |i, j| rho.powi((i as i32 - j as i32).abs()));
        assert!(gaussian_t_mi(&s, &SpanningTree::chain(m)).unwrap().abs() < 1e-8);
        assert!(gaussian_t_mi(&s, &SpanningTree::star(m, 0).unwrap()).unwrap() > 1e-3);
    }

    #[test]
    fn sampled_covariance_identifies_its_tree() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for truth in enumerate_spanning_trees(4) {
            let c = sample_tree_covariance(&truth, &mut rng, DEFAULT_CORRELATION_RANGE).unwrap();
            TreeStructuredCovariance::new(c.matrix().clone(), truth.clone()).unwrap();
            assert!(gaussian_t_mi(c.matrix(), &truth).unwrap().abs() < 1e-8);
            for other in enumerate_spanning_trees(4) {
                if other != truth {
                    assert!(gaussian_t_mi(c.matrix(), &other).unwrap() > 1e-6);
                }
            }
        }
    }

    #[test]
    fn off_tree_precision_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = random_spd(3, &mut rng);
        assert!(TreeStructuredCovariance::new(s, SpanningTree::chain(3)).is_err());
    }

    #[test]
    fn whitening_special_case() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let sigma = CovarianceMatrix::from_sigma(random_spd(3, &mut rng)).unwrap();
        let c = TreeStructuredCovariance::from_edge_correlations(&SpanningTree::chain(3), &[0.0, 0.0]).unwrap();
        let w = tree_covariance_demixing(&sigma, &c, &DMatrix::identity(3, 3)).unwrap();
        assert!((w.matrix() - sigma.inv_sqrt()).amax() < 1e-12);
    }

    #[test]
    fn demixing_reaches_target_covariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for m in 2..=5 {
            let sigma = CovarianceMatrix::from_sigma(random_spd(m, &mut rng)).unwrap();
            let tree = crate::tree::prufer_decode(m, &(0..m.saturating_sub(2)).map(|_| rng.gen_range(0..m)).collect::<Vec<_>>());
            let c = sample_tree_covariance(&tree, &mut rng, DEFAULT_CORRELATION_RANGE).unwrap();
            let r1 = random_rotation(m, &mut rng);
            let r2 = random_rotation(m, &mut rng);
            let w1 = tree_covariance_demixing(&sigma, &c, &r1).unwrap();
            let w2 = tree_covariance_demixing(&sigma, &c, &r2).unwrap();
            let s1 = w1.matrix() * sigma.sigma() * w1.matrix().transpose();
            let s2 = w2.matrix() * sigma.sigma() * w2.matrix().transpose();
            assert!((&s1 - c.matrix()).amax() < 1e-8);
            assert!((&s2 - c.matrix()).amax() < 1e-8);
            assert!((w1.matrix() - w2.matrix()).amax() > 1e-3);
            assert!(gaussian_t_mi(&s1, &tree).unwrap().abs() < 1e-8);
        }
    }

    #[test]
    fn non_orthogonal_rotation_rejected() {
        let sigma = CovarianceMatrix::from_sigma(DMatrix::identity(2, 2)).unwrap();
        let c = TreeStructuredCovariance::from_edge_correlations(&SpanningTree::chain(2), &[0.5]).unwrap();
        let r = DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 1.0]);
        assert!(matches!(tree_covariance_demixing(&sigma, &c, &r), Err(TcaError::NotOrthogonal { .. })));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use rand::Rng;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]
            #[test]
            fn chow_liu_tree_minimizes_t_mi(seed in any::<u64>(), m in 2usize..=5) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let s = random_spd(m, &mut rng);
                let best = max_weight_spanning_tree(&gaussian_pairwise_weights(&s).unwrap()).unwrap();
                let v = gaussian_t_mi(&s, &best).unwrap();
                for t in enumerate_spanning_trees(m) {
                    prop_assert!(v <= gaussian_t_mi(&s, &t).unwrap() + 1e-12);
                }
            }

            #[test]
            fn sampled_covariances_are_spd_and_tree_structured(seed in any::<u64>(), m in 2usize..=7) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let seq: Vec<usize> = (0..m - 2).map(|_| rng.gen_range(0..m)).collect();
                let tree = crate::tree::prufer_decode(m, &seq);
                let c = sample_tree_covariance(&tree, &mut rng, DEFAULT_CORRELATION_RANGE).unwrap();
                prop_assert!(c.matrix().clone().cholesky().is_some());
                prop_assert!(TreeStructuredCovariance::new(c.matrix().clone(), tree.clone()).is_ok());
                prop_assert!(gaussian_t_mi(c.matrix(), &tree).unwrap().abs() < 1e-8);
            }
        }
    }
}
