//! Kernel generalized variance: low-rank Gram factors, the regularized
//! KGV mutual information, and the KGV tree contrast `J^K`.
//!
//! Each component gets a centered Gaussian-kernel Gram matrix, approximated
//! by an `N x r` factor. With `G_i = U_i S_i V_i^T`, the regularized
//! normalized cross blocks reduce to `Y_i^T Y_j` where
//! `Y_i = U_i diag(λ / (λ + κ))`, so every determinant is taken on a
//! `(Σ r_i) x (Σ r_i)` matrix with identity diagonal blocks.

use std::collections::HashMap;
use std::sync::Arc;

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cache::{Memo, RowKey};
use crate::contrast::Contrast;
use crate::data::{project_row, Dataset, DemixingMatrix};
use crate::error::{Result, TcaError};
use crate::linalg::floored_log_det;
use crate::tree::{SpanningTree, WeightMatrix};

/// Eigenvalue floor applied when the block matrix is numerically indefinite.
pub const EIGEN_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KgvConfig {
    /// Gaussian kernel width `σ` in `exp(-(x - y)^2 / 2σ^2)`.
    pub kernel_width: f64,
    /// Regularization `κ`; the diagonal blocks are `(K_i + κ' I)^2` with
    /// `κ'` given by [`KgvConfig::effective_kappa`].
    pub kappa: f64,
    #[serde(default)]
    pub kappa_scale: KappaScale,
    /// Incomplete Cholesky stops once the residual trace is below `η N`.
    pub cholesky_tol: f64,
}

impl Default for KgvConfig {
    fn default() -> Self {
        Self {
            kernel_width: 0.5,
            kappa: 1e-3,
            kappa_scale: KappaScale::PerSample,
            cholesky_tol: 1e-4,
        }
    }
}

/// How `κ` enters the regularized diagonal blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KappaScale {
    /// `κ' = N κ`, so regularization keeps pace with the Gram eigenvalues.
    #[default]
    PerSample,
    /// `κ' = κ`.
    Absolute,
}

impl KgvConfig {
    pub fn effective_kappa(&self, n: usize) -> f64 {
        match self.kappa_scale {
            KappaScale::PerSample => self.kappa * n as f64,
            KappaScale::Absolute => self.kappa,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("kernel width", self.kernel_width),
            ("kappa", self.kappa),
            ("cholesky tolerance", self.cholesky_tol),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(TcaError::InvalidConfig(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

/// Low-rank factor `G` with `G G^T ≈ H K H` (centered Gram matrix).
///
/// Columns are orthogonal and ordered by decreasing squared norm
/// (`eigenvalues`). `pivots` and `pivot_values` record the greedy pivot
/// sequence of the underlying incomplete Cholesky run, whose pivot values
/// are nonincreasing.
#[derive(Debug, Clone, PartialEq)]
pub struct CholeskyFactor {
    g: DMatrix<f64>,
    eigenvalues: Vec<f64>,
    pub pivots: Vec<usize>,
    pub pivot_values: Vec<f64>,
}

impl CholeskyFactor {
    pub fn g(&self) -> &DMatrix<f64> {
        &self.g
    }

    pub fn n(&self) -> usize {
        self.g.nrows()
    }

    pub fn rank(&self) -> usize {
        self.g.ncols()
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    /// `U diag(λ / (λ + κ))`, the regularized feature block.
    pub fn regularized_features(&self, kappa: f64) -> DMatrix<f64> {
        let mut y = self.g.clone();
        for (j, mut col) in y.column_iter_mut().enumerate() {
            let l = self.eigenvalues[j];
            col *= l.sqrt() / (l + kappa);
        }
        y
    }
}

fn gaussian_kernel(a: f64, b: f64, inv_two_sigma2: f64) -> f64 {
    let d = a - b;
    (-d * d * inv_two_sigma2).exp()
}

/// Greedy pivoted incomplete Cholesky of the Gaussian Gram matrix followed
/// by centering and compression to an orthogonal basis.
pub fn incomplete_cholesky(samples: &[f64], cfg: &KgvConfig) -> Result<CholeskyFactor> {
    cfg.validate()?;
    let n = samples.len();
    if n < 2 {
        return Err(TcaError::InvalidData(format!("need at least 2 samples, got {n}")));
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(TcaError::InvalidData("non-finite sample".into()));
    }
    let inv = 1.0 / (2.0 * cfg.kernel_width * cfg.kernel_width);
    let budget = cfg.cholesky_tol * n as f64;

    let mut diag = vec![1.0f64; n];
    let mut cols: Vec<Vec<f64>> = Vec::new();
    let mut pivots = Vec::new();
    let mut pivot_values = Vec::new();
    let mut residual: f64 = n as f64;
    while residual > budget && cols.len() < n {
        let (p, &pv) = diag
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
            .expect("n >= 2");
        if pv <= 0.0 {
            break;
        }
        let xp = samples[p];
        let mut col: Vec<f64> = samples.iter().map(|&x| gaussian_kernel(x, xp, inv)).collect();
        for prev in &cols {
            let c = prev[p];
            if c != 0.0 {
                for (v, &q) in col.iter_mut().zip(prev) {
                    *v -= c * q;
                }
            }
        }
        let scale = 1.0 / pv.sqrt();
        for v in col.iter_mut() {
            *v *= scale;
        }
        col[p] = pv.sqrt();
        for (d, &v) in diag.iter_mut().zip(&col) {
            *d = (*d - v * v).max(0.0);
        }
        diag[p] = 0.0;
        residual = diag.iter().sum();
        pivots.push(p);
        pivot_values.push(pv);
        cols.push(col);
    }

    let r = cols.len();
    let mut g = DMatrix::from_fn(n, r, |i, j| cols[j][i]);
    for mut col in g.column_iter_mut() {
        let mean = col.mean();
        col.add_scalar_mut(-mean);
    }
    // Compress: G = U S V^T via the r x r Gram matrix of the centered factor.
    let gram = g.transpose() * &g;
    let eig = SymmetricEigen::new(gram);
    let mut order: Vec<usize> = (0..r).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let top = order.first().map_or(0.0, |&k| eig.eigenvalues[k].max(0.0));
    // drop the smallest directions while the discarded trace fits the budget
    let mut spare = (budget - residual).max(0.0);
    let mut keep = r;
    while keep > 0 {
        let l = eig.eigenvalues[order[keep - 1]].max(0.0);
        if l <= spare || l <= 1e-13 * top {
            spare -= l.min(spare);
            keep -= 1;
        } else {
            break;
        }
    }
    let mut basis = DMatrix::zeros(r, keep);
    let mut eigenvalues = Vec::with_capacity(keep);
    for (c, &k) in order.iter().take(keep).enumerate() {
        basis.set_column(c, &eig.eigenvectors.column(k));
        eigenvalues.push(eig.eigenvalues[k]);
    }
    Ok(CholeskyFactor {
        g: g * basis,
        eigenvalues,
        pivots,
        pivot_values,
    })
}

/// Normalized block matrix with identity diagonal blocks and cross blocks
/// `Y_i^T Y_j`, together with the offset of each component's block.
pub struct KgvBlocks {
    matrix: DMatrix<f64>,
    offsets: Vec<usize>,
    dims: Vec<f64>,
}

impl KgvBlocks {
    fn assemble(features: &[&DMatrix<f64>], cross: impl Fn(usize, usize) -> DMatrix<f64>) -> Self {
        let mut offsets = vec![0];
        for f in features {
            offsets.push(offsets.last().unwrap() + f.ncols());
        }
        let total = *offsets.last().unwrap();
        let mut matrix = DMatrix::identity(total, total);
        for a in 0..features.len() {
            for b in (a + 1)..features.len() {
                if features[a].ncols() == 0 || features[b].ncols() == 0 {
                    continue;
                }
                let c = cross(a, b);
                let (ra, rb) = (offsets[a], offsets[b]);
                matrix.view_mut((ra, rb), c.shape()).copy_from(&c);
                matrix.view_mut((rb, ra), (c.ncols(), c.nrows())).copy_from(&c.transpose());
            }
        }
        let dims = features.iter().map(|f| f.norm_squared()).collect();
        Self { matrix, offsets, dims }
    }

    pub fn from_factors(factors: &[CholeskyFactor], kappa: f64) -> Result<Self> {
        let n = factors.first().map_or(0, CholeskyFactor::n);
        if let Some(f) = factors.iter().find(|f| f.n() != n) {
            return Err(TcaError::DimensionMismatch { expected: n, actual: f.n() });
        }
        let feats: Vec<DMatrix<f64>> = factors.iter().map(|f| f.regularized_features(kappa)).collect();
        let refs: Vec<&DMatrix<f64>> = feats.iter().collect();
        Ok(Self::assemble(&refs, |a, b| feats[a].transpose() * &feats[b]))
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    /// Log-determinant of the principal sub-block over the given components.
    pub fn log_det(&self, components: &[usize]) -> f64 {
        let idx: Vec<usize> = components
            .iter()
            .flat_map(|&c| self.offsets[c]..self.offsets[c + 1])
            .collect();
        if idx.is_empty() {
            return 0.0;
        }
        let sub = DMatrix::from_fn(idx.len(), idx.len(), |i, j| self.matrix[(idx[i], idx[j])]);
        floored_log_det(&sub, EIGEN_FLOOR)
    }

    /// KGV mutual information among groups of components.
    pub fn group_mi(&self, groups: &[Vec<usize>]) -> f64 {
        if groups.len() < 2 {
            return 0.0;
        }
        let all: Vec<usize> = groups.iter().flatten().copied().collect();
        let separate: f64 = groups.iter().map(|g| self.log_det(g)).sum();
        -0.5 * (self.log_det(&all) - separate)
    }

    pub fn components(&self) -> usize {
        self.offsets.len() - 1
    }

    /// Effective feature dimension `sum λ^2 / (λ + κ)^2` of each component.
    pub fn effective_dims(&self) -> &[f64] {
        &self.dims
    }
}

/// `I^K = -1/2 log det K̂` over all components.
pub fn kgv_mutual_information(factors: &[CholeskyFactor], cfg: &KgvConfig) -> Result<f64> {
    if factors.len() < 2 {
        return Ok(0.0);
    }
    let blocks = KgvBlocks::from_factors(factors, cfg.effective_kappa(factors[0].n()))?;
    let groups: Vec<Vec<usize>> = (0..factors.len()).map(|i| vec![i]).collect();
    Ok(blocks.group_mi(&groups))
}

/// Two-block KGV mutual information `I^K_uv`.
pub fn pairwise_kgv_mi(fu: &CholeskyFactor, fv: &CholeskyFactor, cfg: &KgvConfig) -> Result<f64> {
    kgv_mutual_information(&[fu.clone(), fv.clone()], cfg)
}

/// `J^K(Wx, T) = I^K - sum over tree edges of I^K_uv`.
pub fn contrast_jk(
    w: &DemixingMatrix,
    data: &Dataset,
    tree: &SpanningTree,
    cfg: &KgvConfig,
) -> Result<f64> {
    KgvContrast::new(data.clone(), *cfg)?.contrast(w.matrix(), tree)
}

/// Separation score of a subtree `V`: with `U_1..U_p` the connected
/// components of the tree minus `V`,
/// `J(V) = I(s_V, s_U1, ..., s_Up) - sum_i I(s_V, s_Ui)`.
pub fn subtree_score(
    factors: &[CholeskyFactor],
    tree: &SpanningTree,
    subtree: &[usize],
    cfg: &KgvConfig,
) -> Result<f64> {
    let blocks = KgvBlocks::from_factors(factors, cfg.effective_kappa(factors[0].n()))?;
    subtree_score_from_blocks(&blocks, tree, subtree)
}

pub(crate) fn subtree_score_from_blocks(
    blocks: &KgvBlocks,
    tree: &SpanningTree,
    subtree: &[usize],
) -> Result<f64> {
    if blocks.components() != tree.m() {
        return Err(TcaError::DimensionMismatch {
            expected: tree.m(),
            actual: blocks.components(),
        });
    }
    if !tree.is_connected_subset(subtree) {
        return Err(TcaError::InvalidSubtree(format!("{subtree:?} is not connected in the tree")));
    }
    let parts = complement_components(tree, subtree);
    if parts.len() < 2 {
        return Ok(0.0);
    }
    let mut groups = vec![subtree.to_vec()];
    groups.extend(parts.iter().cloned());
    let total = blocks.group_mi(&groups);
    let pairwise: f64 = parts
        .iter()
        .map(|u| blocks.group_mi(&[subtree.to_vec(), u.clone()]))
        .sum();
    Ok(total - pairwise)
}

/// First-order expectation of the subtree score when all components are
/// independent: `sum over pairs i < j of d_Ui d_Uj / (2N)` with `d` the
/// effective feature dimensions.
pub fn subtree_null_bias(blocks: &KgvBlocks, tree: &SpanningTree, subtree: &[usize], n: usize) -> f64 {
    let dims: Vec<f64> = complement_components(tree, subtree)
        .iter()
        .map(|u| u.iter().map(|&c| blocks.dims[c]).sum())
        .collect();
    let mut total = 0.0;
    for i in 0..dims.len() {
        for j in (i + 1)..dims.len() {
            total += dims[i] * dims[j];
        }
    }
    total / (2.0 * n as f64)
}

/// Connected components of the tree after removing `subtree`, each sorted,
/// ordered by smallest vertex.
pub fn complement_components(tree: &SpanningTree, subtree: &[usize]) -> Vec<Vec<usize>> {
    let m = tree.m();
    let mut blocked = vec![false; m];
    for &v in subtree {
        blocked[v] = true;
    }
    let mut seen = blocked.clone();
    let mut parts = Vec::new();
    for start in 0..m {
        if seen[start] {
            continue;
        }
        let comp = tree.component_avoiding(start, &blocked);
        for &v in &comp {
            seen[v] = true;
        }
        parts.push(comp);
    }
    parts
}

struct KgvComponent {
    features: DMatrix<f64>,
}

/// `J^K` with memoized per-component factors and per-pair cross blocks.
pub struct KgvContrast {
    data: Dataset,
    cfg: KgvConfig,
    components: Memo<RowKey, KgvComponent>,
    cross: Memo<(RowKey, RowKey), DMatrix<f64>>,
}

type Keyed = (RowKey, Arc<KgvComponent>);

impl KgvContrast {
    pub fn new(data: Dataset, cfg: KgvConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            data,
            cfg,
            components: Memo::new(),
            cross: Memo::new(),
        })
    }

    pub fn config(&self) -> &KgvConfig {
        &self.cfg
    }

    fn components_of(&self, w: &DMatrix<f64>, vertices: &[usize]) -> Result<Vec<Keyed>> {
        vertices
            .par_iter()
            .map(|&i| {
                let row: Vec<f64> = w.row(i).iter().copied().collect();
                let key = RowKey::new(&row);
                let comp = self.components.get_or_try_insert(&key, || {
                    let s = project_row(&self.data, &row);
                    let factor = incomplete_cholesky(&s, &self.cfg)?;
                    Ok(KgvComponent {
                        features: factor.regularized_features(self.cfg.effective_kappa(s.len())),
                    })
                })?;
                Ok((key, comp))
            })
            .collect()
    }

    fn blocks(&self, comps: &[Keyed]) -> KgvBlocks {
        let feats: Vec<&DMatrix<f64>> = comps.iter().map(|c| &c.1.features).collect();
        // warm the cross-block cache in parallel, then assemble
        let pairs: Vec<(usize, usize)> = (0..comps.len())
            .flat_map(|a| ((a + 1)..comps.len()).map(move |b| (a, b)))
            .collect();
        let crosses: HashMap<(usize, usize), DMatrix<f64>> = pairs
            .par_iter()
            .map(|&(a, b)| ((a, b), self.cross_block(&comps[a], &comps[b])))
            .collect();
        KgvBlocks::assemble(&feats, |a, b| crosses[&(a, b)].clone())
    }

    fn cross_block(&self, a: &Keyed, b: &Keyed) -> DMatrix<f64> {
        let swapped = a.0 > b.0;
        let (first, second) = if swapped { (b, a) } else { (a, b) };
        let key = (first.0.clone(), second.0.clone());
        let c = match self.cross.get(&key) {
            Some(c) => c,
            None => self
                .cross
                .insert(key, first.1.features.transpose() * &second.1.features),
        };
        if swapped {
            c.transpose()
        } else {
            (*c).clone()
        }
    }

    /// Memoized factors assembled into the block matrix for all rows of `w`.
    pub fn block_matrix(&self, w: &DMatrix<f64>) -> Result<KgvBlocks> {
        let all: Vec<usize> = (0..w.nrows()).collect();
        let comps = self.components_of(w, &all)?;
        Ok(self.blocks(&comps))
    }
}

impl Contrast for KgvContrast {
    fn data(&self) -> &Dataset {
        &self.data
    }

    fn local_contrast(&self, w: &DMatrix<f64>, vertices: &[usize], edges: &[(usize, usize)]) -> Result<f64> {
        let det = w.determinant();
        if !(det.abs() >= 1e-12) {
            return Err(TcaError::SingularMatrix { det });
        }
        let comps = self.components_of(w, vertices)?;
        let blocks = self.blocks(&comps);
        let index: HashMap<usize, usize> = vertices.iter().enumerate().map(|(k, &v)| (v, k)).collect();
        let singles: Vec<Vec<usize>> = (0..vertices.len()).map(|k| vec![k]).collect();
        let total = blocks.group_mi(&singles);
        let edge_sum: f64 = edges
            .iter()
            .map(|(u, v)| blocks.group_mi(&[vec![index[u]], vec![index[v]]]))
            .sum();
        Ok(total - edge_sum)
    }

    fn pairwise_dependence(&self, w: &DMatrix<f64>) -> Result<WeightMatrix> {
        let blocks = self.block_matrix(w)?;
        WeightMatrix::from_fn(w.nrows(), |u, v| blocks.group_mi(&[vec![u], vec![v]]))
    }

    fn advance_cache(&self) {
        self.components.advance();
        self.cross.advance();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tree::enumerate_spanning_trees;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn uniform(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.gen_range(-1.7..1.7)).collect()
    }

    fn centered_gram(x: &[f64], sigma: f64) -> DMatrix<f64> {
        let n = x.len();
        let k = DMatrix::from_fn(n, n, |i, j| (-(x[i] - x[j]).powi(2) / (2.0 * sigma * sigma)).exp());
        let h = DMatrix::identity(n, n) - DMatrix::from_element(n, n, 1.0 / n as f64);
        &h * k * &h
    }

    /// The kernel generalized variance evaluated with explicit N x N blocks.
    fn dense_kgv(samples: &[Vec<f64>], cfg: &KgvConfig) -> f64 {
        let n = samples[0].len();
        let m = samples.len();
        let grams: Vec<DMatrix<f64>> = samples.iter().map(|x| centered_gram(x, cfg.kernel_width)).collect();
        let mut big = DMatrix::zeros(m * n, m * n);
        let mut diag_logdet = 0.0;
        for i in 0..m {
            for j in 0..m {
                let block = if i == j {
                    let r = &grams[i] + DMatrix::identity(n, n) * cfg.effective_kappa(n);
                    &r * &r
                } else {
                    &grams[i] * &grams[j]
                };
                if i == j {
                    diag_logdet += crate::linalg::spd_log_det(&block).unwrap();
                }
                big.view_mut((i * n, j * n), (n, n)).copy_from(&block);
            }
        }
        let big = (&big + big.transpose()) * 0.5;
        -0.5 * (crate::linalg::spd_log_det(&big).unwrap() - diag_logdet)
    }

    #[test]
    fn identical_samples_give_empty_factor() {
        let f = incomplete_cholesky(&[0.7; 20], &KgvConfig::default()).unwrap();
        assert_eq!(f.rank(), 0);
    }

    #[test]
    fn exact_reconstruction_with_tiny_tolerance() {
        let cfg = KgvConfig { cholesky_tol: 1e-12, ..KgvConfig::default() };
        let x = [0.3, -1.2, 0.9, 2.1, -0.4];
        let f = incomplete_cholesky(&x, &cfg).unwrap();
        let approx = f.g() * f.g().transpose();
        assert!((approx - centered_gram(&x, 0.5)).amax() < 1e-8);
    }

    #[test]
    fn residual_trace_within_budget_and_pivots_nonincreasing() {
        let cfg = KgvConfig::default();
        let x = uniform(200, 1);
        let f = incomplete_cholesky(&x, &cfg).unwrap();
        let k = centered_gram(&x, cfg.kernel_width);
        let resid = (k - f.g() * f.g().transpose()).trace();
        assert!(resid <= cfg.cholesky_tol * 200.0 + 1e-12, "{resid}");
        assert!(f.rank() <= 200);
        assert!(f.pivot_values.windows(2).all(|p| p[1] <= p[0] + 1e-12));
        assert!(f.eigenvalues().windows(2).all(|p| p[1] <= p[0]));
    }

    #[test]
    fn narrow_cluster_has_low_rank() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x: Vec<f64> = (0..1000).map(|_| 0.3 + rng.gen_range(0.0..0.01)).collect();
        let f = incomplete_cholesky(&x, &KgvConfig::default()).unwrap();
        assert!(f.rank() <= 5, "rank {}", f.rank());
    }

    #[test]
    fn single_component_has_zero_mi() {
        let f = incomplete_cholesky(&uniform(100, 3), &KgvConfig::default()).unwrap();
        assert_eq!(kgv_mutual_information(&[f], &KgvConfig::default()).unwrap(), 0.0);
    }

    #[test]
    fn independence_and_duplication() {
        let cfg = KgvConfig::default();
        let a = incomplete_cholesky(&uniform(2000, 4), &cfg).unwrap();
        let b = incomplete_cholesky(&uniform(2000, 5), &cfg).unwrap();
        let indep = kgv_mutual_information(&[a.clone(), b.clone()], &cfg).unwrap();
        assert!(indep < 0.05, "{indep}");
        let dup = kgv_mutual_information(&[a.clone(), a.clone()], &cfg).unwrap();
        assert!(dup > 1.0, "{dup}");
        let pair = pairwise_kgv_mi(&a, &a, &cfg).unwrap();
        assert!((pair - dup).abs() < 1e-10);
        let ab = pairwise_kgv_mi(&a, &b, &cfg).unwrap();
        let ba = pairwise_kgv_mi(&b, &a, &cfg).unwrap();
        assert!((ab - ba).abs() < 1e-10);
        assert!(ab < 0.05);
    }

    #[test]
    fn low_rank_matches_dense_reference() {
        let cfg = KgvConfig { cholesky_tol: 1e-12, ..KgvConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for n in [10, 30, 50] {
            let s0: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
            let s1: Vec<f64> = s0.iter().map(|v: &f64| v * v + 0.3 * rng.gen::<f64>()).collect();
            let s2: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let samples = vec![s0, s1, s2];
            let factors: Vec<CholeskyFactor> =
                samples.iter().map(|s| incomplete_cholesky(s, &cfg).unwrap()).collect();
            let fast = kgv_mutual_information(&factors, &cfg).unwrap();
            let dense = dense_kgv(&samples, &cfg);
            assert!((fast - dense).abs() < 1e-6, "n={n}: {fast} vs {dense}");
        }
    }

    #[test]
    fn regularization_is_monotone() {
        let x = uniform(300, 7);
        let y: Vec<f64> = x.iter().map(|v| v.sin() + 0.2 * v * v).collect();
        let mut last = f64::INFINITY;
        for kappa in [1e-4, 1e-3, 1e-2, 1e-1, 1.0, 10.0] {
            let cfg = KgvConfig { kappa, ..KgvConfig::default() };
            let f = [incomplete_cholesky(&x, &cfg).unwrap(), incomplete_cholesky(&y, &cfg).unwrap()];
            let v = kgv_mutual_information(&f, &cfg).unwrap();
            assert!(v <= last + 1e-12, "kappa {kappa}: {v} > {last}");
            last = v;
        }
    }

    fn tree_data(n: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cols = vec![Vec::with_capacity(n); 4];
        for _ in 0..n {
            let s0: f64 = rng.gen_range(-1.7..1.7);
            let e: [f64; 3] = [rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)];
            let s1 = s0 * s0 + e[0];
            let s2 = 0.8 * s0 + e[1];
            let s3 = (2.0 * s2).sin() + e[2];
            for (c, v) in cols.iter_mut().zip([s0, s1, s2, s3]) {
                c.push(v);
            }
        }
        Dataset::from_columns(&cols).unwrap()
    }

    #[test]
    fn two_components_contrast_is_zero() {
        let data = Dataset::from_columns(&[uniform(500, 8), uniform(500, 9)]).unwrap();
        let w = DemixingMatrix::new(DMatrix::from_row_slice(2, 2, &[1.0, 0.4, -0.3, 1.0])).unwrap();
        let jk = contrast_jk(&w, &data, &SpanningTree::chain(2), &KgvConfig::default()).unwrap();
        assert!(jk.abs() < 1e-9, "{jk}");
    }

    #[test]
    fn jk_prefers_generating_tree_and_is_nonnegative() {
        let data = tree_data(1000, 10);
        let truth = SpanningTree::new(4, [(0, 1), (0, 2), (2, 3)]).unwrap();
        let contrast = KgvContrast::new(data, KgvConfig::default()).unwrap();
        let w = DMatrix::identity(4, 4);
        let best = contrast.contrast(&w, &truth).unwrap();
        for t in enumerate_spanning_trees(4) {
            let v = contrast.contrast(&w, &t).unwrap();
            assert!(v >= -1e-6);
            assert!(best <= v + 1e-12, "tree {:?}: {v} < {best}", t.edges());
        }
    }

    #[test]
    fn jk_permutation_invariance() {
        let data = tree_data(500, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let w = DMatrix::from_fn(4, 4, |_, _| rng.gen_range(-0.5..0.5)) + DMatrix::identity(4, 4);
        let tree = SpanningTree::new(4, [(0, 1), (1, 2), (1, 3)]).unwrap();
        let cfg = KgvConfig::default();
        let base = contrast_jk(&DemixingMatrix::new(w.clone()).unwrap(), &data, &tree, &cfg).unwrap();
        let perm = [3, 1, 0, 2];
        let pw = DMatrix::from_fn(4, 4, |k, j| w[(perm[k], j)]);
        let mut old_to_new = [0; 4];
        for (k, &p) in perm.iter().enumerate() {
            old_to_new[p] = k;
        }
        let permuted = contrast_jk(&DemixingMatrix::new(pw).unwrap(), &data, &tree.relabel(&old_to_new).unwrap(), &cfg).unwrap();
        assert!((base - permuted).abs() < 1e-9, "{base} vs {permuted}");
    }

    #[test]
    fn subtree_score_cases() {
        let cfg = KgvConfig::default();
        // chain 0 - 1 - 2 with s0 and s2 conditionally independent given s1
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let n = 2000;
        let s1: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.7..1.7)).collect();
        let s0: Vec<f64> = s1.iter().map(|v| v * v + rng.gen_range(-0.4..0.4)).collect();
        let s2: Vec<f64> = s1.iter().map(|v| 0.7 * v + rng.gen_range(-0.5..0.5)).collect();
        let factors: Vec<CholeskyFactor> =
            [&s0, &s1, &s2].iter().map(|s| incomplete_cholesky(s, &cfg).unwrap()).collect();
        let chain = SpanningTree::chain(3);
        let middle = subtree_score(&factors, &chain, &[1], &cfg).unwrap();
        assert!(middle >= -1e-6 && middle < 0.1, "{middle}");
        // removing an end vertex leaves one component
        assert_eq!(subtree_score(&factors, &chain, &[0], &cfg).unwrap(), 0.0);
        assert!(matches!(
            subtree_score(&factors, &chain, &[0, 2], &cfg),
            Err(TcaError::InvalidSubtree(_))
        ));
        // relabeling the complement components does not matter
        let star = SpanningTree::star(3, 1).unwrap();
        let swapped: Vec<CholeskyFactor> = vec![factors[2].clone(), factors[1].clone(), factors[0].clone()];
        let a = subtree_score(&factors, &star, &[1], &cfg).unwrap();
        let b = subtree_score(&swapped, &star, &[1], &cfg).unwrap();
        assert!((a - b).abs() < 1e-10);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use rand::Rng;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]
            #[test]
            fn kgv_is_nonnegative(seed in any::<u64>(), m in 2usize..5, n in 20usize..120) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let base: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
                let cfg = KgvConfig::default();
                let factors: Vec<CholeskyFactor> = (0..m)
                    .map(|k| {
                        let mix = rng.gen_range(0.0..1.0);
                        let s: Vec<f64> = base.iter().map(|b| mix * b * (k as f64 + 1.0) + rng.gen_range(-1.0..1.0)).collect();
                        incomplete_cholesky(&s, &cfg).unwrap()
                    })
                    .collect();
                prop_assert!(kgv_mutual_information(&factors, &cfg).unwrap() >= -1e-9);
            }
        }
    }
}
