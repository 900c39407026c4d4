//! Alternating minimization of the penalized tree contrast over the
//! demixing matrix `W` (projected steepest descent with finite-difference
//! gradients) and the tree `T` (maximum-weight spanning tree), plus
//! refinement of rows attached to badly separated subtrees.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::contrast::{Contrast, ContrastKind};
use crate::data::{estimate_covariance, CovarianceMatrix, Dataset, DemixingMatrix};
use crate::error::{Result, TcaError};
use crate::gaussian::TreeStructuredCovariance;
use crate::kde::{KdeConfig, KdeContrast};
use crate::kgv::{complement_components, subtree_null_bias, subtree_score_from_blocks, KgvConfig, KgvContrast};
use crate::linalg::spd_sqrt;
use crate::tree::{max_weight_spanning_tree, SpanningTree, WeightMatrix};

/// Correlations at or above this magnitude make the penalty infinite.
pub const PERFECT_CORRELATION: f64 = 1.0 - 1e-12;
pub const MIN_COMPONENT_VARIANCE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineSearchConfig {
    pub initial_step: f64,
    pub shrink: f64,
    pub armijo_c: f64,
    pub max_halvings: usize,
}

impl Default for LineSearchConfig {
    fn default() -> Self {
        Self {
            initial_step: 1.0,
            shrink: 0.5,
            armijo_c: 1e-4,
            max_halvings: 30,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitMode {
    /// Deflation FastICA on whitened data.
    #[default]
    Ica,
    /// ICA rotation followed by a coarse search over tree-structured
    /// covariances `W = C^{1/2} R Σ^{-1/2}`.
    CovarianceConstrained,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RefineConfig {
    /// Largest separating subtree that is scored.
    pub max_subtree_size: usize,
    /// Subtrees whose score exceeds its independence bias by more than
    /// this are treated as poorly separated.
    pub score_threshold: f64,
    /// At most this many flagged subtrees are processed, best score first.
    pub max_subtrees: usize,
    /// Descent steps per local problem.
    pub local_iters: usize,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            max_subtree_size: 3,
            score_threshold: 0.05,
            max_subtrees: 4,
            local_iters: 10,
        }
    }
}

/// Coarse row-rotation search run whenever gradient descent stalls.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    /// Rotation angles tried per row pair, evenly spaced in `(0, π)`; zero
    /// disables sweeps.
    pub angles: usize,
    /// Sweeps allowed per fit.
    pub max_rounds: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            angles: 12,
            max_rounds: 6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub lambda_c: f64,
    pub contrast: ContrastKind,
    pub kde: KdeConfig,
    pub kgv: KgvConfig,
    pub max_outer_iters: usize,
    pub grad_eps: f64,
    pub line_search: LineSearchConfig,
    pub convergence_tol: f64,
    pub seed: u64,
    pub init: InitMode,
    pub refine: RefineConfig,
    #[serde(default)]
    pub sweep: SweepConfig,
    /// ICA initializations tried; each is descended under the kernel
    /// generalized variance and the lowest objective wins.
    #[serde(default = "default_starts")]
    pub starts: usize,
}

fn default_starts() -> usize {
    6
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lambda_c: 0.05,
            contrast: ContrastKind::Kgv,
            kde: KdeConfig::default(),
            kgv: KgvConfig::default(),
            max_outer_iters: 200,
            grad_eps: 1e-4,
            line_search: LineSearchConfig::default(),
            convergence_tol: 1e-6,
            seed: 0,
            init: InitMode::Ica,
            refine: RefineConfig::default(),
            sweep: SweepConfig::default(),
            starts: default_starts(),
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str, v: f64| Err(TcaError::InvalidConfig(format!("{what} must be positive, got {v}")));
        if !(self.lambda_c >= 0.0 && self.lambda_c.is_finite()) {
            return Err(TcaError::InvalidConfig(format!("lambda_c must be >= 0, got {}", self.lambda_c)));
        }
        for (what, v) in [
            ("grad_eps", self.grad_eps),
            ("convergence_tol", self.convergence_tol),
            ("initial step", self.line_search.initial_step),
            ("armijo constant", self.line_search.armijo_c),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(what, v);
            }
        }
        if self.starts == 0 {
            return Err(TcaError::InvalidConfig("starts must be at least 1".into()));
        }
        if !(self.line_search.shrink > 0.0 && self.line_search.shrink < 1.0) {
            return Err(TcaError::InvalidConfig("line search shrink must lie in (0, 1)".into()));
        }
        self.kde.validate()?;
        self.kgv.validate()
    }
}

/// One accepted iteration, emitted as a JSON line in verbose mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub iteration: usize,
    pub objective: f64,
    pub tree: Vec<(usize, usize)>,
    /// Accepted line-search step; 0 for a rotation sweep.
    pub step: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub w: DemixingMatrix,
    pub tree: SpanningTree,
    pub objective_trace: Vec<f64>,
    pub tree_switch_count: usize,
    pub converged: bool,
    /// False when the ICA initialization hit its iteration cap.
    pub ica_converged: bool,
    pub records: Vec<TraceRecord>,
}

impl FitResult {
    pub fn objective(&self) -> f64 {
        *self.objective_trace.last().expect("trace starts with the initial objective")
    }
}

pub fn build_contrast(data: Dataset, cfg: &OptimizerConfig) -> Result<Box<dyn Contrast>> {
    Ok(match cfg.contrast {
        ContrastKind::Kde => Box::new(KdeContrast::new(data, cfg.kde)?),
        ContrastKind::Kgv => Box::new(KgvContrast::new(data, cfg.kgv)?),
    })
}

fn correlation(cov: &DMatrix<f64>, u: usize, v: usize) -> f64 {
    cov[(u, v)] / (cov[(u, u)] * cov[(v, v)]).sqrt()
}

fn edge_penalty(rho: f64) -> f64 {
    if rho.abs() >= PERFECT_CORRELATION {
        f64::INFINITY
    } else {
        -0.5 * (1.0 - rho * rho).ln()
    }
}

/// `J^C` over the given edges from the source covariance `W Σ W^T`.
pub(crate) fn penalty_from_sigma(w: &DMatrix<f64>, sigma: &DMatrix<f64>, edges: &[(usize, usize)]) -> Result<f64> {
    let cov = w * sigma * w.transpose();
    for i in 0..cov.nrows() {
        if !(cov[(i, i)] >= MIN_COMPONENT_VARIANCE) {
            return Err(TcaError::DegenerateComponent {
                index: i,
                reason: format!("variance {} of the transformed component", cov[(i, i)]),
            });
        }
    }
    Ok(edges.iter().map(|&(u, v)| edge_penalty(correlation(&cov, u, v))).sum())
}

/// `J^C = -1/2 sum over tree edges of log(1 - corr^2)` of `s = W x`.
/// Perfectly correlated edges give `+inf`.
pub fn penalty_jc(w: &DemixingMatrix, data: &Dataset, tree: &SpanningTree) -> Result<f64> {
    let sigma = estimate_covariance(data)?;
    penalty_from_sigma(w.matrix(), sigma.sigma(), tree.edges())
}

/// Contrast plus `λ_C J^C`.
pub fn objective(w: &DemixingMatrix, data: &Dataset, tree: &SpanningTree, cfg: &OptimizerConfig) -> Result<f64> {
    let contrast = build_contrast(data.centered(), cfg)?;
    let sigma = estimate_covariance(data)?;
    Problem::new(contrast.as_ref(), &sigma, cfg).objective(w.matrix(), tree)
}

/// Divides each row by its standard deviation under `cov`.
pub fn project_unit_rows(w: &DMatrix<f64>, cov: &CovarianceMatrix) -> Result<DemixingMatrix> {
    DemixingMatrix::new(project_rows(w, cov.sigma())?)
}

fn row_variance(w: &DMatrix<f64>, sigma: &DMatrix<f64>, i: usize) -> f64 {
    let r = w.row(i);
    (r * sigma * r.transpose())[(0, 0)]
}

fn project_rows(w: &DMatrix<f64>, sigma: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let mut out = w.clone();
    for i in 0..w.nrows() {
        project_row_in_place(&mut out, sigma, i)?;
    }
    Ok(out)
}

fn project_row_in_place(w: &mut DMatrix<f64>, sigma: &DMatrix<f64>, i: usize) -> Result<()> {
    let var = row_variance(w, sigma, i);
    if !(var > 0.0) || !var.is_finite() {
        return Err(TcaError::ZeroRow(i));
    }
    let s = var.sqrt();
    for v in w.row_mut(i).iter_mut() {
        *v /= s;
    }
    Ok(())
}

/// Removes from each row of `g` its component along `Σ w_i^T`, the normal
/// of the constraint `w_i Σ w_i^T = 1`.
pub fn tangent_project(g: &DMatrix<f64>, w: &DMatrix<f64>, sigma: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = g.clone();
    for i in 0..g.nrows() {
        let n = sigma * w.row(i).transpose();
        let nn = n.dot(&n);
        if nn > 0.0 {
            let coef = g.row(i).transpose().dot(&n) / nn;
            let fixed = out.row(i) - n.transpose() * coef;
            out.set_row(i, &fixed);
        }
    }
    out
}

/// Central finite-difference gradient of `f` on the unit-row manifold for
/// the given rows (other rows get zero), tangent-projected. Each perturbed
/// matrix differs from `w` in one row only, so memoized contrasts only
/// recompute that component.
pub fn gradient_fd(
    f: &dyn Fn(&DMatrix<f64>) -> Result<f64>,
    w: &DMatrix<f64>,
    sigma: &DMatrix<f64>,
    eps: f64,
    rows: &[usize],
) -> Result<DMatrix<f64>> {
    let m = w.ncols();
    let mut g = DMatrix::zeros(w.nrows(), m);
    for &i in rows {
        for j in 0..m {
            let mut plus = w.clone();
            plus[(i, j)] += eps;
            project_row_in_place(&mut plus, sigma, i)?;
            let mut minus = w.clone();
            minus[(i, j)] -= eps;
            project_row_in_place(&mut minus, sigma, i)?;
            g[(i, j)] = (f(&plus)? - f(&minus)?) / (2.0 * eps);
        }
    }
    Ok(tangent_project(&g, w, sigma))
}

/// Output of the ICA initializer.
#[derive(Debug, Clone)]
pub struct IcaResult {
    pub w: DemixingMatrix,
    pub converged: bool,
}

const ICA_MAX_ITERS: usize = 200;
const ICA_TOL: f64 = 1e-6;

/// Deflation FastICA with a `tanh` nonlinearity on whitened data, composed
/// with `Σ^{-1/2}` and projected to unit rows.
pub fn ica_initialize(data: &Dataset, cov: &CovarianceMatrix, seed: u64) -> Result<IcaResult> {
    let m = data.m();
    let n = data.n() as f64;
    let z = data.centered().samples() * cov.inv_sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut basis: Vec<DVector<f64>> = Vec::with_capacity(m);
    let mut converged = true;
    for _ in 0..m {
        let mut w = DVector::from_fn(m, |_, _| -> f64 { StandardNormal.sample(&mut rng) });
        orthonormalize(&mut w, &basis);
        let mut done = false;
        for _ in 0..ICA_MAX_ITERS {
            let proj = &z * &w;
            let g = proj.map(f64::tanh);
            let g_prime_mean = g.iter().map(|t| 1.0 - t * t).sum::<f64>() / n;
            let mut next = z.transpose() * &g / n - &w * g_prime_mean;
            orthonormalize(&mut next, &basis);
            let change = 1.0 - next.dot(&w).abs();
            w = next;
            if change < ICA_TOL {
                done = true;
                break;
            }
        }
        converged &= done;
        basis.push(w);
    }
    let b = DMatrix::from_fn(m, m, |i, j| basis[i][j]);
    let w = project_unit_rows(&(b * cov.inv_sqrt()), cov)?;
    if !converged {
        log::warn!("ICA initialization did not converge in {ICA_MAX_ITERS} iterations");
    }
    Ok(IcaResult { w, converged })
}

fn orthonormalize(w: &mut DVector<f64>, basis: &[DVector<f64>]) {
    for b in basis {
        let c = w.dot(b);
        *w -= b * c;
    }
    let norm = w.norm();
    if norm > 0.0 {
        *w /= norm;
    }
}

/// Objective evaluation bound to one contrast and covariance.
struct Problem<'a> {
    contrast: &'a dyn Contrast,
    sigma: &'a DMatrix<f64>,
    cov: &'a CovarianceMatrix,
    cfg: &'a OptimizerConfig,
}

impl<'a> Problem<'a> {
    fn new(contrast: &'a dyn Contrast, cov: &'a CovarianceMatrix, cfg: &'a OptimizerConfig) -> Self {
        Self {
            contrast,
            sigma: cov.sigma(),
            cov,
            cfg,
        }
    }

    fn objective(&self, w: &DMatrix<f64>, tree: &SpanningTree) -> Result<f64> {
        self.local(w, &(0..w.nrows()).collect::<Vec<_>>(), tree.edges())
    }

    fn local(&self, w: &DMatrix<f64>, vertices: &[usize], edges: &[(usize, usize)]) -> Result<f64> {
        let c = self.contrast.local_contrast(w, vertices, edges)?;
        let p = if self.cfg.lambda_c > 0.0 {
            self.cfg.lambda_c * penalty_from_sigma(w, self.sigma, edges)?
        } else {
            0.0
        };
        Ok(c + p)
    }

    /// Tree minimizing the full objective at `w`: pairwise dependence minus
    /// the penalty each edge would add.
    fn select_tree(&self, w: &DMatrix<f64>) -> Result<SpanningTree> {
        let mi = self.contrast.pairwise_dependence(w)?;
        let cov = w * self.sigma * w.transpose();
        let lambda = self.cfg.lambda_c;
        let weights = WeightMatrix::from_fn(w.nrows(), |u, v| {
            let pen = edge_penalty(correlation(&cov, u, v));
            // an infinite penalty rules the edge out but keeps weights finite
            mi.get(u, v) - lambda * pen.min(1e6)
        })?;
        max_weight_spanning_tree(&weights)
    }

    /// Backtracking Armijo search along `-g`; returns the accepted matrix,
    /// its value and the step, or `None` when no step decreases `f`.
    fn line_search(
        &self,
        f: &dyn Fn(&DMatrix<f64>) -> Result<f64>,
        w: &DMatrix<f64>,
        value: f64,
        g: &DMatrix<f64>,
    ) -> Result<Option<(DMatrix<f64>, f64, f64)>> {
        let ls = &self.cfg.line_search;
        let g2 = g.norm_squared();
        let mut step = ls.initial_step;
        for _ in 0..=ls.max_halvings {
            let trial = w - g * step;
            if let Ok(trial) = project_rows(&trial, self.sigma) {
                match rejectable(f(&trial))? {
                    Some(v) if v <= value - ls.armijo_c * step * g2 => {
                        return Ok(Some((trial, v, step)));
                    }
                    _ => {}
                }
            }
            step *= ls.shrink;
        }
        Ok(None)
    }

    /// Coarse search over in-plane rotations in whitened coordinates: for
    /// every row pair, row `i` alone turned toward row `j` and vice versa,
    /// and both rows turned together, at each grid angle. The best candidate
    /// per pair is kept when it lowers the objective. Returns the final
    /// matrix and value when anything improved.
    fn row_sweep(
        &self,
        w: &DMatrix<f64>,
        tree: &SpanningTree,
        value: f64,
    ) -> Result<Option<(DMatrix<f64>, SpanningTree, f64)>> {
        let angles = self.cfg.sweep.angles;
        let m = w.nrows();
        let mut best_w = w.clone();
        let mut best_tree = tree.clone();
        let mut best = value;
        for i in 0..m {
            for j in (i + 1)..m {
                let b = &best_w * self.cov.sqrt();
                let bi = b.row(i).into_owned();
                let bj = b.row(j).into_owned();
                let mut u = &bj - &bi * bj.dot(&bi);
                let norm = u.norm();
                if norm < 1e-8 {
                    continue;
                }
                u /= norm;
                // plane coordinates: b_i = (1, 0), b_j = (cj, sj)
                let (cj, sj) = (bj.dot(&bi), bj.dot(&u));
                let at = |c: f64, s: f64| (&bi * c + &u * s) * self.cov.inv_sqrt();
                let mut pair_best: Option<(DMatrix<f64>, SpanningTree, f64)> = None;
                for k in 1..angles {
                    let theta = std::f64::consts::PI * k as f64 / angles as f64;
                    let (c, s) = (theta.cos(), theta.sin());
                    let turned_i = at(c, s);
                    let turned_j = at(c * cj + s * sj, c * sj - s * cj);
                    let rotated_j = at(c * cj - s * sj, s * cj + c * sj);
                    let candidates = [
                        vec![(i, &turned_i)],
                        vec![(j, &turned_j)],
                        vec![(i, &turned_i), (j, &rotated_j)],
                    ];
                    for rows in candidates {
                        let mut trial = best_w.clone();
                        for (r, row) in rows {
                            trial.set_row(r, row);
                        }
                        let Some(mut v) = rejectable(self.objective(&trial, &best_tree))? else {
                            continue;
                        };
                        let mut t = best_tree.clone();
                        if let Ok(candidate) = self.select_tree(&trial) {
                            if let Some(vc) = rejectable(self.objective(&trial, &candidate))? {
                                if vc < v {
                                    v = vc;
                                    t = candidate;
                                }
                            }
                        }
                        if v < pair_best.as_ref().map_or(best, |p| p.2) {
                            pair_best = Some((trial, t, v));
                        }
                    }
                }
                if let Some((trial, t, v)) = pair_best {
                    if v < best - self.cfg.convergence_tol {
                        best_w = trial;
                        best_tree = t;
                        best = v;
                    }
                }
            }
        }
        Ok((best < value).then_some((best_w, best_tree, best)))
    }
}

/// Maps trial failures caused by a bad candidate matrix to `None`.
fn rejectable(r: Result<f64>) -> Result<Option<f64>> {
    match r {
        Ok(v) if v.is_finite() => Ok(Some(v)),
        Ok(_)
        | Err(TcaError::SingularMatrix { .. })
        | Err(TcaError::ZeroRow(_))
        | Err(TcaError::DegenerateComponent { .. })
        | Err(TcaError::DegenerateData(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Alternates a projected-gradient line search on `W` under the current
/// tree with re-selection of the tree.
pub fn alternate_minimize(data: &Dataset, cfg: &OptimizerConfig) -> Result<FitResult> {
    alternate_minimize_with(data, cfg, &mut |_| {})
}

/// Like [`alternate_minimize`], calling `on_record` after every accepted
/// iteration.
pub fn alternate_minimize_with(
    data: &Dataset,
    cfg: &OptimizerConfig,
    on_record: &mut dyn FnMut(&TraceRecord),
) -> Result<FitResult> {
    cfg.validate()?;
    let centered = data.centered();
    let cov = estimate_covariance(&centered)?;
    let contrast = build_contrast(centered.clone(), cfg)?;
    let problem = Problem::new(contrast.as_ref(), &cov, cfg);

    if cfg.starts == 1 {
        let (w, tree, converged) = initial_point(&problem, &centered, &cov, cfg, cfg.seed)?;
        let mut fit = descend(&problem, contrast.as_ref(), w, tree, cfg, on_record)?;
        fit.ica_converged = converged;
        return Ok(fit);
    }

    // Screening always runs on the cheap kernel generalized variance.
    let pilot_cfg = OptimizerConfig {
        contrast: ContrastKind::Kgv,
        ..*cfg
    };
    let pilot_contrast;
    let pilot_problem;
    let pilot = if cfg.contrast == ContrastKind::Kgv {
        &problem
    } else {
        pilot_contrast = build_contrast(centered.clone(), &pilot_cfg)?;
        pilot_problem = Problem::new(pilot_contrast.as_ref(), &cov, &pilot_cfg);
        &pilot_problem
    };
    let mut best: Option<FitResult> = None;
    for k in 0..cfg.starts {
        let seed = cfg.seed.wrapping_add((k as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let (w, tree, converged) = initial_point(pilot, &centered, &cov, &pilot_cfg, seed)?;
        let mut fit = descend(pilot, pilot.contrast, w, tree, &pilot_cfg, &mut |_| {})?;
        fit.ica_converged = converged;
        if best.as_ref().map_or(true, |b| fit.objective() < b.objective()) {
            best = Some(fit);
        }
    }
    let best = best.expect("at least one start");
    if cfg.contrast == ContrastKind::Kgv {
        for r in &best.records {
            on_record(r);
        }
        return Ok(best);
    }
    let w = best.w.matrix().clone();
    let tree = problem.select_tree(&w)?;
    let mut fit = descend(&problem, contrast.as_ref(), w, tree, cfg, on_record)?;
    fit.ica_converged = best.ica_converged;
    Ok(fit)
}

fn initial_point(
    problem: &Problem<'_>,
    centered: &Dataset,
    cov: &CovarianceMatrix,
    cfg: &OptimizerConfig,
    seed: u64,
) -> Result<(DMatrix<f64>, SpanningTree, bool)> {
    let ica = ica_initialize(centered, cov, seed)?;
    let mut w = ica.w.matrix().clone();
    let mut tree = problem.select_tree(&w)?;
    if cfg.init == InitMode::CovarianceConstrained {
        w = covariance_constrained_start(problem, &w, &tree)?;
        tree = problem.select_tree(&w)?;
    }
    Ok((w, tree, ica.converged))
}

/// Runs the alternating descent from a given starting matrix, which is
/// first projected to unit-variance rows.
pub fn alternate_minimize_from(
    data: &Dataset,
    cfg: &OptimizerConfig,
    start: &DemixingMatrix,
    on_record: &mut dyn FnMut(&TraceRecord),
) -> Result<FitResult> {
    cfg.validate()?;
    let centered = data.centered();
    if start.dim() != centered.m() {
        return Err(TcaError::DimensionMismatch {
            expected: centered.m(),
            actual: start.dim(),
        });
    }
    let cov = estimate_covariance(&centered)?;
    let contrast = build_contrast(centered, cfg)?;
    let problem = Problem::new(contrast.as_ref(), &cov, cfg);
    let w = project_rows(start.matrix(), problem.sigma)?;
    let tree = problem.select_tree(&w)?;
    descend(&problem, contrast.as_ref(), w, tree, cfg, on_record)
}

fn descend(
    problem: &Problem<'_>,
    contrast: &dyn Contrast,
    mut w: DMatrix<f64>,
    mut tree: SpanningTree,
    cfg: &OptimizerConfig,
    on_record: &mut dyn FnMut(&TraceRecord),
) -> Result<FitResult> {
    let mut value = problem.objective(&w, &tree)?;
    let mut fit = FitResult {
        w: DemixingMatrix::new(w.clone())?,
        tree: tree.clone(),
        objective_trace: vec![value],
        tree_switch_count: 0,
        converged: false,
        ica_converged: true,
        records: Vec::new(),
    };
    let all_rows: Vec<usize> = (0..w.nrows()).collect();
    let mut iteration = 0;
    let mut sweeps = 0;
    loop {
        let mut stalled = false;
        while iteration < cfg.max_outer_iters {
            iteration += 1;
            let f = |x: &DMatrix<f64>| problem.objective(x, &tree);
            let g = gradient_fd(&f, &w, problem.sigma, cfg.grad_eps, &all_rows)?;
            let Some((next, next_value, step)) = problem.line_search(&f, &w, value, &g)? else {
                stalled = true;
                break;
            };
            w = next;
            let decrease = value - next_value;
            value = next_value;
            switch_tree(problem, &w, &mut tree, &mut value, &mut fit)?;
            push_record(&mut fit, on_record, iteration, value, &tree, step);
            contrast.advance_cache();
            if decrease < cfg.convergence_tol {
                stalled = true;
                break;
            }
        }
        if !stalled {
            break;
        }
        if cfg.sweep.angles < 2 || sweeps >= cfg.sweep.max_rounds || iteration >= cfg.max_outer_iters {
            fit.converged = true;
            break;
        }
        sweeps += 1;
        let Some((next, next_tree, next_value)) = problem.row_sweep(&w, &tree, value)? else {
            fit.converged = true;
            break;
        };
        log::debug!("rotation sweep {sweeps}: objective {value:.6} -> {next_value:.6}");
        w = next;
        value = next_value;
        iteration += 1;
        if next_tree != tree {
            tree = next_tree;
            fit.tree_switch_count += 1;
        }
        push_record(&mut fit, on_record, iteration, value, &tree, 0.0);
        contrast.advance_cache();
    }
    fit.w = DemixingMatrix::new(w)?;
    fit.tree = tree;
    Ok(fit)
}

/// Adopts the re-selected tree when it strictly lowers the objective.
fn switch_tree(
    problem: &Problem<'_>,
    w: &DMatrix<f64>,
    tree: &mut SpanningTree,
    value: &mut f64,
    fit: &mut FitResult,
) -> Result<()> {
    let candidate = problem.select_tree(w)?;
    if candidate != *tree {
        let switched = problem.objective(w, &candidate)?;
        if switched < *value {
            *tree = candidate;
            *value = switched;
            fit.tree_switch_count += 1;
        }
    }
    Ok(())
}

fn push_record(
    fit: &mut FitResult,
    on_record: &mut dyn FnMut(&TraceRecord),
    iteration: usize,
    objective: f64,
    tree: &SpanningTree,
    step: f64,
) {
    let record = TraceRecord {
        iteration,
        objective,
        tree: tree.edges().to_vec(),
        step,
    };
    log::debug!("iteration {iteration}: objective {objective:.6} step {step:.3e}");
    on_record(&record);
    fit.records.push(record);
    fit.objective_trace.push(objective);
}

const CORRELATION_GRID: [f64; 7] = [-0.6, -0.4, -0.2, 0.0, 0.2, 0.4, 0.6];

/// Coordinate search over the edge correlations of `C` in
/// `W = C^{1/2} R Σ^{-1/2}`, with `R Σ^{-1/2}` taken from `w_ica`.
fn covariance_constrained_start(problem: &Problem<'_>, w_ica: &DMatrix<f64>, tree: &SpanningTree) -> Result<DMatrix<f64>> {
    let build = |rho: &[f64]| -> Result<DMatrix<f64>> {
        let c = TreeStructuredCovariance::from_edge_correlations(tree, rho)?;
        project_rows(&(spd_sqrt(c.matrix())? * w_ica), problem.sigma)
    };
    let mut rho = vec![0.0; tree.edges().len()];
    let mut best_w = w_ica.clone();
    let mut best = problem.objective(&best_w, tree)?;
    for _sweep in 0..2 {
        for e in 0..rho.len() {
            for &r in &CORRELATION_GRID {
                let mut trial = rho.clone();
                trial[e] = r;
                let w = build(&trial)?;
                let v = problem.objective(&w, tree)?;
                if v < best {
                    best = v;
                    best_w = w;
                    rho = trial;
                }
            }
        }
    }
    debug_assert!(problem.cov.dim() == best_w.nrows());
    Ok(best_w)
}

/// Connected vertex subsets of the tree with at most `max_size` vertices,
/// each sorted, in lexicographic order.
pub fn connected_subtrees(tree: &SpanningTree, max_size: usize) -> Vec<Vec<usize>> {
    let adj = tree.adjacency();
    let mut found: BTreeSet<Vec<usize>> = BTreeSet::new();
    let mut frontier: Vec<Vec<usize>> = (0..tree.m()).map(|v| vec![v]).collect();
    while let Some(set) = frontier.pop() {
        if !found.insert(set.clone()) || set.len() == max_size {
            continue;
        }
        for &u in &set {
            for &v in &adj[u] {
                if !set.contains(&v) {
                    let mut next = set.clone();
                    next.push(v);
                    next.sort_unstable();
                    if !found.contains(&next) {
                        frontier.push(next);
                    }
                }
            }
        }
    }
    found.into_iter().collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubtreeScore {
    pub vertices: Vec<usize>,
    pub score: f64,
    /// Expected score under full independence at this sample size.
    pub null_bias: f64,
}

impl SubtreeScore {
    pub fn excess(&self) -> f64 {
        self.score - self.null_bias
    }
}

/// Separation scores of all small subtrees under the KGV measure.
pub fn score_subtrees(data: &Dataset, w: &DemixingMatrix, tree: &SpanningTree, cfg: &OptimizerConfig) -> Result<Vec<SubtreeScore>> {
    let scorer = KgvContrast::new(data.centered(), cfg.kgv)?;
    let blocks = scorer.block_matrix(w.matrix())?;
    connected_subtrees(tree, cfg.refine.max_subtree_size)
        .into_iter()
        .map(|v| {
            let score = subtree_score_from_blocks(&blocks, tree, &v)?;
            let null_bias = subtree_null_bias(&blocks, tree, &v, data.n());
            Ok(SubtreeScore { vertices: v, score, null_bias })
        })
        .collect()
}

/// Re-optimizes the rows of the components cut off by poorly separating
/// subtrees, each against the contrast of its neighborhood; a change is
/// kept only if the full objective decreases.
pub fn refine_subtrees(data: &Dataset, fit: &FitResult, cfg: &OptimizerConfig) -> Result<FitResult> {
    cfg.validate()?;
    let centered = data.centered();
    let cov = estimate_covariance(&centered)?;
    let contrast = build_contrast(centered, cfg)?;
    let problem = Problem::new(contrast.as_ref(), &cov, cfg);

    let mut out = fit.clone();
    let mut w = fit.w.matrix().clone();
    let mut tree = fit.tree.clone();
    let mut value = problem.objective(&w, &tree)?;

    let mut scores = score_subtrees(data, &fit.w, &tree, cfg)?;
    scores.retain(|s| s.excess() > cfg.refine.score_threshold);
    scores.sort_by(|a, b| b.excess().total_cmp(&a.excess()).then_with(|| a.vertices.cmp(&b.vertices)));
    scores.truncate(cfg.refine.max_subtrees);

    let mut iteration = fit.records.last().map_or(0, |r| r.iteration);
    for SubtreeScore { vertices: v, score, .. } in scores {
        for rows in complement_components(&tree, &v) {
            let mut local_set: BTreeSet<usize> = rows.iter().copied().collect();
            for &u in &rows {
                local_set.extend(tree.neighbors(u));
            }
            let vertices: Vec<usize> = local_set.into_iter().collect();
            let edges: Vec<(usize, usize)> = tree
                .edges()
                .iter()
                .copied()
                .filter(|(a, b)| vertices.contains(a) && vertices.contains(b))
                .collect();
            let f = |x: &DMatrix<f64>| problem.local(x, &vertices, &edges);
            let mut local_w = w.clone();
            let mut local_value = f(&local_w)?;
            let mut last_step = 0.0;
            for _ in 0..cfg.refine.local_iters {
                let g = gradient_fd(&f, &local_w, problem.sigma, cfg.grad_eps, &rows)?;
                match problem.line_search(&f, &local_w, local_value, &g)? {
                    Some((next, v, step)) => {
                        local_w = next;
                        local_value = v;
                        last_step = step;
                    }
                    None => break,
                }
            }
            let full = problem.objective(&local_w, &tree)?;
            if full < value {
                log::debug!("refined rows {rows:?} around subtree {v:?} (score {score:.4}): {value:.6} -> {full:.6}");
                w = local_w;
                value = full;
                let candidate = problem.select_tree(&w)?;
                if candidate != tree {
                    let switched = problem.objective(&w, &candidate)?;
                    if switched < value {
                        tree = candidate;
                        value = switched;
                        out.tree_switch_count += 1;
                    }
                }
                iteration += 1;
                out.records.push(TraceRecord {
                    iteration,
                    objective: value,
                    tree: tree.edges().to_vec(),
                    step: last_step,
                });
                out.objective_trace.push(value);
            }
            contrast.advance_cache();
        }
    }
    out.w = DemixingMatrix::new(w)?;
    out.tree = tree;
    Ok(out)
}
