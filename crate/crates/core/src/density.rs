//! Tree-factorized density estimation on `s = W x`: a Gaussian mixture at
//! the root, a mixture of experts on every edge, component counts chosen
//! by MDL.

use std::collections::VecDeque;
use std::path::Path;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{transform_sources, Dataset, DemixingMatrix};
use crate::error::{Result, TcaError};
use crate::gaussian::gaussian_pairwise_mi;
use crate::mixture::{log_sum_exp, normal_log_pdf, GaussianMixture, MixtureOfExperts, VARIANCE_FLOOR};
use crate::synth::stream_rng;
use crate::tree::{SpanningTree, WeightMatrix};

pub const MODEL_FORMAT_VERSION: u32 = 1;

/// A spanning tree oriented away from a root.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DirectedTree {
    root: usize,
    parent: Vec<Option<usize>>,
    order: Vec<usize>,
}

impl DirectedTree {
    pub fn root(&self) -> usize {
        self.root
    }

    pub fn m(&self) -> usize {
        self.parent.len()
    }

    pub fn parent(&self, u: usize) -> Option<usize> {
        self.parent[u]
    }

    /// Vertices in breadth-first order; every parent precedes its children.
    pub fn order(&self) -> &[usize] {
        &self.order
    }

    /// `(child, parent)` pairs in breadth-first order.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        self.order
            .iter()
            .filter_map(|&u| self.parent[u].map(|p| (u, p)))
            .collect()
    }

    pub fn to_undirected(&self) -> Result<SpanningTree> {
        SpanningTree::new(self.m(), self.edges())
    }
}

/// Orients `tree` away from `root` by breadth-first search.
pub fn root_tree(tree: &SpanningTree, root: usize) -> Result<DirectedTree> {
    let m = tree.m();
    if root >= m {
        return Err(TcaError::InvalidVertex { vertex: root, m });
    }
    let adj = tree.adjacency();
    let mut parent = vec![None; m];
    let mut seen = vec![false; m];
    let mut order = Vec::with_capacity(m);
    let mut queue = VecDeque::from([root]);
    seen[root] = true;
    while let Some(u) = queue.pop_front() {
        order.push(u);
        for &v in &adj[u] {
            if !seen[v] {
                seen[v] = true;
                parent[v] = Some(u);
                queue.push_back(v);
            }
        }
    }
    Ok(DirectedTree { root, parent, order })
}

/// Vertex with the largest total weight on its incident tree edges; ties
/// go to the smallest index.
pub fn choose_root(tree: &SpanningTree, weights: &WeightMatrix) -> usize {
    let mut score = vec![0.0; tree.m()];
    for &(u, v) in tree.edges() {
        let w = weights.get(u, v);
        score[u] += w;
        score[v] += w;
    }
    let mut best = 0;
    for (u, &s) in score.iter().enumerate() {
        if s > score[best] {
            best = u;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmConfig {
    pub max_iters: usize,
    /// Stop once the log-likelihood gain is below `tol * |loglik|`.
    pub tol: f64,
    /// Collapsed-component resets tolerated before the component count is
    /// lowered.
    pub max_resets: usize,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            max_iters: 500,
            tol: 1e-7,
            max_resets: 3,
        }
    }
}

/// Result of one EM run.
#[derive(Debug, Clone)]
pub struct EmFit<M> {
    pub model: M,
    /// Total (not mean) log-likelihood of the training samples.
    pub log_likelihood: f64,
    /// Log-likelihood before each M-step since the last reset, ending with
    /// the final value.
    pub trace: Vec<f64>,
    pub iterations: usize,
    pub resets: usize,
    /// Component count after any reductions forced by collapse.
    pub k: usize,
}

fn check_sample_size(n: usize, k: usize) -> Result<()> {
    if k == 0 {
        return Err(TcaError::InvalidConfig("component count must be at least 1".into()));
    }
    if n < 5 * k {
        return Err(TcaError::InvalidConfig(format!("{n} samples are too few for {k} components (need 5 per component)")));
    }
    Ok(())
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var)
}

/// k-means++ seeding followed by Lloyd iterations on points in rows of
/// `pts`; returns the cluster label of each point.
pub(crate) fn kmeans_labels(pts: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = pts.len();
    let dist2 = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
    let mut centers: Vec<Vec<f64>> = vec![pts[rng.gen_range(0..n)].clone()];
    let mut d: Vec<f64> = pts.iter().map(|p| dist2(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d.iter().sum();
        let next = if total > 0.0 {
            let mut u = rng.gen::<f64>() * total;
            let mut idx = n - 1;
            for (i, &di) in d.iter().enumerate() {
                if u < di {
                    idx = i;
                    break;
                }
                u -= di;
            }
            idx
        } else {
            rng.gen_range(0..n)
        };
        centers.push(pts[next].clone());
        for (i, p) in pts.iter().enumerate() {
            d[i] = d[i].min(dist2(p, &centers[centers.len() - 1]));
        }
    }
    let mut labels = vec![0; n];
    for _ in 0..25 {
        let mut changed = false;
        for (i, p) in pts.iter().enumerate() {
            let best = (0..k)
                .min_by(|&a, &b| dist2(p, &centers[a]).total_cmp(&dist2(p, &centers[b])))
                .unwrap_or(0);
            if best != labels[i] {
                labels[i] = best;
                changed = true;
            }
        }
        let dim = pts[0].len();
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &l) in pts.iter().zip(&labels) {
            counts[l] += 1;
            for (s, x) in sums[l].iter_mut().zip(p) {
                *s += x;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centers[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        if !changed {
            break;
        }
    }
    labels
}

/// Minimum starting variance of a component, relative to the data variance.
const INIT_VARIANCE_FRACTION: f64 = 1e-3;

/// Posterior responsibilities `r[i][k]` from per-component log joint terms;
/// returns the total log-likelihood.
fn e_step(log_joint: impl Fn(usize, usize) -> f64, n: usize, k: usize, resp: &mut [f64]) -> f64 {
    let mut total = 0.0;
    let mut row = vec![0.0; k];
    for i in 0..n {
        for (c, r) in row.iter_mut().enumerate() {
            *r = log_joint(i, c);
        }
        let lse = log_sum_exp(&row);
        total += lse;
        for c in 0..k {
            resp[i * k + c] = (row[c] - lse).exp();
        }
    }
    total
}

fn converged(prev: f64, next: f64, tol: f64) -> bool {
    (next - prev).abs() <= tol * prev.abs().max(1e-300)
}

/// EM for a univariate Gaussian mixture with `k` components.
pub fn fit_gmm(samples: &[f64], k: usize, seed: u64) -> Result<EmFit<GaussianMixture>> {
    fit_gmm_with(samples, k, seed, &EmConfig::default())
}

pub fn fit_gmm_with(samples: &[f64], k: usize, seed: u64, cfg: &EmConfig) -> Result<EmFit<GaussianMixture>> {
    check_sample_size(samples.len(), k)?;
    let mut k = k;
    loop {
        match gmm_em(samples, k, seed, cfg) {
            Err(TcaError::DegenerateComponent { index, reason }) if k > 1 => {
                log::debug!("component {index} keeps collapsing ({reason}); retrying with {} components", k - 1);
                k -= 1;
            }
            other => return other,
        }
    }
}

fn gmm_em(x: &[f64], k: usize, seed: u64, cfg: &EmConfig) -> Result<EmFit<GaussianMixture>> {
    let n = x.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (total_mean, total_var) = mean_var(x);
    if total_var < VARIANCE_FLOOR {
        return Err(TcaError::DegenerateData("samples have (near) zero variance".into()));
    }
    let var_init_floor = INIT_VARIANCE_FRACTION * total_var;

    let pts: Vec<Vec<f64>> = x.iter().map(|&v| vec![v]).collect();
    let labels = if k == 1 { vec![0; n] } else { kmeans_labels(&pts, k, &mut rng) };
    let mut weights = vec![0.0; k];
    let mut means = vec![total_mean; k];
    let mut vars = vec![total_var; k];
    for c in 0..k {
        let members: Vec<f64> = x.iter().zip(&labels).filter(|(_, &l)| l == c).map(|(&v, _)| v).collect();
        weights[c] = members.len().max(1) as f64;
        if !members.is_empty() {
            let (m, v) = mean_var(&members);
            means[c] = m;
            vars[c] = v.max(var_init_floor);
        }
    }
    let wsum: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= wsum);

    let mut resp = vec![0.0; n * k];
    let mut trace = Vec::new();
    let mut resets = 0;
    let mut iterations = 0;
    loop {
        let ll = e_step(|i, c| weights[c].ln() + normal_log_pdf(x[i], means[c], vars[c]), n, k, &mut resp);
        if let Some(&prev) = trace.last() {
            if converged(prev, ll, cfg.tol) || iterations >= cfg.max_iters {
                trace.push(ll);
                break;
            }
        }
        if iterations >= cfg.max_iters {
            trace.push(ll);
            break;
        }
        trace.push(ll);
        iterations += 1;

        let mut collapsed = None;
        for c in 0..k {
            let nk: f64 = (0..n).map(|i| resp[i * k + c]).sum();
            let mean = (0..n).map(|i| resp[i * k + c] * x[i]).sum::<f64>() / nk;
            let var = (0..n).map(|i| resp[i * k + c] * (x[i] - mean).powi(2)).sum::<f64>() / nk;
            if !(nk > 0.0) || !(var >= VARIANCE_FLOOR) {
                collapsed = Some(c);
                break;
            }
            weights[c] = nk / n as f64;
            means[c] = mean;
            vars[c] = var;
        }
        if let Some(c) = collapsed {
            resets += 1;
            if resets > cfg.max_resets {
                return Err(TcaError::DegenerateComponent {
                    index: c,
                    reason: format!("variance collapsed {resets} times"),
                });
            }
            means[c] = x[rng.gen_range(0..n)];
            vars[c] = total_var;
            weights = vec![1.0 / k as f64; k];
            trace.clear();
        }
    }
    let ll = *trace.last().unwrap_or(&f64::NEG_INFINITY);
    Ok(EmFit {
        model: GaussianMixture::new(weights, means, vars)?,
        log_likelihood: ll,
        trace,
        iterations,
        resets,
        k,
    })
}

/// EM for a mixture of experts modelling `child` given `parent`.
pub fn fit_moe(child: &[f64], parent: &[f64], k: usize, seed: u64) -> Result<EmFit<MixtureOfExperts>> {
    fit_moe_with(child, parent, k, seed, &EmConfig::default())
}

pub fn fit_moe_with(
    child: &[f64],
    parent: &[f64],
    k: usize,
    seed: u64,
    cfg: &EmConfig,
) -> Result<EmFit<MixtureOfExperts>> {
    if child.len() != parent.len() {
        return Err(TcaError::DimensionMismatch {
            expected: child.len(),
            actual: parent.len(),
        });
    }
    check_sample_size(child.len(), k)?;
    let mut k = k;
    loop {
        match moe_em(child, parent, k, seed, cfg) {
            Err(TcaError::DegenerateComponent { index, reason }) if k > 1 => {
                log::debug!("expert {index} keeps collapsing ({reason}); retrying with {} experts", k - 1);
                k -= 1;
            }
            other => return other,
        }
    }
}

/// Responsibility-weighted least squares of `y` on `(p, 1)`.
fn weighted_line(y: &[f64], p: &[f64], r: impl Fn(usize) -> f64) -> (f64, f64, f64) {
    let (mut s0, mut s1, mut s2, mut t0, mut t1) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for i in 0..y.len() {
        let w = r(i);
        s0 += w;
        s1 += w * p[i];
        s2 += w * p[i] * p[i];
        t0 += w * y[i];
        t1 += w * p[i] * y[i];
    }
    let det = s2 * s0 - s1 * s1;
    let (slope, intercept) = if det > 1e-12 * (s2 * s0).max(1e-300) {
        ((s0 * t1 - s1 * t0) / det, (s2 * t0 - s1 * t1) / det)
    } else {
        (0.0, t0 / s0)
    };
    let sse: f64 = (0..y.len()).map(|i| r(i) * (y[i] - slope * p[i] - intercept).powi(2)).sum();
    (slope, intercept, sse / s0)
}

struct Gate {
    slopes: Vec<f64>,
    intercepts: Vec<f64>,
}

impl Gate {
    fn log_probs(&self, p: f64, out: &mut [f64]) {
        for (c, o) in out.iter_mut().enumerate() {
            *o = self.slopes[c] * p + self.intercepts[c];
        }
        let lse = log_sum_exp(out);
        out.iter_mut().for_each(|o| *o -= lse);
    }

    /// `sum_i sum_c r_ic log g_c(p_i)`.
    fn objective(&self, p: &[f64], resp: &[f64], k: usize) -> f64 {
        let mut lg = vec![0.0; k];
        let mut total = 0.0;
        for (i, &pi) in p.iter().enumerate() {
            self.log_probs(pi, &mut lg);
            total += (0..k).map(|c| resp[i * k + c] * lg[c]).sum::<f64>();
        }
        total
    }

    /// One damped Newton ascent step on the gate objective with expert 0 as
    /// the reference; never decreases the objective.
    fn newton_step(&mut self, p: &[f64], resp: &[f64], k: usize) {
        if k == 1 {
            return;
        }
        let d = 2 * (k - 1);
        let mut grad = nalgebra::DVector::<f64>::zeros(d);
        let mut hess = DMatrix::<f64>::zeros(d, d);
        let mut lg = vec![0.0; k];
        for (i, &pi) in p.iter().enumerate() {
            self.log_probs(pi, &mut lg);
            let g: Vec<f64> = lg.iter().map(|v| v.exp()).collect();
            let x = [pi, 1.0];
            for a in 1..k {
                let diff = resp[i * k + a] - g[a];
                for (u, xu) in x.iter().enumerate() {
                    grad[2 * (a - 1) + u] += diff * xu;
                }
                for b in 1..k {
                    let cov = if a == b { g[a] * (1.0 - g[a]) } else { -g[a] * g[b] };
                    for (u, xu) in x.iter().enumerate() {
                        for (v, xv) in x.iter().enumerate() {
                            hess[(2 * (a - 1) + u, 2 * (b - 1) + v)] += cov * xu * xv;
                        }
                    }
                }
            }
        }
        let ridge = 1e-8 * (1.0 + hess.diagonal().amax());
        for j in 0..d {
            hess[(j, j)] += ridge;
        }
        let Some(step) = hess.cholesky().map(|c| c.solve(&grad)) else {
            return;
        };
        let before = self.objective(p, resp, k);
        let (slopes, intercepts) = (self.slopes.clone(), self.intercepts.clone());
        let mut t = 1.0;
        for _ in 0..30 {
            for a in 1..k {
                self.slopes[a] = slopes[a] + t * step[2 * (a - 1)];
                self.intercepts[a] = intercepts[a] + t * step[2 * (a - 1) + 1];
            }
            let after = self.objective(p, resp, k);
            if after.is_finite() && after >= before {
                return;
            }
            t *= 0.5;
        }
        self.slopes = slopes;
        self.intercepts = intercepts;
    }
}

fn moe_em(y: &[f64], p: &[f64], k: usize, seed: u64, cfg: &EmConfig) -> Result<EmFit<MixtureOfExperts>> {
    let n = y.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (ym, yv) = mean_var(y);
    let (pm, pv) = mean_var(p);
    if yv < VARIANCE_FLOOR {
        return Err(TcaError::DegenerateData("child samples have (near) zero variance".into()));
    }
    let var_init_floor = INIT_VARIANCE_FRACTION * yv;

    let labels = if k == 1 {
        vec![0; n]
    } else {
        let (ys, ps) = (yv.sqrt(), pv.sqrt().max(1e-12));
        let pts: Vec<Vec<f64>> = (0..n).map(|i| vec![(p[i] - pm) / ps, (y[i] - ym) / ys]).collect();
        kmeans_labels(&pts, k, &mut rng)
    };
    let mut slopes = vec![0.0; k];
    let mut intercepts = vec![ym; k];
    let mut vars = vec![yv; k];
    let mut gate = Gate {
        slopes: vec![0.0; k],
        intercepts: vec![0.0; k],
    };
    let counts: Vec<usize> = (0..k).map(|c| labels.iter().filter(|&&l| l == c).count()).collect();
    for c in 0..k {
        if counts[c] >= 3 {
            let (a, b, v) = weighted_line(y, p, |i| if labels[i] == c { 1.0 } else { 0.0 });
            slopes[c] = a;
            intercepts[c] = b;
            vars[c] = v.max(var_init_floor);
        }
        gate.intercepts[c] = (counts[c].max(1) as f64 / counts[0].max(1) as f64).ln();
    }

    let mut resp = vec![0.0; n * k];
    let mut lg = vec![0.0; k];
    let mut trace = Vec::new();
    let mut resets = 0;
    let mut iterations = 0;
    loop {
        let mut ll = 0.0;
        let mut row = vec![0.0; k];
        for i in 0..n {
            gate.log_probs(p[i], &mut lg);
            for c in 0..k {
                row[c] = lg[c] + normal_log_pdf(y[i], slopes[c] * p[i] + intercepts[c], vars[c]);
            }
            let lse = log_sum_exp(&row);
            ll += lse;
            for c in 0..k {
                resp[i * k + c] = (row[c] - lse).exp();
            }
        }
        let stop = iterations >= cfg.max_iters || trace.last().is_some_and(|&prev| converged(prev, ll, cfg.tol));
        trace.push(ll);
        if stop {
            break;
        }
        iterations += 1;

        let mut collapsed = None;
        for c in 0..k {
            let nk: f64 = (0..n).map(|i| resp[i * k + c]).sum();
            if !(nk > 1e-10 * n as f64) {
                collapsed = Some(c);
                break;
            }
            let (a, b, v) = weighted_line(y, p, |i| resp[i * k + c]);
            if !(v >= VARIANCE_FLOOR) {
                collapsed = Some(c);
                break;
            }
            slopes[c] = a;
            intercepts[c] = b;
            vars[c] = v;
        }
        if let Some(c) = collapsed {
            resets += 1;
            if resets > cfg.max_resets {
                return Err(TcaError::DegenerateComponent {
                    index: c,
                    reason: format!("variance collapsed {resets} times"),
                });
            }
            slopes[c] = 0.0;
            intercepts[c] = y[rng.gen_range(0..n)];
            vars[c] = yv;
            gate.slopes.iter_mut().for_each(|s| *s = 0.0);
            gate.intercepts.iter_mut().for_each(|s| *s = 0.0);
            trace.clear();
            continue;
        }
        for _ in 0..3 {
            gate.newton_step(p, &resp, k);
        }
    }
    let model = MixtureOfExperts {
        gate_slopes: gate.slopes,
        gate_intercepts: gate.intercepts,
        slopes,
        intercepts,
        variances: vars,
    };
    model.validate()?;
    Ok(EmFit {
        log_likelihood: *trace.last().unwrap_or(&f64::NEG_INFINITY),
        model,
        trace,
        iterations,
        resets,
        k,
    })
}

/// Free parameters of a `k`-component univariate Gaussian mixture.
pub fn gmm_parameter_count(k: usize) -> usize {
    3 * k - 1
}

/// Free parameters of a `k`-expert mixture of experts: `k` linear-Gaussian
/// experts plus `k - 1` identifiable gate pairs.
pub fn moe_parameter_count(k: usize) -> usize {
    5 * k - 2
}

/// Outcome of a model-size search.
#[derive(Debug, Clone)]
pub struct MdlSelection<M> {
    pub fit: EmFit<M>,
    /// `(requested K, MDL score)` for every size that could be fitted.
    pub scores: Vec<(usize, f64)>,
}

impl<M> MdlSelection<M> {
    pub fn k(&self) -> usize {
        self.fit.k
    }
}

/// Fits every size `1..=k_max` admitted by the sample count and keeps the
/// one minimizing `-loglik + P_K / 2 * log N`.
pub fn mdl_select<M>(
    n: usize,
    k_max: usize,
    fit: impl Fn(usize) -> Result<EmFit<M>>,
    parameter_count: impl Fn(usize) -> usize,
) -> Result<MdlSelection<M>> {
    if k_max == 0 {
        return Err(TcaError::InvalidConfig("K_max must be at least 1".into()));
    }
    let log_n = (n as f64).ln();
    let mut best: Option<(f64, EmFit<M>)> = None;
    let mut scores = Vec::new();
    for k in 1..=k_max.min(n / 5).max(1) {
        let f = fit(k)?;
        let score = -f.log_likelihood + 0.5 * parameter_count(f.k) as f64 * log_n;
        scores.push((k, score));
        if best.as_ref().map_or(true, |(s, _)| score < *s) {
            best = Some((score, f));
        }
    }
    let (_, fit) = best.expect("at least one size is fitted");
    Ok(MdlSelection { fit, scores })
}

pub fn mdl_select_gmm(samples: &[f64], k_max: usize, seed: u64) -> Result<MdlSelection<GaussianMixture>> {
    mdl_select(
        samples.len(),
        k_max,
        |k| fit_gmm(samples, k, stream_rng(seed, k as u64).gen()),
        gmm_parameter_count,
    )
}

pub fn mdl_select_moe(child: &[f64], parent: &[f64], k_max: usize, seed: u64) -> Result<MdlSelection<MixtureOfExperts>> {
    mdl_select(
        child.len(),
        k_max,
        |k| fit_moe(child, parent, k, stream_rng(seed, k as u64).gen()),
        moe_parameter_count,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DensityConfig {
    pub k_max: usize,
    pub seed: u64,
}

impl Default for DensityConfig {
    fn default() -> Self {
        Self { k_max: 8, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeModel {
    pub child: usize,
    pub parent: usize,
    pub model: MixtureOfExperts,
}

/// `q(x) = |det W| q(s_root) prod_u q(s_u | s_parent(u))` with `s = W x`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeDensityModel {
    pub version: u32,
    pub w: DemixingMatrix,
    pub tree: SpanningTree,
    pub root: usize,
    pub root_model: GaussianMixture,
    pub edge_models: Vec<EdgeModel>,
}

impl TreeDensityModel {
    pub fn m(&self) -> usize {
        self.w.dim()
    }

    pub fn dtree(&self) -> Result<DirectedTree> {
        root_tree(&self.tree, self.root)
    }

    /// Checks that there is exactly one edge model per non-root vertex and
    /// that it conditions on the vertex's parent.
    pub fn validate(&self) -> Result<()> {
        if self.version != MODEL_FORMAT_VERSION {
            return Err(TcaError::InvalidConfig(format!("unsupported model version {}", self.version)));
        }
        if self.tree.m() != self.m() {
            return Err(TcaError::DimensionMismatch {
                expected: self.m(),
                actual: self.tree.m(),
            });
        }
        let dtree = self.dtree()?;
        self.root_model.validate()?;
        if self.edge_models.len() != self.m() - 1 {
            return Err(TcaError::InvalidTree(format!(
                "{} edge models for {} non-root vertices",
                self.edge_models.len(),
                self.m() - 1
            )));
        }
        let mut seen = vec![false; self.m()];
        for e in &self.edge_models {
            if e.child >= self.m() || dtree.parent(e.child) != Some(e.parent) || seen[e.child] {
                return Err(TcaError::InvalidTree(format!(
                    "edge model {} <- {} does not match the rooted tree",
                    e.child, e.parent
                )));
            }
            seen[e.child] = true;
            e.model.validate()?;
        }
        Ok(())
    }

    /// Per-sample log-densities of `x`, Jacobian included.
    pub fn log_densities(&self, data: &Dataset) -> Result<Vec<f64>> {
        if data.m() != self.m() {
            return Err(TcaError::DimensionMismatch {
                expected: self.m(),
                actual: data.m(),
            });
        }
        let s = transform_sources(&self.w, data)?;
        let jac = self.w.log_abs_det();
        let root = s.component(self.root);
        let mut out: Vec<f64> = root.iter().map(|&v| self.root_model.log_density(v) + jac).collect();
        for e in &self.edge_models {
            let (c, p) = (s.component(e.child), s.component(e.parent));
            for (i, o) in out.iter_mut().enumerate() {
                *o += e.model.log_density(c[i], p[i]);
            }
        }
        Ok(out)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| TcaError::io(format!("writing {}", path.display()), e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| TcaError::io(format!("reading {}", path.display()), e))?;
        let model: Self = serde_json::from_str(&text)?;
        model.validate()?;
        Ok(model)
    }
}

/// Mean held-out log-likelihood `(1/N) sum_i log q(x_i)`.
pub fn log_likelihood(model: &TreeDensityModel, data: &Dataset) -> Result<f64> {
    let v = model.log_densities(data)?;
    Ok(v.iter().sum::<f64>() / v.len() as f64)
}

/// Fits the root mixture and every edge's mixture of experts on `s = W x`.
/// The root is the vertex with the largest incident Gaussian edge
/// information.
pub fn fit_tree_density(
    data: &Dataset,
    w: &DemixingMatrix,
    tree: &SpanningTree,
    cfg: &DensityConfig,
) -> Result<TreeDensityModel> {
    if cfg.k_max == 0 {
        return Err(TcaError::InvalidConfig("K_max must be at least 1".into()));
    }
    if tree.m() != data.m() || w.dim() != data.m() {
        return Err(TcaError::DimensionMismatch {
            expected: data.m(),
            actual: if tree.m() != data.m() { tree.m() } else { w.dim() },
        });
    }
    let s = transform_sources(w, data)?;
    let centered = s.centered();
    let sigma = centered.samples().transpose() * centered.samples() / s.n() as f64;
    let mi = WeightMatrix::from_fn(s.m(), |u, v| gaussian_pairwise_mi(&sigma, u, v).unwrap_or(0.0))?;
    let root = choose_root(tree, &mi);
    let dtree = root_tree(tree, root)?;

    let root_model = mdl_select_gmm(s.component(root), cfg.k_max, stream_rng(cfg.seed, root as u64).gen())?
        .fit
        .model;
    let edge_models = dtree
        .edges()
        .par_iter()
        .map(|&(child, parent)| {
            let sel = mdl_select_moe(
                s.component(child),
                s.component(parent),
                cfg.k_max,
                stream_rng(cfg.seed, child as u64).gen(),
            )?;
            log::debug!("edge {parent} -> {child}: K = {}", sel.k());
            Ok(EdgeModel {
                child,
                parent,
                model: sel.fit.model,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TreeDensityModel {
        version: MODEL_FORMAT_VERSION,
        w: w.clone(),
        tree: tree.clone(),
        root,
        root_model,
        edge_models,
    })
}

/// Ancestral sampling of `s`, then `x = W^{-1} s`; one row per sample.
pub fn sample_model(model: &TreeDensityModel, n: usize, seed: u64) -> Result<DMatrix<f64>> {
    if n == 0 {
        return Err(TcaError::InvalidConfig("sample size must be at least 1".into()));
    }
    let m = model.m();
    let dtree = model.dtree()?;
    let mut by_child: Vec<Option<&MixtureOfExperts>> = vec![None; m];
    for e in &model.edge_models {
        by_child[e.child] = Some(&e.model);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = DMatrix::zeros(n, m);
    for i in 0..n {
        for &u in dtree.order() {
            s[(i, u)] = match dtree.parent(u) {
                None => model.root_model.sample(&mut rng),
                Some(p) => {
                    let moe = by_child[u].ok_or_else(|| TcaError::InvalidTree(format!("no edge model for vertex {u}")))?;
                    moe.sample(s[(i, p)], &mut rng)
                }
            };
        }
    }
    let a = model.w.inverse()?;
    Ok(s * a.transpose())
}
