//! Synthetic problem generators: uniform random trees, tree-structured
//! non-Gaussian sources, random mixing matrices, and treewidth-τ models
//! with exact log-densities.

use std::str::FromStr;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{matrix_from_rows, matrix_rows, Dataset, DemixingMatrix};
use crate::error::{Result, TcaError};
use crate::linalg::condition_number;
use crate::mixture::{log_sum_exp, normal_log_pdf, sample_categorical, softmax_in_place, GaussianMixture, MixtureOfExperts};
use crate::tree::{prufer_decode, SpanningTree};

/// Bumped whenever the catalog or the sampling procedure changes.
pub const GENERATOR_VERSION: u32 = 1;
pub const MAX_TREEWIDTH: usize = 4;
pub const MAX_CONDITION_NUMBER: f64 = 100.0;

/// RNG for an independent stream derived from `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Seed of replication `index` derived from a base seed.
pub fn replicate_seed(base: u64, index: u64) -> u64 {
    stream_rng(base, 1 << 32 | index).next_u64()
}

fn sub_seed(seed: u64, stream: u64) -> u64 {
    stream_rng(seed, stream).next_u64()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EdgeTemplate {
    Crossing,
    VShape,
    Heteroscedastic,
    SplitOnSign,
}

impl EdgeTemplate {
    pub const ALL: [EdgeTemplate; 4] = [
        EdgeTemplate::Crossing,
        EdgeTemplate::VShape,
        EdgeTemplate::Heteroscedastic,
        EdgeTemplate::SplitOnSign,
    ];

    /// Conditional density of the child given the parent. All templates keep
    /// the linear correlation with the parent weak.
    pub fn model(self) -> MixtureOfExperts {
        let (gate_slopes, gate_intercepts, slopes, intercepts, variances): (&[f64], &[f64], &[f64], &[f64], &[f64]) =
            match self {
                // two offset lines of opposite slope, equally likely everywhere
                EdgeTemplate::Crossing => (&[0.0, 0.0], &[0.0, 0.0], &[0.6, -0.6], &[1.0, -1.0], &[0.1, 0.1]),
                // the line followed depends on the sign of the parent
                EdgeTemplate::VShape => (&[-4.0, 4.0], &[0.0, 0.0], &[-0.9, 0.9], &[-0.7, -0.7], &[0.1, 0.1]),
                // noise level switches with the sign of the parent
                EdgeTemplate::Heteroscedastic => (&[-4.0, 4.0], &[0.0, 0.0], &[0.25, 0.25], &[0.0, 0.0], &[0.03, 1.0]),
                // bimodal child for negative parents, a narrow mode otherwise
                EdgeTemplate::SplitOnSign => (
                    &[-4.0, -4.0, 4.0],
                    &[0.0, 0.0, 0.0],
                    &[0.0, 0.0, 0.0],
                    &[-1.2, 1.2, 0.0],
                    &[0.1, 0.1, 0.15],
                ),
            };
        MixtureOfExperts {
            gate_slopes: gate_slopes.to_vec(),
            gate_intercepts: gate_intercepts.to_vec(),
            slopes: slopes.to_vec(),
            intercepts: intercepts.to_vec(),
            variances: variances.to_vec(),
        }
    }
}

impl std::fmt::Display for EdgeTemplate {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EdgeTemplate::Crossing => "crossing",
            EdgeTemplate::VShape => "v-shape",
            EdgeTemplate::Heteroscedastic => "heteroscedastic",
            EdgeTemplate::SplitOnSign => "split-on-sign",
        })
    }
}

/// Non-Gaussian root densities.
pub fn root_catalog() -> Vec<GaussianMixture> {
    let mk = |w: &[f64], m: &[f64], v: &[f64]| GaussianMixture {
        weights: w.to_vec(),
        means: m.to_vec(),
        variances: v.to_vec(),
    };
    vec![
        mk(&[0.5, 0.5], &[-1.0, 1.0], &[0.2, 0.2]),
        mk(&[0.75, 0.25], &[-0.5, 1.5], &[0.3, 0.8]),
        mk(&[0.85, 0.15], &[0.0, 0.0], &[0.4, 4.0]),
        mk(&[1.0 / 3.0; 3], &[-1.5, 0.0, 1.5], &[0.15; 3]),
    ]
}

/// Which edge templates a generator draws from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TemplateFamily {
    /// A uniformly random template per edge.
    #[default]
    Mixed,
    Only(EdgeTemplate),
}

impl FromStr for TemplateFamily {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if s == "mixed" {
            return Ok(TemplateFamily::Mixed);
        }
        EdgeTemplate::ALL
            .into_iter()
            .find(|t| t.to_string() == s)
            .map(TemplateFamily::Only)
            .ok_or_else(|| format!("unknown template family '{s}'"))
    }
}

impl std::fmt::Display for TemplateFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TemplateFamily::Mixed => f.write_str("mixed"),
            TemplateFamily::Only(t) => t.fmt(f),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub m: usize,
    pub n: usize,
    pub treewidth: usize,
    pub family: TemplateFamily,
    pub seed: u64,
}

impl GeneratorSpec {
    pub fn tree(m: usize, n: usize, seed: u64) -> Self {
        Self {
            m,
            n,
            treewidth: 1,
            family: TemplateFamily::Mixed,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.m < 2 {
            return Err(TcaError::InvalidConfig(format!("need m >= 2, got {}", self.m)));
        }
        if self.n < 2 {
            return Err(TcaError::InvalidConfig(format!("need n >= 2, got {}", self.n)));
        }
        if self.treewidth < 1 || self.treewidth > self.m - 1 || self.treewidth > MAX_TREEWIDTH {
            return Err(TcaError::InvalidTreewidth {
                tau: self.treewidth,
                m: self.m,
            });
        }
        Ok(())
    }
}

/// Uniformly random labeled tree on `m` vertices.
pub fn random_spanning_tree(m: usize, seed: u64) -> SpanningTree {
    random_spanning_tree_with(m, &mut ChaCha8Rng::seed_from_u64(seed))
}

pub fn random_spanning_tree_with<R: Rng + ?Sized>(m: usize, rng: &mut R) -> SpanningTree {
    let seq: Vec<usize> = (0..m.saturating_sub(2)).map(|_| rng.gen_range(0..m)).collect();
    prufer_decode(m, &seq)
}

/// Standard normal matrix, redrawn until its condition number is below 100.
pub fn random_mixing_matrix(m: usize, seed: u64) -> DMatrix<f64> {
    random_mixing_matrix_with(m, &mut ChaCha8Rng::seed_from_u64(seed))
}

pub fn random_mixing_matrix_with<R: Rng + ?Sized>(m: usize, rng: &mut R) -> DMatrix<f64> {
    loop {
        let a = DMatrix::from_fn(m, m, |_, _| -> f64 { StandardNormal.sample(rng) });
        if condition_number(&a) < MAX_CONDITION_NUMBER {
            return a;
        }
    }
}

/// Child given a parent vector: softmax gate over affine scores mixing
/// linear-Gaussian experts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearGatedExperts {
    pub gate_weights: Vec<Vec<f64>>,
    pub gate_bias: Vec<f64>,
    pub expert_weights: Vec<Vec<f64>>,
    pub expert_bias: Vec<f64>,
    pub variances: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl LinearGatedExperts {
    pub fn from_scalar(moe: &MixtureOfExperts) -> Self {
        Self {
            gate_weights: moe.gate_slopes.iter().map(|&a| vec![a]).collect(),
            gate_bias: moe.gate_intercepts.clone(),
            expert_weights: moe.slopes.iter().map(|&a| vec![a]).collect(),
            expert_bias: moe.intercepts.clone(),
            variances: moe.variances.clone(),
        }
    }

    pub fn k(&self) -> usize {
        self.variances.len()
    }

    pub fn gate(&self, parents: &[f64]) -> Vec<f64> {
        let mut g: Vec<f64> = (0..self.k())
            .map(|k| dot(&self.gate_weights[k], parents) + self.gate_bias[k])
            .collect();
        softmax_in_place(&mut g);
        g
    }

    pub fn log_density(&self, child: f64, parents: &[f64]) -> f64 {
        let scores: Vec<f64> = (0..self.k())
            .map(|k| dot(&self.gate_weights[k], parents) + self.gate_bias[k])
            .collect();
        let lse = log_sum_exp(&scores);
        let terms: Vec<f64> = (0..self.k())
            .map(|k| {
                let mean = dot(&self.expert_weights[k], parents) + self.expert_bias[k];
                scores[k] - lse + normal_log_pdf(child, mean, self.variances[k])
            })
            .collect();
        log_sum_exp(&terms)
    }

    pub fn conditional_mean(&self, parents: &[f64]) -> f64 {
        self.gate(parents)
            .iter()
            .enumerate()
            .map(|(k, g)| g * (dot(&self.expert_weights[k], parents) + self.expert_bias[k]))
            .sum()
    }

    pub fn sample<R: Rng + ?Sized>(&self, parents: &[f64], rng: &mut R) -> f64 {
        let k = sample_categorical(&self.gate(parents), rng);
        let z: f64 = StandardNormal.sample(rng);
        dot(&self.expert_weights[k], parents) + self.expert_bias[k] + self.variances[k].sqrt() * z
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VertexModel {
    Root(GaussianMixture),
    Conditional {
        parents: Vec<usize>,
        model: LinearGatedExperts,
    },
}

impl VertexModel {
    pub fn parents(&self) -> &[usize] {
        match self {
            VertexModel::Root(_) => &[],
            VertexModel::Conditional { parents, .. } => parents,
        }
    }
}

/// A directed generative model over raw sources, the affine map that
/// standardizes them, and the mixing matrix `x = A s`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorModel {
    pub version: u32,
    /// Vertices in ancestral order.
    pub order: Vec<usize>,
    pub vertices: Vec<VertexModel>,
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
    mixing: Vec<Vec<f64>>,
}

impl GeneratorModel {
    pub fn m(&self) -> usize {
        self.vertices.len()
    }

    pub fn mixing(&self) -> DMatrix<f64> {
        matrix_from_rows(&self.mixing).expect("square by construction")
    }

    pub fn demixing(&self) -> Result<DemixingMatrix> {
        let a = self.mixing();
        let w = a.try_inverse().ok_or(TcaError::SingularMatrix { det: 0.0 })?;
        DemixingMatrix::new(w)
    }

    fn sample_raw<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> DMatrix<f64> {
        let m = self.m();
        let mut raw = DMatrix::zeros(n, m);
        let mut parent_vals = Vec::with_capacity(MAX_TREEWIDTH);
        for i in 0..n {
            for &v in &self.order {
                raw[(i, v)] = match &self.vertices[v] {
                    VertexModel::Root(g) => g.sample(rng),
                    VertexModel::Conditional { parents, model } => {
                        parent_vals.clear();
                        parent_vals.extend(parents.iter().map(|&p| raw[(i, p)]));
                        model.sample(&parent_vals, rng)
                    }
                };
            }
        }
        raw
    }

    fn standardize(&self, raw: &mut DMatrix<f64>) {
        for (j, mut col) in raw.column_iter_mut().enumerate() {
            col.add_scalar_mut(-self.shift[j]);
            col /= self.scale[j];
        }
    }

    /// Fresh standardized sources (rows are observations).
    pub fn sample_sources<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> DMatrix<f64> {
        let mut raw = self.sample_raw(n, rng);
        self.standardize(&mut raw);
        raw
    }

    /// Fresh observations `x = A s`.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Dataset> {
        let s = self.sample_sources(n, rng);
        Dataset::new(s * self.mixing().transpose())
    }

    /// Log-density of one standardized source vector.
    pub fn log_density_sources(&self, s: &[f64]) -> f64 {
        let raw: Vec<f64> = (0..self.m()).map(|j| s[j] * self.scale[j] + self.shift[j]).collect();
        let mut total: f64 = self.scale.iter().map(|c| c.ln()).sum();
        let mut parent_vals = Vec::with_capacity(MAX_TREEWIDTH);
        for (v, vm) in self.vertices.iter().enumerate() {
            total += match vm {
                VertexModel::Root(g) => g.log_density(raw[v]),
                VertexModel::Conditional { parents, model } => {
                    parent_vals.clear();
                    parent_vals.extend(parents.iter().map(|&p| raw[p]));
                    model.log_density(raw[v], &parent_vals)
                }
            };
        }
        total
    }

    /// Mean log-density of the observations under the generating model.
    pub fn mean_log_likelihood(&self, data: &Dataset) -> Result<f64> {
        if data.m() != self.m() {
            return Err(TcaError::DimensionMismatch {
                expected: self.m(),
                actual: data.m(),
            });
        }
        let w = self.demixing()?;
        let s = data.samples() * w.matrix().transpose();
        let total: f64 = s
            .row_iter()
            .map(|r| {
                let row: Vec<f64> = r.iter().copied().collect();
                self.log_density_sources(&row)
            })
            .sum();
        Ok(total / data.n() as f64 + w.log_abs_det())
    }

    /// Edges of the moral graph (parent-child and co-parent pairs).
    pub fn moral_edges(&self) -> Vec<(usize, usize)> {
        let mut edges = Vec::new();
        for (v, vm) in self.vertices.iter().enumerate() {
            let ps = vm.parents();
            for (i, &p) in ps.iter().enumerate() {
                edges.push((p.min(v), p.max(v)));
                for &q in &ps[i + 1..] {
                    edges.push((p.min(q), p.max(q)));
                }
            }
        }
        edges.sort_unstable();
        edges.dedup();
        edges
    }

    /// The undirected tree when every vertex has at most one parent.
    pub fn tree(&self) -> Option<SpanningTree> {
        if self.vertices.iter().any(|v| v.parents().len() > 1) {
            return None;
        }
        SpanningTree::new(self.m(), self.moral_edges()).ok()
    }

    fn finish<R: Rng + ?Sized>(
        order: Vec<usize>,
        vertices: Vec<VertexModel>,
        mixing: &DMatrix<f64>,
        n: usize,
        rng: &mut R,
    ) -> Result<(Self, DMatrix<f64>)> {
        let m = vertices.len();
        let mut model = Self {
            version: GENERATOR_VERSION,
            order,
            vertices,
            shift: vec![0.0; m],
            scale: vec![1.0; m],
            mixing: matrix_rows(mixing),
        };
        let mut raw = model.sample_raw(n, rng);
        for j in 0..m {
            let (mean, std) = crate::data::mean_and_std(raw.column(j).as_slice());
            if !(std > 0.0) {
                return Err(TcaError::DegenerateData(format!("generated component {j} is constant")));
            }
            model.shift[j] = mean;
            model.scale[j] = std;
        }
        model.standardize(&mut raw);
        Ok((model, raw))
    }
}

/// Generated tree-structured problem with its ground truth.
#[derive(Debug, Clone)]
pub struct TcaInstance {
    pub spec: GeneratorSpec,
    pub data: Dataset,
    pub w_true: DemixingMatrix,
    pub tree: SpanningTree,
    pub sources: Dataset,
    pub model: GeneratorModel,
}

/// Treewidth-τ problem; `model` evaluates the exact generating log-density.
#[derive(Debug, Clone)]
pub struct TreewidthInstance {
    pub spec: GeneratorSpec,
    pub data: Dataset,
    pub mixing: DMatrix<f64>,
    pub model: GeneratorModel,
}

fn random_sign<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    if rng.gen_bool(0.5) {
        1.0
    } else {
        -1.0
    }
}

/// Samples a random tree, catalog conditionals on its edges, standardized
/// sources and mixed observations.
pub fn sample_tca_instance(spec: &GeneratorSpec) -> Result<TcaInstance> {
    spec.validate()?;
    if spec.treewidth != 1 {
        return Err(TcaError::InvalidTreewidth {
            tau: spec.treewidth,
            m: spec.m,
        });
    }
    let m = spec.m;
    let tree = random_spanning_tree(m, sub_seed(spec.seed, 0));
    let mut rng = stream_rng(spec.seed, 1);
    let roots = root_catalog();
    let root = rng.gen_range(0..m);
    let mut vertices = vec![VertexModel::Root(roots[rng.gen_range(0..roots.len())].clone()); m];
    let adj = tree.adjacency();
    let mut order = vec![root];
    let mut head = 0;
    let mut seen = vec![false; m];
    seen[root] = true;
    while head < order.len() {
        let u = order[head];
        head += 1;
        for &v in &adj[u] {
            if seen[v] {
                continue;
            }
            seen[v] = true;
            order.push(v);
            let template = match spec.family {
                TemplateFamily::Mixed => EdgeTemplate::ALL[rng.gen_range(0..EdgeTemplate::ALL.len())],
                TemplateFamily::Only(t) => t,
            };
            let moe = template.model().affine(random_sign(&mut rng), 0.0, 1.0, 0.0);
            vertices[v] = VertexModel::Conditional {
                parents: vec![u],
                model: LinearGatedExperts::from_scalar(&moe),
            };
        }
    }
    let mixing = random_mixing_matrix(m, sub_seed(spec.seed, 2));
    let (model, sources) = GeneratorModel::finish(order, vertices, &mixing, spec.n, &mut stream_rng(spec.seed, 3))?;
    let data = Dataset::new(&sources * mixing.transpose())?;
    Ok(TcaInstance {
        spec: *spec,
        data,
        w_true: model.demixing()?,
        tree,
        sources: Dataset::new(sources)?,
        model,
    })
}

/// Random k-tree of width τ: a (τ+1)-clique, then each new vertex joins a
/// random existing τ-clique, which becomes its parent set.
fn random_k_tree<R: Rng + ?Sized>(m: usize, tau: usize, rng: &mut R) -> (Vec<usize>, Vec<Vec<usize>>) {
    let mut order: Vec<usize> = (0..m).collect();
    order.shuffle(rng);
    let mut parents = vec![Vec::new(); m];
    let mut cliques: Vec<Vec<usize>> = Vec::new();
    for (i, &v) in order.iter().enumerate().take(tau + 1) {
        parents[v] = order[..i].to_vec();
    }
    let base = &order[..=tau];
    for skip in 0..=tau {
        cliques.push(base.iter().enumerate().filter(|&(k, _)| k != skip).map(|(_, &x)| x).collect());
    }
    for &v in &order[tau + 1..] {
        let c = cliques[rng.gen_range(0..cliques.len())].clone();
        for skip in 0..c.len() {
            let mut nc: Vec<usize> = c.iter().enumerate().filter(|&(k, _)| k != skip).map(|(_, &x)| x).collect();
            nc.push(v);
            cliques.push(nc);
        }
        parents[v] = c;
    }
    (order, parents)
}

fn random_conditional<R: Rng + ?Sized>(q: usize, rng: &mut R) -> LinearGatedExperts {
    let k = 2;
    let qs = (q as f64).sqrt();
    let normal = |rng: &mut R| -> f64 { StandardNormal.sample(rng) };
    LinearGatedExperts {
        gate_weights: (0..k).map(|_| (0..q).map(|_| 3.0 * normal(rng) / qs).collect()).collect(),
        gate_bias: (0..k).map(|_| normal(rng)).collect(),
        expert_weights: (0..k)
            .map(|_| (0..q).map(|_| random_sign(rng) * rng.gen_range(0.3..0.8) / qs).collect())
            .collect(),
        expert_bias: (0..k).map(|_| 0.5 * normal(rng)).collect(),
        variances: (0..k).map(|_| rng.gen_range(0.1..0.5)).collect(),
    }
}

/// Samples a treewidth-τ directed model with gated linear-Gaussian
/// conditionals, standardized sources and mixed observations. At τ = 1
/// this is the tree-structured sampler of [`sample_tca_instance`].
pub fn sample_treewidth_instance(spec: &GeneratorSpec) -> Result<TreewidthInstance> {
    spec.validate()?;
    if spec.treewidth == 1 {
        let inst = sample_tca_instance(spec)?;
        return Ok(TreewidthInstance {
            spec: *spec,
            data: inst.data,
            mixing: random_mixing_matrix(spec.m, sub_seed(spec.seed, 2)),
            model: inst.model,
        });
    }
    let m = spec.m;
    let mut rng = stream_rng(spec.seed, 1);
    let (order, parents) = random_k_tree(m, spec.treewidth, &mut rng);
    let roots = root_catalog();
    let vertices: Vec<VertexModel> = parents
        .into_iter()
        .map(|ps| {
            if ps.is_empty() {
                VertexModel::Root(roots[rng.gen_range(0..roots.len())].clone())
            } else {
                let model = random_conditional(ps.len(), &mut rng);
                VertexModel::Conditional { parents: ps, model }
            }
        })
        .collect();
    let mixing = random_mixing_matrix(m, sub_seed(spec.seed, 2));
    let (model, sources) = GeneratorModel::finish(order, vertices, &mixing, spec.n, &mut stream_rng(spec.seed, 3))?;
    let data = Dataset::new(sources * mixing.transpose())?;
    Ok(TreewidthInstance {
        spec: *spec,
        data,
        mixing,
        model,
    })
}

/// Ground truth written next to a generated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthFile {
    pub generator_version: u32,
    pub spec: GeneratorSpec,
    pub w: DemixingMatrix,
    pub tree: Option<SpanningTree>,
    pub model: GeneratorModel,
}

impl TruthFile {
    pub fn from_model(spec: &GeneratorSpec, model: &GeneratorModel) -> Result<Self> {
        Ok(Self {
            generator_version: GENERATOR_VERSION,
            spec: *spec,
            w: model.demixing()?,
            tree: model.tree(),
            model: model.clone(),
        })
    }

    pub fn write(&self, path: &std::path::Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| TcaError::io(format!("writing {}", path.display()), e))
    }

    pub fn read(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| TcaError::io(format!("reading {}", path.display()), e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::estimate_covariance;
    use crate::gaussian::gaussian_t_mi;
    use crate::tree::enumerate_spanning_trees;

    #[test]
    fn tree_sampler_is_uniform_and_deterministic() {
        assert_eq!(random_spanning_tree(2, 9).edges(), &[(0, 1)]);
        assert_eq!(random_spanning_tree(7, 5), random_spanning_tree(7, 5));
        let trees = enumerate_spanning_trees(4);
        let mut counts = vec![0usize; trees.len()];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let draws = 100_000;
        for _ in 0..draws {
            let t = random_spanning_tree_with(4, &mut rng);
            counts[trees.iter().position(|x| *x == t).unwrap()] += 1;
        }
        let p = 1.0 / 16.0;
        let sd = (draws as f64 * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c as f64 - draws as f64 * p).abs() < 3.0 * sd, "{c}");
        }
    }

    #[test]
    fn mixing_matrices() {
        assert_eq!(random_mixing_matrix(5, 3), random_mixing_matrix(5, 3));
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut sum = 0.0;
        let draws = 10_000;
        for _ in 0..draws / 4 {
            let a = random_mixing_matrix_with(2, &mut rng);
            assert!(condition_number(&a) < 100.0);
            sum += a.sum();
        }
        // the condition-number filter is sign symmetric, so entries stay centered
        let mean = sum / draws as f64;
        assert!(mean.abs() < 3.0 / (draws as f64).sqrt(), "{mean}");
    }

    fn excess_kurtosis_and_skew(v: &[f64]) -> (f64, f64) {
        let (mean, std) = crate::data::mean_and_std(v);
        let n = v.len() as f64;
        let m3 = v.iter().map(|x| ((x - mean) / std).powi(3)).sum::<f64>() / n;
        let m4 = v.iter().map(|x| ((x - mean) / std).powi(4)).sum::<f64>() / n;
        (m4 - 3.0, m3)
    }

    #[test]
    fn every_template_is_non_gaussian() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for t in EdgeTemplate::ALL {
            let moe = t.model();
            moe.validate().unwrap();
            let n = 50_000;
            let p: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
            let y: Vec<f64> = p.iter().map(|&x| moe.sample(x, &mut rng)).collect();
            // residual of the best linear predictor
            let (mp, sp) = crate::data::mean_and_std(&p);
            let (my, _) = crate::data::mean_and_std(&y);
            let beta = p.iter().zip(&y).map(|(a, b)| (a - mp) * (b - my)).sum::<f64>() / (n as f64 * sp * sp);
            let resid: Vec<f64> = p.iter().zip(&y).map(|(a, b)| b - my - beta * (a - mp)).collect();
            let (kurt, skew) = excess_kurtosis_and_skew(&resid);
            assert!(kurt.abs() > 0.3 || skew.abs() > 0.3, "{t}: kurtosis {kurt}, skew {skew}");
        }
        for g in root_catalog() {
            g.validate().unwrap();
            let s: Vec<f64> = (0..50_000).map(|_| g.sample(&mut rng)).collect();
            let (kurt, skew) = excess_kurtosis_and_skew(&s);
            assert!(kurt.abs() > 0.3 || skew.abs() > 0.3);
        }
    }

    #[test]
    fn tca_instance_round_trip_and_standardization() {
        let inst = sample_tca_instance(&GeneratorSpec::tree(5, 3000, 4)).unwrap();
        let s = inst.data.samples() * inst.w_true.matrix().transpose();
        assert!((s - inst.sources.samples()).amax() < 1e-12);
        for j in 0..5 {
            let (mean, std) = crate::data::mean_and_std(inst.sources.component(j));
            assert!(mean.abs() < 1e-10);
            assert!((std * std - 1.0).abs() < 0.02);
        }
        assert_eq!(inst.model.tree().unwrap(), inst.tree);
        let again = sample_tca_instance(&GeneratorSpec::tree(5, 3000, 4)).unwrap();
        assert_eq!(again.data, inst.data);
    }

    #[test]
    fn edges_follow_their_templates() {
        let inst = sample_tca_instance(&GeneratorSpec::tree(5, 40_000, 5)).unwrap();
        let model = &inst.model;
        let raw = |j: usize| -> Vec<f64> {
            inst.sources.component(j).iter().map(|s| s * model.scale[j] + model.shift[j]).collect()
        };
        for (c, vm) in model.vertices.iter().enumerate() {
            let VertexModel::Conditional { parents, model: moe } = vm else { continue };
            let p = raw(parents[0]);
            let y = raw(c);
            let mut sorted = p.clone();
            sorted.sort_by(f64::total_cmp);
            for b in 0..10 {
                let lo = sorted[b * p.len() / 10];
                let hi = sorted[((b + 1) * p.len() / 10).min(p.len() - 1)];
                let idx: Vec<usize> = (0..p.len()).filter(|&i| p[i] >= lo && p[i] < hi).collect();
                let k = idx.len() as f64;
                let emp = idx.iter().map(|&i| y[i]).sum::<f64>() / k;
                let theory = idx.iter().map(|&i| moe.conditional_mean(&[p[i]])).sum::<f64>() / k;
                let resid_sd = (idx.iter().map(|&i| (y[i] - moe.conditional_mean(&[p[i]])).powi(2)).sum::<f64>() / k).sqrt();
                assert!((emp - theory).abs() < 4.0 * resid_sd / k.sqrt(), "edge {c} bin {b}: {emp} vs {theory}");
            }
        }
    }

    #[test]
    fn source_covariance_points_to_true_tree() {
        let inst = sample_tca_instance(&GeneratorSpec::tree(6, 5000, 6)).unwrap();
        let sigma = estimate_covariance(&inst.sources).unwrap();
        let truth = gaussian_t_mi(sigma.sigma(), &inst.tree).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut beaten = 0;
        let trials = 200;
        for _ in 0..trials {
            let t = random_spanning_tree_with(6, &mut rng);
            if t != inst.tree && truth < gaussian_t_mi(sigma.sigma(), &t).unwrap() {
                beaten += 1;
            }
        }
        assert!(beaten as f64 >= 0.9 * trials as f64 - 1.0, "{beaten}");
    }

    /// Exact treewidth by dynamic programming over eliminated vertex sets.
    fn exact_treewidth(m: usize, edges: &[(usize, usize)]) -> usize {
        let mut adj = vec![0u32; m];
        for &(u, v) in edges {
            adj[u] |= 1 << v;
            adj[v] |= 1 << u;
        }
        // vertices outside `s ∪ {v}` reachable from v through s
        let q = |s: u32, v: usize| -> usize {
            let mut seen = 1u32 << v;
            let mut stack = vec![v];
            let mut out = 0u32;
            while let Some(x) = stack.pop() {
                let mut nb = adj[x] & !seen;
                while nb != 0 {
                    let y = nb.trailing_zeros() as usize;
                    nb &= nb - 1;
                    seen |= 1 << y;
                    if s & (1 << y) != 0 {
                        stack.push(y);
                    } else {
                        out |= 1 << y;
                    }
                }
            }
            out.count_ones() as usize
        };
        let full = (1u32 << m) - 1;
        let mut tw = vec![usize::MAX; 1 << m];
        tw[0] = 0;
        for s in 0..=full {
            if tw[s as usize] == usize::MAX {
                continue;
            }
            for v in 0..m {
                if s & (1 << v) == 0 {
                    let t = (s | (1 << v)) as usize;
                    let val = tw[s as usize].max(q(s, v));
                    tw[t] = tw[t].min(val);
                }
            }
        }
        tw[full as usize]
    }

    #[test]
    fn treewidth_is_exact() {
        for tau in 1..=4 {
            for m in (tau + 1)..=8 {
                for seed in 0..3 {
                    let spec = GeneratorSpec { m, n: 50, treewidth: tau, family: TemplateFamily::Mixed, seed };
                    let inst = sample_treewidth_instance(&spec).unwrap();
                    assert_eq!(exact_treewidth(m, &inst.model.moral_edges()), tau, "m={m} tau={tau}");
                    assert_eq!(inst.model.tree().is_some(), tau == 1);
                }
            }
        }
        let bad = GeneratorSpec { m: 3, n: 50, treewidth: 3, family: TemplateFamily::Mixed, seed: 0 };
        assert!(matches!(sample_treewidth_instance(&bad), Err(TcaError::InvalidTreewidth { .. })));
    }

    #[test]
    fn treewidth_one_matches_tree_sampler() {
        let spec = GeneratorSpec::tree(5, 200, 12);
        let a = sample_treewidth_instance(&spec).unwrap();
        let b = sample_tca_instance(&spec).unwrap();
        assert_eq!(a.data.samples(), b.data.samples());
        assert_eq!(a.model.tree(), Some(b.tree));
        let w = b.w_true.matrix();
        assert!((w * &a.mixing - DMatrix::identity(5, 5)).abs().max() < 1e-8);
    }

    #[test]
    fn generator_density_is_normalized() {
        let spec = GeneratorSpec { m: 4, n: 5000, treewidth: 2, family: TemplateFamily::Mixed, seed: 8 };
        let inst = sample_treewidth_instance(&spec).unwrap();
        // importance sampling from a widened Gaussian fitted to the data
        let sigma = estimate_covariance(&inst.data).unwrap();
        let mean = inst.data.means();
        let proposal_sqrt = sigma.sqrt() * 1.6;
        let prop_cov = &proposal_sqrt * &proposal_sqrt;
        let prop_inv = prop_cov.clone().try_inverse().unwrap();
        let log_norm = -0.5 * (4.0 * (2.0 * std::f64::consts::PI).ln() + crate::linalg::spd_log_det(&prop_cov).unwrap());
        let w = inst.model.demixing().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let draws = 200_000;
        let mut total = 0.0;
        for _ in 0..draws {
            let z = nalgebra::DVector::from_fn(4, |_, _| -> f64 { StandardNormal.sample(&mut rng) });
            let d = &proposal_sqrt * z;
            let x: Vec<f64> = (0..4).map(|j| d[j] + mean[j]).collect();
            let log_q = log_norm - 0.5 * (d.transpose() * &prop_inv * &d)[(0, 0)];
            let s = w.matrix() * nalgebra::DVector::from_column_slice(&x);
            let log_p = inst.model.log_density_sources(s.as_slice()) + w.log_abs_det();
            total += (log_p - log_q).exp();
        }
        let estimate = total / draws as f64;
        assert!((estimate - 1.0).abs() < 0.02, "{estimate}");
    }

    #[test]
    fn truth_file_round_trip() {
        let inst = sample_tca_instance(&GeneratorSpec::tree(4, 100, 10)).unwrap();
        let truth = TruthFile::from_model(&inst.spec, &inst.model).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("truth.json");
        truth.write(&path).unwrap();
        let back = TruthFile::read(&path).unwrap();
        assert_eq!(back, truth);
        assert_eq!(back.tree.as_ref(), Some(&inst.tree));
        let fresh = back.model.sample(10, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(fresh.m(), 4);
    }

    #[test]
    fn family_parsing() {
        assert_eq!("mixed".parse::<TemplateFamily>().unwrap(), TemplateFamily::Mixed);
        for t in EdgeTemplate::ALL {
            assert_eq!(t.to_string().parse::<TemplateFamily>().unwrap(), TemplateFamily::Only(t));
        }
        assert!("gaussian".parse::<TemplateFamily>().is_err());
    }
}
