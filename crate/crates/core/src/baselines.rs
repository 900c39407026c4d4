//! Reference density estimators compared against the tree model.

use std::fmt;
use std::str::FromStr;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{estimate_covariance, transform_sources, Dataset, DemixingMatrix};
use crate::density::{fit_tree_density, kmeans_labels, log_likelihood, mdl_select_gmm, DensityConfig, TreeDensityModel};
use crate::error::{Result, TcaError};
use crate::kgv::{incomplete_cholesky, pairwise_kgv_mi, KgvConfig};
use crate::mixture::{log_sum_exp, GaussianMixture};
use crate::optimizer::ica_initialize;
use crate::synth::stream_rng;
use crate::tree::{max_weight_spanning_tree, WeightMatrix};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// A normalized density on `R^m`.
pub trait Density: Send + Sync {
    fn log_densities(&self, data: &Dataset) -> Result<Vec<f64>>;

    fn mean_log_likelihood(&self, data: &Dataset) -> Result<f64> {
        let v = self.log_densities(data)?;
        Ok(v.iter().sum::<f64>() / v.len() as f64)
    }
}

impl Density for TreeDensityModel {
    fn log_densities(&self, data: &Dataset) -> Result<Vec<f64>> {
        TreeDensityModel::log_densities(self, data)
    }

    fn mean_log_likelihood(&self, data: &Dataset) -> Result<f64> {
        log_likelihood(self, data)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaselineKind {
    /// Full-covariance Gaussian.
    Gau,
    /// Product of univariate mixtures on the raw coordinates.
    Ind,
    /// Mixture tree model on the standardized raw coordinates, with the
    /// tree chosen by pairwise kernel dependence.
    Cl,
    /// Product of univariate mixtures on ICA components.
    Ica,
    /// Full-covariance multivariate Gaussian mixture.
    Gmm,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 5] = [
        BaselineKind::Gau,
        BaselineKind::Ind,
        BaselineKind::Cl,
        BaselineKind::Ica,
        BaselineKind::Gmm,
    ];
}

impl fmt::Display for BaselineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BaselineKind::Gau => "gau",
            BaselineKind::Ind => "ind",
            BaselineKind::Cl => "cl",
            BaselineKind::Ica => "ica",
            BaselineKind::Gmm => "gmm",
        })
    }
}

impl FromStr for BaselineKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|k| k.to_string() == s.to_ascii_lowercase())
            .ok_or_else(|| format!("unknown baseline '{s}' (expected gau, ind, cl, ica or gmm)"))
    }
}

fn gaussian_log_pdf(x: &DVector<f64>, mean: &DVector<f64>, chol: &Cholesky<f64, Dyn>, log_det: f64) -> f64 {
    let z = chol.l().solve_lower_triangular(&(x - mean)).expect("triangular factor is invertible");
    -0.5 * (x.len() as f64 * LN_2PI + log_det + z.norm_squared())
}

fn chol_log_det(chol: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

#[derive(Debug, Clone)]
pub struct GaussianDensity {
    mean: DVector<f64>,
    chol: Cholesky<f64, Dyn>,
    log_det: f64,
}

impl GaussianDensity {
    pub fn fit(data: &Dataset) -> Result<Self> {
        let cov = estimate_covariance(data)?;
        let chol = Cholesky::new(cov.sigma().clone()).ok_or(TcaError::NotSpd)?;
        let log_det = chol_log_det(&chol);
        Ok(Self {
            mean: DVector::from_vec(data.means()),
            chol,
            log_det,
        })
    }
}

impl Density for GaussianDensity {
    fn log_densities(&self, data: &Dataset) -> Result<Vec<f64>> {
        check_dim(self.mean.len(), data)?;
        Ok((0..data.n())
            .map(|i| gaussian_log_pdf(&data.samples().row(i).transpose(), &self.mean, &self.chol, self.log_det))
            .collect())
    }
}

fn check_dim(m: usize, data: &Dataset) -> Result<()> {
    if data.m() != m {
        return Err(TcaError::DimensionMismatch {
            expected: m,
            actual: data.m(),
        });
    }
    Ok(())
}

/// `|det W| prod_j p_j((W x)_j)`.
#[derive(Debug, Clone)]
pub struct IndependentDensity {
    pub w: DemixingMatrix,
    pub marginals: Vec<GaussianMixture>,
}

impl IndependentDensity {
    pub fn fit(data: &Dataset, w: DemixingMatrix, cfg: &DensityConfig) -> Result<Self> {
        let s = transform_sources(&w, data)?;
        let marginals = (0..s.m())
            .map(|j| Ok(mdl_select_gmm(s.component(j), cfg.k_max, stream_rng(cfg.seed, j as u64).gen())?.fit.model))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { w, marginals })
    }
}

impl Density for IndependentDensity {
    fn log_densities(&self, data: &Dataset) -> Result<Vec<f64>> {
        check_dim(self.w.dim(), data)?;
        let s = transform_sources(&self.w, data)?;
        let jac = self.w.log_abs_det();
        let mut out = vec![jac; s.n()];
        for (j, g) in self.marginals.iter().enumerate() {
            for (o, &v) in out.iter_mut().zip(s.component(j)) {
                *o += g.log_density(v);
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone)]
pub struct MultivariateMixture {
    weights: Vec<f64>,
    means: Vec<DVector<f64>>,
    chols: Vec<Cholesky<f64, Dyn>>,
    log_dets: Vec<f64>,
}

impl MultivariateMixture {
    pub fn k(&self) -> usize {
        self.weights.len()
    }

    fn log_joint(&self, x: &DVector<f64>, out: &mut [f64]) {
        for (c, o) in out.iter_mut().enumerate() {
            *o = self.weights[c].ln() + gaussian_log_pdf(x, &self.means[c], &self.chols[c], self.log_dets[c]);
        }
    }

    /// Free parameters with full covariances.
    pub fn parameter_count(k: usize, m: usize) -> usize {
        k - 1 + k * m + k * m * (m + 1) / 2
    }

    /// EM from a k-means++ start. Components whose mass falls below `m + 1`
    /// samples are dropped. Covariances get a ridge of `1e-6` times the
    /// average data variance. Returns the model and its total training
    /// log-likelihood.
    pub fn fit(data: &Dataset, k: usize, seed: u64) -> Result<(Self, f64)> {
        let (n, m) = (data.n(), data.m());
        if k == 0 || n < 5 * k * (m + 1) {
            return Err(TcaError::InvalidConfig(format!("{n} samples are too few for a {k}-component mixture in {m} dimensions")));
        }
        let rows: Vec<DVector<f64>> = (0..n).map(|i| data.samples().row(i).transpose()).collect();
        let pts: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().copied().collect()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let labels = if k == 1 { vec![0; n] } else { kmeans_labels(&pts, k, &mut rng) };
        let ridge = 1e-6 * estimate_covariance(data)?.sigma().trace() / m as f64;
        let mut resp = vec![0.0; n * k];
        for (i, &l) in labels.iter().enumerate() {
            resp[i * k + l] = 1.0;
        }
        let mut model = Self::m_step(&rows, &resp, k, ridge)?;
        let mut prev = f64::NEG_INFINITY;
        let mut ll = prev;
        let mut row = vec![0.0; k];
        for _ in 0..200 {
            let kk = model.k();
            resp.resize(n * kk, 0.0);
            row.resize(kk, 0.0);
            ll = 0.0;
            for (i, x) in rows.iter().enumerate() {
                model.log_joint(x, &mut row);
                let lse = log_sum_exp(&row);
                ll += lse;
                for c in 0..kk {
                    resp[i * kk + c] = (row[c] - lse).exp();
                }
            }
            if (ll - prev).abs() <= 1e-7 * ll.abs() {
                break;
            }
            prev = ll;
            model = Self::m_step(&rows, &resp, kk, ridge)?;
        }
        Ok((model, ll))
    }

    fn m_step(rows: &[DVector<f64>], resp: &[f64], k: usize, ridge: f64) -> Result<Self> {
        let (n, m) = (rows.len(), rows[0].len());
        let mut out = Self {
            weights: Vec::new(),
            means: Vec::new(),
            chols: Vec::new(),
            log_dets: Vec::new(),
        };
        for c in 0..k {
            let nk: f64 = (0..n).map(|i| resp[i * k + c]).sum();
            if nk < (m + 1) as f64 {
                continue;
            }
            let mean = rows.iter().enumerate().fold(DVector::zeros(m), |acc, (i, x)| acc + x * resp[i * k + c]) / nk;
            let mut cov = DMatrix::<f64>::zeros(m, m);
            for (i, x) in rows.iter().enumerate() {
                let d = x - &mean;
                cov.ger(resp[i * k + c], &d, &d, 1.0);
            }
            cov /= nk;
            for j in 0..m {
                cov[(j, j)] += ridge;
            }
            let chol = Cholesky::new(cov).ok_or(TcaError::NotSpd)?;
            out.log_dets.push(chol_log_det(&chol));
            out.chols.push(chol);
            out.means.push(mean);
            out.weights.push(nk);
        }
        if out.weights.is_empty() {
            return Err(TcaError::DegenerateComponent {
                index: 0,
                reason: "every mixture component lost its mass".into(),
            });
        }
        let total: f64 = out.weights.iter().sum();
        out.weights.iter_mut().for_each(|w| *w /= total);
        Ok(out)
    }

    /// MDL choice of the component count over `1..=k_max`.
    pub fn fit_mdl(data: &Dataset, k_max: usize, seed: u64) -> Result<Self> {
        let (n, m) = (data.n(), data.m());
        let log_n = (n as f64).ln();
        let mut best: Option<(f64, Self)> = None;
        for k in 1..=k_max.max(1) {
            if n < 5 * k * (m + 1) {
                break;
            }
            let (model, ll) = Self::fit(data, k, stream_rng(seed, k as u64).gen())?;
            let score = -ll + 0.5 * Self::parameter_count(model.k(), m) as f64 * log_n;
            if best.as_ref().map_or(true, |(s, _)| score < *s) {
                best = Some((score, model));
            }
        }
        best.map(|(_, model)| model)
            .ok_or_else(|| TcaError::InvalidConfig(format!("{n} samples are too few for a mixture in {m} dimensions")))
    }
}

impl Density for MultivariateMixture {
    fn log_densities(&self, data: &Dataset) -> Result<Vec<f64>> {
        check_dim(self.means[0].len(), data)?;
        let mut row = vec![0.0; self.k()];
        Ok((0..data.n())
            .map(|i| {
                self.log_joint(&data.samples().row(i).transpose(), &mut row);
                log_sum_exp(&row)
            })
            .collect())
    }
}

/// Mixture tree model on standardized coordinates, tree chosen by maximum
/// pairwise kernel mutual information.
pub fn fit_chow_liu(data: &Dataset, cfg: &DensityConfig) -> Result<TreeDensityModel> {
    let centered = data.centered();
    let m = data.m();
    let sd: Vec<f64> = (0..m)
        .map(|j| (centered.component(j).iter().map(|v| v * v).sum::<f64>() / data.n() as f64).sqrt())
        .collect();
    let w = DemixingMatrix::new(DMatrix::from_fn(m, m, |i, j| if i == j { 1.0 / sd[i] } else { 0.0 }))?;
    let z = transform_sources(&w, &centered)?;
    let kgv = KgvConfig::default();
    let factors = (0..m)
        .map(|j| incomplete_cholesky(z.component(j), &kgv))
        .collect::<Result<Vec<_>>>()?;
    let mut mi = DMatrix::zeros(m, m);
    for u in 0..m {
        for v in (u + 1)..m {
            let x = pairwise_kgv_mi(&factors[u], &factors[v], &kgv)?;
            mi[(u, v)] = x;
            mi[(v, u)] = x;
        }
    }
    let tree = max_weight_spanning_tree(&WeightMatrix::new(mi)?)?;
    fit_tree_density(data, &w, &tree, cfg)
}

pub fn fit_baseline(kind: BaselineKind, data: &Dataset, cfg: &DensityConfig) -> Result<Box<dyn Density>> {
    Ok(match kind {
        BaselineKind::Gau => Box::new(GaussianDensity::fit(data)?),
        BaselineKind::Ind => Box::new(IndependentDensity::fit(data, DemixingMatrix::identity(data.m()), cfg)?),
        BaselineKind::Cl => Box::new(fit_chow_liu(data, cfg)?),
        BaselineKind::Ica => {
            let centered = data.centered();
            let cov = estimate_covariance(&centered)?;
            let ica = ica_initialize(&centered, &cov, cfg.seed)?;
            Box::new(IndependentDensity::fit(data, ica.w, cfg)?)
        }
        BaselineKind::Gmm => Box::new(MultivariateMixture::fit_mdl(data, cfg.k_max, cfg.seed)?),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{sample_tca_instance, GeneratorSpec};

    #[test]
    fn names_round_trip() {
        for k in BaselineKind::ALL {
            assert_eq!(k.to_string().parse::<BaselineKind>().unwrap(), k);
        }
        assert!("tree".parse::<BaselineKind>().is_err());
    }

    #[test]
    fn gaussian_baseline_matches_closed_form() {
        let data = Dataset::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0], vec![2.0, 2.0], vec![-1.0, 0.5], vec![0.5, -1.0]]).unwrap();
        let g = GaussianDensity::fit(&data).unwrap();
        let cov = estimate_covariance(&data).unwrap();
        let s = cov.sigma();
        let det = s[(0, 0)] * s[(1, 1)] - s[(0, 1)] * s[(1, 0)];
        let mean = data.means();
        let x = [0.3, -0.2];
        let d = [x[0] - mean[0], x[1] - mean[1]];
        let q = (s[(1, 1)] * d[0] * d[0] - 2.0 * s[(0, 1)] * d[0] * d[1] + s[(0, 0)] * d[1] * d[1]) / det;
        let expected = -0.5 * (2.0 * LN_2PI + det.ln() + q);
        let got = g.log_densities(&Dataset::from_rows(&[x.to_vec(), x.to_vec()]).unwrap()).unwrap()[0];
        assert!((got - expected).abs() < 1e-12);
    }

    #[test]
    fn mixture_baseline_separates_clusters() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let rows: Vec<Vec<f64>> = (0..600)
            .map(|i| {
                let c = if i % 2 == 0 { 4.0 } else { -4.0 };
                vec![c + rng.gen::<f64>() - 0.5, -c + rng.gen::<f64>() - 0.5]
            })
            .collect();
        let data = Dataset::from_rows(&rows).unwrap();
        let gmm = MultivariateMixture::fit_mdl(&data, 4, 0).unwrap();
        assert!(gmm.k() >= 2);
        let gau = GaussianDensity::fit(&data).unwrap();
        assert!(gmm.mean_log_likelihood(&data).unwrap() > gau.mean_log_likelihood(&data).unwrap() + 1.0);
    }

    #[test]
    fn tree_model_beats_gaussian_on_tree_data() {
        let inst = sample_tca_instance(&GeneratorSpec::tree(4, 2000, 7)).unwrap();
        let test = inst.model.sample(2000, &mut stream_rng(7, 99)).unwrap();
        let cfg = DensityConfig::default();
        let tree = fit_tree_density(&inst.data, &inst.w_true, &inst.tree, &cfg).unwrap();
        let gau = GaussianDensity::fit(&inst.data).unwrap();
        let a = log_likelihood(&tree, &test).unwrap();
        let b = gau.mean_log_likelihood(&test).unwrap();
        assert!(a > b + 0.1, "tree {a} vs gaussian {b}");
    }
}
