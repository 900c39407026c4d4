//! Univariate Gaussian mixtures and scalar-parent mixtures of experts.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, TcaError};

pub const VARIANCE_FLOOR: f64 = 1e-8;
const LN_2PI: f64 = 1.837_877_066_409_345_3;

pub(crate) fn normal_log_pdf(x: f64, mean: f64, var: f64) -> f64 {
    let d = x - mean;
    -0.5 * (LN_2PI + var.ln() + d * d / var)
}

pub(crate) fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Normalizes log-weights in place into probabilities; returns the log
/// normalizer.
pub(crate) fn softmax_in_place(v: &mut [f64]) -> f64 {
    let lse = log_sum_exp(v);
    for x in v.iter_mut() {
        *x = (*x - lse).exp();
    }
    lse
}

pub(crate) fn sample_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (k, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return k;
        }
    }
    probs.len() - 1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianMixture {
    pub weights: Vec<f64>,
    pub means: Vec<f64>,
    pub variances: Vec<f64>,
}

impl GaussianMixture {
    pub fn new(weights: Vec<f64>, means: Vec<f64>, variances: Vec<f64>) -> Result<Self> {
        let g = Self {
            weights,
            means,
            variances,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.weights.len();
        if k == 0 || self.means.len() != k || self.variances.len() != k {
            return Err(TcaError::InvalidConfig("mixture parameter lengths disagree".into()));
        }
        if self.weights.iter().any(|w| !(*w >= 0.0)) || (self.weights.iter().sum::<f64>() - 1.0).abs() > 1e-10 {
            return Err(TcaError::InvalidConfig("mixture weights must form a simplex".into()));
        }
        if let Some(i) = self.variances.iter().position(|v| !(*v >= VARIANCE_FLOOR)) {
            return Err(TcaError::DegenerateComponent {
                index: i,
                reason: format!("variance {} below floor", self.variances[i]),
            });
        }
        Ok(())
    }

    pub fn k(&self) -> usize {
        self.weights.len()
    }

    pub fn log_density(&self, x: f64) -> f64 {
        let terms: Vec<f64> = (0..self.k())
            .map(|k| self.weights[k].ln() + normal_log_pdf(x, self.means[k], self.variances[k]))
            .collect();
        log_sum_exp(&terms)
    }

    pub fn mean(&self) -> f64 {
        self.weights.iter().zip(&self.means).map(|(w, m)| w * m).sum()
    }

    pub fn variance(&self) -> f64 {
        let mu = self.mean();
        (0..self.k())
            .map(|k| self.weights[k] * (self.variances[k] + (self.means[k] - mu).powi(2)))
            .sum()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let k = sample_categorical(&self.weights, rng);
        let z: f64 = StandardNormal.sample(rng);
        self.means[k] + self.variances[k].sqrt() * z
    }

    /// Mixture of `a x + b` for `x` drawn from this mixture.
    pub fn affine(&self, a: f64, b: f64) -> Self {
        Self {
            weights: self.weights.clone(),
            means: self.means.iter().map(|m| a * m + b).collect(),
            variances: self.variances.iter().map(|v| a * a * v).collect(),
        }
    }
}

/// Conditional density of a child given a scalar parent: a softmax gate
/// over affine scores `a_k p + b_k` mixing linear-Gaussian experts
/// `N(slope_k p + intercept_k, variance_k)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureOfExperts {
    pub gate_slopes: Vec<f64>,
    pub gate_intercepts: Vec<f64>,
    pub slopes: Vec<f64>,
    pub intercepts: Vec<f64>,
    pub variances: Vec<f64>,
}

impl MixtureOfExperts {
    pub fn validate(&self) -> Result<()> {
        let k = self.slopes.len();
        let lens = [
            self.gate_slopes.len(),
            self.gate_intercepts.len(),
            self.intercepts.len(),
            self.variances.len(),
        ];
        if k == 0 || lens.iter().any(|&l| l != k) {
            return Err(TcaError::InvalidConfig("expert parameter lengths disagree".into()));
        }
        if let Some(i) = self.variances.iter().position(|v| !(*v >= VARIANCE_FLOOR)) {
            return Err(TcaError::DegenerateComponent {
                index: i,
                reason: format!("variance {} below floor", self.variances[i]),
            });
        }
        Ok(())
    }

    pub fn k(&self) -> usize {
        self.slopes.len()
    }

    pub fn gate(&self, parent: f64) -> Vec<f64> {
        let mut g: Vec<f64> = (0..self.k())
            .map(|k| self.gate_slopes[k] * parent + self.gate_intercepts[k])
            .collect();
        softmax_in_place(&mut g);
        g
    }

    pub fn log_density(&self, child: f64, parent: f64) -> f64 {
        let scores: Vec<f64> = (0..self.k())
            .map(|k| self.gate_slopes[k] * parent + self.gate_intercepts[k])
            .collect();
        let lse = log_sum_exp(&scores);
        let terms: Vec<f64> = (0..self.k())
            .map(|k| {
                scores[k] - lse
                    + normal_log_pdf(child, self.slopes[k] * parent + self.intercepts[k], self.variances[k])
            })
            .collect();
        log_sum_exp(&terms)
    }

    pub fn conditional_mean(&self, parent: f64) -> f64 {
        self.gate(parent)
            .iter()
            .enumerate()
            .map(|(k, g)| g * (self.slopes[k] * parent + self.intercepts[k]))
            .sum()
    }

    pub fn sample<R: Rng + ?Sized>(&self, parent: f64, rng: &mut R) -> f64 {
        let k = sample_categorical(&self.gate(parent), rng);
        let z: f64 = StandardNormal.sample(rng);
        self.slopes[k] * parent + self.intercepts[k] + self.variances[k].sqrt() * z
    }

    /// Density of `(c y + d) | (a p + b)` when `y | p` follows `self`.
    pub fn affine(&self, child_scale: f64, child_shift: f64, parent_scale: f64, parent_shift: f64) -> Self {
        let (c, d, a, b) = (child_scale, child_shift, parent_scale, parent_shift);
        let k = self.k();
        Self {
            gate_slopes: (0..k).map(|i| self.gate_slopes[i] / a).collect(),
            gate_intercepts: (0..k).map(|i| self.gate_intercepts[i] - self.gate_slopes[i] * b / a).collect(),
            slopes: (0..k).map(|i| c * self.slopes[i] / a).collect(),
            intercepts: (0..k)
                .map(|i| c * (self.intercepts[i] - self.slopes[i] * b / a) + d)
                .collect(),
            variances: (0..k).map(|i| c * c * self.variances[i]).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn integrate(f: impl Fn(f64) -> f64, lo: f64, hi: f64, n: usize) -> f64 {
        let h = (hi - lo) / n as f64;
        (0..=n)
            .map(|i| {
                let w = if i == 0 || i == n { 0.5 } else { 1.0 };
                w * f(lo + i as f64 * h)
            })
            .sum::<f64>()
            * h
    }

    #[test]
    fn gmm_integrates_to_one() {
        let g = GaussianMixture::new(vec![0.3, 0.7], vec![-2.0, 1.0], vec![0.5, 2.0]).unwrap();
        let total = integrate(|x| g.log_density(x).exp(), -30.0, 30.0, 60_000);
        assert!((total - 1.0).abs() < 1e-4);
        assert!((g.mean() - 0.1).abs() < 1e-12);
    }

    #[test]
    fn moe_conditionals_integrate_to_one() {
        let m = MixtureOfExperts {
            gate_slopes: vec![0.0, 3.0],
            gate_intercepts: vec![0.0, -0.5],
            slopes: vec![1.0, -0.4],
            intercepts: vec![0.0, 1.0],
            variances: vec![0.1, 0.6],
        };
        for p in [-2.0, -0.5, 0.0, 0.7, 2.5] {
            let total = integrate(|y| m.log_density(y, p).exp(), -30.0, 30.0, 60_000);
            assert!((total - 1.0).abs() < 1e-4);
            let g = m.gate(p);
            assert!((g.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn affine_change_of_variables() {
        let m = MixtureOfExperts {
            gate_slopes: vec![0.0, 2.0],
            gate_intercepts: vec![0.0, 0.3],
            slopes: vec![0.8, -0.2],
            intercepts: vec![0.1, 0.5],
            variances: vec![0.2, 0.4],
        };
        let t = m.affine(2.0, 1.0, 0.5, -0.3);
        let (y, p) = (0.4, -1.1);
        let expected = m.log_density(y, p) - 2.0f64.ln();
        assert!((t.log_density(2.0 * y + 1.0, 0.5 * p - 0.3) - expected).abs() < 1e-12);
        let g = GaussianMixture::new(vec![0.4, 0.6], vec![0.0, 2.0], vec![1.0, 0.3]).unwrap();
        let ga = g.affine(-3.0, 2.0);
        assert!((ga.log_density(-3.0 * 0.7 + 2.0) - (g.log_density(0.7) - 3.0f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn invalid_mixtures_rejected() {
        assert!(GaussianMixture::new(vec![0.5, 0.4], vec![0.0, 1.0], vec![1.0, 1.0]).is_err());
        assert!(matches!(
            GaussianMixture::new(vec![1.0], vec![0.0], vec![0.0]),
            Err(TcaError::DegenerateComponent { .. })
        ));
    }
}
