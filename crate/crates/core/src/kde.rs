//! Gaussian kernel density estimates on regular grids, the entropy
//! estimates built from them, and the KDE tree contrast `J^E`.
//!
//! Samples are linearly binned onto the grid and convolved with the sampled
//! Gaussian kernel by FFT. Two-dimensional estimates use the product kernel,
//! so the 2-D convolution is two passes of 1-D convolutions.

use std::cell::RefCell;
use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::DMatrix;
use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::cache::{Memo, RowKey};
use crate::contrast::Contrast;
use crate::data::{mean_and_std, project_row, Dataset, DemixingMatrix};
use crate::error::{Result, TcaError};
use crate::tree::{SpanningTree, WeightMatrix};

/// Density values below this contribute nothing to `-f log f`.
pub const DENSITY_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KdeConfig {
    /// Kernel bandwidth `h`, in the units of the data.
    pub bandwidth: f64,
    /// Grid points per axis; a power of two.
    pub grid_points: usize,
    /// Grid extension beyond the data range, in bandwidths.
    pub grid_margin: f64,
}

impl Default for KdeConfig {
    fn default() -> Self {
        Self {
            bandwidth: 0.125,
            grid_points: 256,
            grid_margin: 3.0,
        }
    }
}

impl KdeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.bandwidth > 0.0 && self.bandwidth.is_finite()) {
            return Err(TcaError::InvalidConfig(format!(
                "bandwidth must be positive, got {}",
                self.bandwidth
            )));
        }
        if self.grid_points < 16 || !self.grid_points.is_power_of_two() {
            return Err(TcaError::InvalidConfig(format!(
                "grid points must be a power of two >= 16, got {}",
                self.grid_points
            )));
        }
        if !(self.grid_margin >= 0.0) {
            return Err(TcaError::InvalidConfig("grid margin must be >= 0".into()));
        }
        Ok(())
    }
}

/// A regular 1-D mesh `lo + k * step`, `k = 0..len`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridAxis {
    pub lo: f64,
    pub step: f64,
    pub len: usize,
}

impl GridAxis {
    pub fn point(&self, k: usize) -> f64 {
        self.lo + k as f64 * self.step
    }

    pub fn hi(&self) -> f64 {
        self.point(self.len - 1)
    }

    /// Mesh covering the samples plus `margin * h * max(std, 1)` on each side.
    pub fn covering(samples: &[f64], cfg: &KdeConfig) -> Result<Self> {
        let (min, max) = samples
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
        if !(min.is_finite() && max.is_finite()) {
            return Err(TcaError::DegenerateData("non-finite samples".into()));
        }
        let (_, std) = mean_and_std(samples);
        if !(max - min > 1e-12 * max.abs().max(min.abs()).max(1.0)) {
            return Err(TcaError::DegenerateData("all samples identical".into()));
        }
        let margin = cfg.grid_margin * cfg.bandwidth * std.max(1.0);
        let lo = min - margin;
        let hi = max + margin;
        Ok(Self {
            lo,
            step: (hi - lo) / (cfg.grid_points - 1) as f64,
            len: cfg.grid_points,
        })
    }
}

/// Density values on the axes' product grid. For 2-D grids the value at
/// `(i, j)` (axis 0 index `i`) lives at `values[i * axes[1].len + j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityGrid {
    pub axes: Vec<GridAxis>,
    pub values: Vec<f64>,
}

impl DensityGrid {
    pub fn cell_volume(&self) -> f64 {
        self.axes.iter().map(|a| a.step).product()
    }

    /// Riemann sum of the density over the grid.
    pub fn total_mass(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.cell_volume()
    }

    /// `-sum f log f * cell` over cells above the density floor.
    pub fn entropy(&self) -> f64 {
        let s: f64 = self
            .values
            .iter()
            .filter(|&&f| f >= DENSITY_FLOOR)
            .map(|&f| f * f.ln())
            .sum();
        -s * self.cell_volume()
    }

    /// Debug dump: one line per grid point, coordinates then density.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        match self.axes.as_slice() {
            [a] => {
                for (k, v) in self.values.iter().enumerate() {
                    out.push_str(&format!("{},{}\n", a.point(k), v));
                }
            }
            [a, b] => {
                for i in 0..a.len {
                    for j in 0..b.len {
                        out.push_str(&format!(
                            "{},{},{}\n",
                            a.point(i),
                            b.point(j),
                            self.values[i * b.len + j]
                        ));
                    }
                }
            }
            _ => {}
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EntropyEstimate {
    /// Differential entropy in nats.
    pub value: f64,
    pub axes: [Option<GridAxis>; 2],
}

/// Linear binning: each sample splits mass `1/N` between its two nearest
/// grid points in proportion to proximity.
pub(crate) fn linear_bin(samples: &[f64], axis: &GridAxis) -> Vec<(usize, f64)> {
    let last = axis.len - 2;
    samples
        .iter()
        .map(|&x| {
            let t = (x - axis.lo) / axis.step;
            let k = (t.floor().max(0.0) as usize).min(last);
            let frac = (t - k as f64).clamp(0.0, 1.0);
            (k, frac)
        })
        .collect()
}

/// Gaussian kernel `phi(d * step / h) / h` sampled at integer offsets.
fn kernel_taps(axis: &GridAxis, h: f64) -> Vec<f64> {
    let norm = 1.0 / ((2.0 * PI).sqrt() * h);
    (0..axis.len)
        .map(|d| {
            let z = d as f64 * axis.step / h;
            norm * (-0.5 * z * z).exp()
        })
        .collect()
}

struct FftPair {
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
    scratch: Vec<Complex64>,
}

thread_local! {
    static FFTS: RefCell<HashMap<usize, FftPair>> = RefCell::new(HashMap::new());
}

/// Convolves each of the `rows` length-`len` signals stored contiguously in
/// `signals` with the symmetric kernel `taps` (taps[d] for offset ±d).
fn convolve_rows(signals: &mut [f64], len: usize, taps: &[f64]) {
    let rows = signals.len() / len;
    let size = (2 * len - 1).next_power_of_two();
    FFTS.with(|cell| {
        let mut map = cell.borrow_mut();
        let pair = map.entry(size).or_insert_with(|| {
            let mut planner = FftPlanner::new();
            let forward = planner.plan_fft_forward(size);
            let inverse = planner.plan_fft_inverse(size);
            let scratch_len = forward
                .get_inplace_scratch_len()
                .max(inverse.get_inplace_scratch_len());
            FftPair {
                forward,
                inverse,
                scratch: vec![Complex64::default(); scratch_len],
            }
        });

        let mut kernel = vec![Complex64::default(); size];
        kernel[0] = Complex64::new(taps[0], 0.0);
        for d in 1..len {
            kernel[d] = Complex64::new(taps[d], 0.0);
            kernel[size - d] = Complex64::new(taps[d], 0.0);
        }
        pair.forward.process_with_scratch(&mut kernel, &mut pair.scratch);
        let scale = 1.0 / size as f64;

        let active: Vec<usize> = (0..rows)
            .filter(|&r| signals[r * len..(r + 1) * len].iter().any(|&v| v != 0.0))
            .collect();
        if active.is_empty() {
            return;
        }
        let mut buf = vec![Complex64::default(); size * active.len()];
        for (slot, &r) in active.iter().enumerate() {
            for (b, &v) in buf[slot * size..slot * size + len]
                .iter_mut()
                .zip(&signals[r * len..(r + 1) * len])
            {
                *b = Complex64::new(v, 0.0);
            }
        }
        pair.forward.process_with_scratch(&mut buf, &mut pair.scratch);
        for chunk in buf.chunks_exact_mut(size) {
            for (b, k) in chunk.iter_mut().zip(&kernel) {
                *b *= k.re * scale;
            }
        }
        pair.inverse.process_with_scratch(&mut buf, &mut pair.scratch);
        for (slot, &r) in active.iter().enumerate() {
            for (out, b) in signals[r * len..(r + 1) * len]
                .iter_mut()
                .zip(&buf[slot * size..slot * size + len])
            {
                *out = b.re.max(0.0);
            }
        }
    });
}

fn check_samples(samples: &[f64]) -> Result<()> {
    if samples.len() < 2 {
        return Err(TcaError::InvalidData(format!(
            "need at least 2 samples, got {}",
            samples.len()
        )));
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(TcaError::InvalidData("non-finite sample".into()));
    }
    Ok(())
}

/// Binned KDE of `samples` on a mesh covering the data.
pub fn kde_density_grid_1d(samples: &[f64], cfg: &KdeConfig) -> Result<DensityGrid> {
    cfg.validate()?;
    check_samples(samples)?;
    let axis = GridAxis::covering(samples, cfg)?;
    kde_on_axis(samples, &axis, cfg.bandwidth)
}

/// Binned KDE of `samples` on a given mesh.
pub fn kde_on_axis(samples: &[f64], axis: &GridAxis, h: f64) -> Result<DensityGrid> {
    let w = 1.0 / samples.len() as f64;
    let mut values = vec![0.0; axis.len];
    for (k, frac) in linear_bin(samples, axis) {
        values[k] += w * (1.0 - frac);
        values[k + 1] += w * frac;
    }
    convolve_rows(&mut values, axis.len, &kernel_taps(axis, h));
    Ok(DensityGrid {
        axes: vec![*axis],
        values,
    })
}

/// Binned product-kernel KDE of the pairs `(u_i, v_i)`.
pub fn kde_density_grid_2d(u: &[f64], v: &[f64], cfg: &KdeConfig) -> Result<DensityGrid> {
    cfg.validate()?;
    check_samples(u)?;
    check_samples(v)?;
    if u.len() != v.len() {
        return Err(TcaError::DimensionMismatch {
            expected: u.len(),
            actual: v.len(),
        });
    }
    let au = GridAxis::covering(u, cfg)?;
    let av = GridAxis::covering(v, cfg)?;
    Ok(kde_2d_on_axes(u, v, &au, &av, cfg.bandwidth))
}

pub fn kde_2d_on_axes(u: &[f64], v: &[f64], au: &GridAxis, av: &GridAxis, h: f64) -> DensityGrid {
    let (mu, mv) = (au.len, av.len);
    let w = 1.0 / u.len() as f64;
    // row-major over (u index, v index)
    let mut grid = vec![0.0; mu * mv];
    for ((ku, fu), (kv, fv)) in linear_bin(u, au).into_iter().zip(linear_bin(v, av)) {
        let base = ku * mv + kv;
        grid[base] += w * (1.0 - fu) * (1.0 - fv);
        grid[base + 1] += w * (1.0 - fu) * fv;
        grid[base + mv] += w * fu * (1.0 - fv);
        grid[base + mv + 1] += w * fu * fv;
    }
    // along v (contiguous rows)
    convolve_rows(&mut grid, mv, &kernel_taps(av, h));
    // along u: transpose, convolve, transpose back
    let mut t = vec![0.0; mu * mv];
    for i in 0..mu {
        for j in 0..mv {
            t[j * mu + i] = grid[i * mv + j];
        }
    }
    convolve_rows(&mut t, mu, &kernel_taps(au, h));
    for i in 0..mu {
        for j in 0..mv {
            grid[i * mv + j] = t[j * mu + i];
        }
    }
    DensityGrid {
        axes: vec![*au, *av],
        values: grid,
    }
}

pub fn kde_entropy_1d(samples: &[f64], cfg: &KdeConfig) -> Result<EntropyEstimate> {
    let grid = kde_density_grid_1d(samples, cfg)?;
    Ok(EntropyEstimate {
        value: grid.entropy(),
        axes: [Some(grid.axes[0]), None],
    })
}

pub fn kde_entropy_2d(u: &[f64], v: &[f64], cfg: &KdeConfig) -> Result<EntropyEstimate> {
    let grid = kde_density_grid_2d(u, v, cfg)?;
    Ok(EntropyEstimate {
        value: grid.entropy(),
        axes: [Some(grid.axes[0]), Some(grid.axes[1])],
    })
}

/// `H_u + H_v - H_uv`; not clamped at zero.
pub fn pairwise_mi_kde(u: &[f64], v: &[f64], cfg: &KdeConfig) -> Result<f64> {
    let huv = kde_entropy_2d(u, v, cfg)?.value;
    Ok(kde_entropy_1d(u, cfg)?.value + kde_entropy_1d(v, cfg)?.value - huv)
}

/// `J^E = sum_i H_i - sum_{(u,v) in T} (H_u + H_v - H_uv) - log|det W|`
/// evaluated on `s = W x`.
pub fn contrast_je(
    w: &DemixingMatrix,
    data: &Dataset,
    tree: &SpanningTree,
    cfg: &KdeConfig,
) -> Result<f64> {
    KdeContrast::new(data.clone(), *cfg)?.contrast(w.matrix(), tree)
}

struct KdeComponent {
    samples: Vec<f64>,
    entropy: f64,
}

/// `J^E` with per-component and per-pair memoization.
pub struct KdeContrast {
    data: Dataset,
    cfg: KdeConfig,
    components: Memo<RowKey, KdeComponent>,
    pairs: Memo<(RowKey, RowKey), f64>,
}

impl KdeContrast {
    pub fn new(data: Dataset, cfg: KdeConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            data,
            cfg,
            components: Memo::new(),
            pairs: Memo::new(),
        })
    }

    pub fn config(&self) -> &KdeConfig {
        &self.cfg
    }

    fn component(&self, row: &[f64]) -> Result<(RowKey, Arc<KdeComponent>)> {
        let key = RowKey::new(row);
        let comp = self.components.get_or_try_insert(&key, || {
            let samples = project_row(&self.data, row);
            let entropy = kde_entropy_1d(&samples, &self.cfg)?.value;
            Ok(KdeComponent { samples, entropy })
        })?;
        Ok((key, comp))
    }

    fn components_of(&self, w: &DMatrix<f64>, vertices: &[usize]) -> Result<Vec<(RowKey, Arc<KdeComponent>)>> {
        vertices
            .par_iter()
            .map(|&i| {
                let row: Vec<f64> = w.row(i).iter().copied().collect();
                self.component(&row)
            })
            .collect()
    }

    fn joint_entropy(
        &self,
        a: &(RowKey, Arc<KdeComponent>),
        b: &(RowKey, Arc<KdeComponent>),
    ) -> Result<f64> {
        // canonical order makes the estimate exactly symmetric
        let (first, second) = if a.0 <= b.0 { (a, b) } else { (b, a) };
        let key = (first.0.clone(), second.0.clone());
        let h = self.pairs.get_or_try_insert(&key, || {
            Ok(kde_entropy_2d(&first.1.samples, &second.1.samples, &self.cfg)?.value)
        })?;
        Ok(*h)
    }

    fn pair_mi(&self, comps: &[(RowKey, Arc<KdeComponent>)], pairs: &[(usize, usize)]) -> Result<Vec<f64>> {
        pairs
            .par_iter()
            .map(|&(a, b)| {
                let huv = self.joint_entropy(&comps[a], &comps[b])?;
                Ok(comps[a].1.entropy + comps[b].1.entropy - huv)
            })
            .collect()
    }
}

fn checked_log_det(w: &DMatrix<f64>) -> Result<f64> {
    let det = w.determinant();
    if !(det.abs() >= 1e-12) {
        return Err(TcaError::SingularMatrix { det });
    }
    Ok(det.abs().ln())
}

impl Contrast for KdeContrast {
    fn data(&self) -> &Dataset {
        &self.data
    }

    fn local_contrast(
        &self,
        w: &DMatrix<f64>,
        vertices: &[usize],
        edges: &[(usize, usize)],
    ) -> Result<f64> {
        let log_det = checked_log_det(w)?;
        let comps = self.components_of(w, vertices)?;
        let index: HashMap<usize, usize> = vertices.iter().enumerate().map(|(k, &v)| (v, k)).collect();
        let local_edges: Vec<(usize, usize)> = edges.iter().map(|(u, v)| (index[u], index[v])).collect();
        let mi = self.pair_mi(&comps, &local_edges)?;
        let singles: f64 = comps.iter().map(|c| c.1.entropy).sum();
        Ok(singles - mi.iter().sum::<f64>() - log_det)
    }

    fn pairwise_dependence(&self, w: &DMatrix<f64>) -> Result<WeightMatrix> {
        let m = w.nrows();
        let all: Vec<usize> = (0..m).collect();
        let comps = self.components_of(w, &all)?;
        let pairs: Vec<(usize, usize)> = (0..m).flat_map(|u| ((u + 1)..m).map(move |v| (u, v))).collect();
        let mi = self.pair_mi(&comps, &pairs)?;
        let table: HashMap<(usize, usize), f64> = pairs.into_iter().zip(mi).collect();
        WeightMatrix::from_fn(m, |u, v| table[&(u, v)])
    }

    fn advance_cache(&self) {
        self.components.advance();
        self.pairs.advance();
    }
}
