//! Seeded replication harness for the recovery and density benchmarks.

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{fit_baseline, BaselineKind, Density};
use crate::contrast::ContrastKind;
use crate::data::estimate_covariance;
use crate::density::{fit_tree_density, DensityConfig};
use crate::error::{Result, TcaError};
use crate::metrics::{e_w, tree_error};
use crate::optimizer::{alternate_minimize, OptimizerConfig};
use crate::synth::{replicate_seed, sample_tca_instance, sample_treewidth_instance, stream_rng, GeneratorSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Suite {
    Table1,
    Table2,
    Smoke,
}

impl FromStr for Suite {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "table1" => Ok(Suite::Table1),
            "table2" => Ok(Suite::Table2),
            "smoke" => Ok(Suite::Smoke),
            other => Err(format!("unknown suite `{other}` (expected table1, table2 or smoke)")),
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Suite::Table1 => "table1",
            Suite::Table2 => "table2",
            Suite::Smoke => "smoke",
        })
    }
}

/// Sample size used for dimension `m` in the recovery benchmark.
pub fn recovery_sample_size(m: usize) -> usize {
    match m {
        0..=4 => 1000,
        5..=8 => 2000,
        _ => 4000,
    }
}

pub const TABLE1_DIMENSIONS: [usize; 5] = [4, 6, 8, 12, 16];

/// `(m, τ)` cells of the density benchmark.
pub const TABLE2_CELLS: [(usize, usize); 10] = [
    (4, 1),
    (4, 2),
    (6, 1),
    (6, 2),
    (6, 3),
    (6, 4),
    (8, 1),
    (8, 2),
    (8, 3),
    (8, 4),
];

/// One recovery replicate; also the row schema of the per-replicate CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryRow {
    pub m: usize,
    pub contrast: ContrastKind,
    pub replicate: u64,
    pub e_w: f64,
    pub e_t: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryCell {
    pub m: usize,
    pub contrast: ContrastKind,
    pub reps: usize,
    pub failures: usize,
    pub mean_e_w: f64,
    pub mean_e_t: f64,
    pub mean_seconds: f64,
}

/// Generates replicate `replicate` of the tree benchmark at dimension `m`,
/// fits it and scores the estimate against the truth.
pub fn run_recovery_replicate(
    m: usize,
    n: usize,
    replicate: u64,
    base_seed: u64,
    cfg: &OptimizerConfig,
) -> Result<RecoveryRow> {
    let inst = sample_tca_instance(&GeneratorSpec::tree(m, n, replicate_seed(base_seed, replicate)))?;
    let cfg = OptimizerConfig {
        seed: replicate,
        ..*cfg
    };
    let start = Instant::now();
    let fit = alternate_minimize(&inst.data, &cfg)?;
    let seconds = start.elapsed().as_secs_f64();
    let cov = estimate_covariance(&inst.data.centered())?;
    Ok(RecoveryRow {
        m,
        contrast: cfg.contrast,
        replicate,
        e_w: e_w(&fit.w, &fit.tree, &inst.w_true, &inst.tree, &cov)?,
        e_t: tree_error(&fit.tree, &inst.tree)?.1,
        seconds,
    })
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, c) = xs.fold((0.0, 0usize), |(s, c), x| (s + x, c + 1));
    if c == 0 {
        f64::NAN
    } else {
        s / c as f64
    }
}

/// Runs `reps` replicates of one recovery cell. Failed replicates are
/// logged and counted, not fatal.
pub fn run_recovery_cell(
    m: usize,
    reps: usize,
    base_seed: u64,
    cfg: &OptimizerConfig,
) -> (RecoveryCell, Vec<RecoveryRow>) {
    let n = recovery_sample_size(m);
    let results: Vec<Result<RecoveryRow>> = (0..reps as u64)
        .into_par_iter()
        .map(|r| run_recovery_replicate(m, n, r, base_seed, cfg))
        .collect();
    let mut rows = Vec::new();
    let mut failures = 0;
    for (r, res) in results.into_iter().enumerate() {
        match res {
            Ok(row) => rows.push(row),
            Err(e) => {
                log::warn!("m={m} {} replicate {r} failed: {e}", cfg.contrast);
                failures += 1;
            }
        }
    }
    let cell = RecoveryCell {
        m,
        contrast: cfg.contrast,
        reps,
        failures,
        mean_e_w: mean(rows.iter().map(|r| r.e_w)),
        mean_e_t: mean(rows.iter().map(|r| r.e_t)),
        mean_seconds: mean(rows.iter().map(|r| r.seconds)),
    };
    (cell, rows)
}

/// Density models compared in the held-out benchmark.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DensityModelKind {
    Baseline(BaselineKind),
    Tca(ContrastKind),
}

impl fmt::Display for DensityModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DensityModelKind::Baseline(b) => write!(f, "{}", b.to_string().to_uppercase()),
            DensityModelKind::Tca(c) => write!(f, "T-{c}"),
        }
    }
}

/// One model on one density replicate; `deficit` is the generator's mean
/// held-out log-likelihood minus the model's.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityRow {
    pub m: usize,
    pub tau: usize,
    pub replicate: u64,
    pub model: String,
    pub deficit: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityCell {
    pub m: usize,
    pub tau: usize,
    pub model: String,
    pub reps: usize,
    pub failures: usize,
    pub mean_deficit: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DensityBenchConfig {
    pub n_train: Option<usize>,
    pub n_test: usize,
    pub optimizer: OptimizerConfig,
    pub density: DensityConfig,
}

impl Default for DensityBenchConfig {
    fn default() -> Self {
        Self {
            n_train: None,
            n_test: 10_000,
            optimizer: OptimizerConfig::default(),
            density: DensityConfig::default(),
        }
    }
}

/// Fits every model in `models` on one generated training set and scores
/// each on a fresh test set from the same generator.
pub fn run_density_replicate(
    m: usize,
    tau: usize,
    replicate: u64,
    base_seed: u64,
    models: &[DensityModelKind],
    cfg: &DensityBenchConfig,
) -> Result<Vec<Result<DensityRow>>> {
    let seed = replicate_seed(base_seed, replicate);
    let n_train = cfg.n_train.unwrap_or_else(|| recovery_sample_size(m));
    let spec = GeneratorSpec {
        treewidth: tau,
        ..GeneratorSpec::tree(m, n_train, seed)
    };
    let inst = sample_treewidth_instance(&spec)?;
    let test = inst.model.sample(cfg.n_test, &mut stream_rng(seed, 7))?;
    let reference = inst.model.mean_log_likelihood(&test)?;
    let density_cfg = DensityConfig {
        seed: replicate,
        ..cfg.density
    };
    let fit_one = |kind: DensityModelKind| -> Result<DensityRow> {
        let start = Instant::now();
        let model: Box<dyn Density> = match kind {
            DensityModelKind::Baseline(b) => fit_baseline(b, &inst.data, &density_cfg)?,
            DensityModelKind::Tca(contrast) => {
                let ocfg = OptimizerConfig {
                    contrast,
                    seed: replicate,
                    ..cfg.optimizer
                };
                let fit = alternate_minimize(&inst.data, &ocfg)?;
                Box::new(fit_tree_density(&inst.data, &fit.w, &fit.tree, &density_cfg)?)
            }
        };
        let ll = model.mean_log_likelihood(&test)?;
        Ok(DensityRow {
            m,
            tau,
            replicate,
            model: kind.to_string(),
            deficit: reference - ll,
            seconds: start.elapsed().as_secs_f64(),
        })
    };
    Ok(models.iter().map(|&k| fit_one(k)).collect())
}

/// Runs `reps` replicates of one density cell and averages per model.
pub fn run_density_cell(
    m: usize,
    tau: usize,
    reps: usize,
    base_seed: u64,
    models: &[DensityModelKind],
    cfg: &DensityBenchConfig,
) -> (Vec<DensityCell>, Vec<DensityRow>) {
    let results: Vec<Result<Vec<Result<DensityRow>>>> = (0..reps as u64)
        .into_par_iter()
        .map(|r| run_density_replicate(m, tau, r, base_seed, models, cfg))
        .collect();
    let mut rows = Vec::new();
    let mut failures = vec![0usize; models.len()];
    for (r, res) in results.into_iter().enumerate() {
        match res {
            Ok(per_model) => {
                for (i, row) in per_model.into_iter().enumerate() {
                    match row {
                        Ok(row) => rows.push(row),
                        Err(e) => {
                            log::warn!("m={m} tau={tau} {} replicate {r} failed: {e}", models[i]);
                            failures[i] += 1;
                        }
                    }
                }
            }
            Err(e) => {
                log::warn!("m={m} tau={tau} replicate {r} could not be generated: {e}");
                failures.iter_mut().for_each(|f| *f += 1);
            }
        }
    }
    let cells = models
        .iter()
        .zip(failures)
        .map(|(kind, failures)| {
            let name = kind.to_string();
            DensityCell {
                m,
                tau,
                reps,
                failures,
                mean_deficit: mean(rows.iter().filter(|r| r.model == name).map(|r| r.deficit)),
                model: name,
            }
        })
        .collect();
    (cells, rows)
}

/// Every model column of the density table, in display order.
pub fn all_density_models() -> Vec<DensityModelKind> {
    BaselineKind::ALL
        .iter()
        .map(|&b| DensityModelKind::Baseline(b))
        .chain([ContrastKind::Kgv, ContrastKind::Kde].map(DensityModelKind::Tca))
        .collect()
}

/// Writes serializable rows as CSV with a header line.
pub fn write_csv_rows<T: Serialize, W: Write>(writer: W, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for row in rows {
        w.serialize(row).map_err(|e| TcaError::io("writing CSV", e.into()))?;
    }
    w.flush().map_err(|e| TcaError::io("writing CSV", e))?;
    Ok(())
}
