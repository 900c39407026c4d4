use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use tca_core::baselines::{fit_baseline, BaselineKind, Density};
use tca_core::density::{fit_tree_density, DensityConfig, TreeDensityModel};
use tca_core::experiments::{
    all_density_models, run_density_cell, run_recovery_cell, write_csv_rows, DensityBenchConfig, DensityModelKind,
    Suite, TABLE1_DIMENSIONS, TABLE2_CELLS,
};
use tca_core::io::{read_dataset_file, write_csv_file};
use tca_core::metrics::{e_w, tree_error, MetricReport};
use tca_core::optimizer::{alternate_minimize_with, OptimizerConfig};
use tca_core::synth::{sample_tca_instance, sample_treewidth_instance, stream_rng, GeneratorSpec, TruthFile};
use tca_core::{estimate_covariance, ContrastKind, Dataset, DemixingMatrix, SpanningTree, TcaError};

use crate::args::{BenchmarkArgs, DensityArgs, EvalArgs, FitArgs, GenArgs};
use crate::error::{CliError, CliResult};

pub const RESULT_FORMAT_VERSION: u32 = 1;

/// Output of `tca fit`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitDocument {
    pub version: u32,
    pub data: PathBuf,
    pub w: DemixingMatrix,
    pub tree: SpanningTree,
    pub objective: f64,
    pub objective_trace: Vec<f64>,
    pub tree_switch_count: usize,
    pub converged: bool,
    pub ica_converged: bool,
    pub wall_seconds: f64,
    pub config: OptimizerConfig,
}

impl FitDocument {
    pub fn read(path: &Path) -> CliResult<Self> {
        let doc: FitDocument = serde_json::from_str(&read_text(path)?).map_err(TcaError::from)?;
        if doc.version != RESULT_FORMAT_VERSION {
            return Err(CliError::Usage(format!(
                "{}: unsupported result version {}",
                path.display(),
                doc.version
            )));
        }
        if doc.w.dim() != doc.tree.m() {
            return Err(TcaError::DimensionMismatch {
                expected: doc.w.dim(),
                actual: doc.tree.m(),
            }
            .into());
        }
        Ok(doc)
    }
}

/// Held-out comparison written by `tca density`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityReport {
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
    /// Mean held-out log-likelihood per sample, keyed by model column.
    pub models: Vec<ModelScore>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelScore {
    pub model: String,
    pub mean_log_likelihood: f64,
}

fn read_text(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| TcaError::io(format!("reading {}", path.display()), e).into())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(TcaError::from)?;
    fs::write(path, text + "\n").map_err(|e| TcaError::io(format!("writing {}", path.display()), e))?;
    Ok(())
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| TcaError::io(format!("creating {}", dir.display()), e))?;
    Ok(())
}

fn write_csv_table<T: Serialize>(path: &Path, rows: &[T]) -> CliResult<()> {
    let file = fs::File::create(path).map_err(|e| TcaError::io(format!("writing {}", path.display()), e))?;
    write_csv_rows(std::io::BufWriter::new(file), rows)?;
    Ok(())
}

pub fn gen(args: &GenArgs) -> CliResult<()> {
    let spec = GeneratorSpec {
        m: args.m,
        n: args.n,
        treewidth: args.treewidth,
        family: args.family,
        seed: args.seed,
    };
    spec.validate()?;
    let (data, model) = if spec.treewidth == 1 {
        let inst = sample_tca_instance(&spec)?;
        (inst.data, inst.model)
    } else {
        let inst = sample_treewidth_instance(&spec)?;
        (inst.data, inst.model)
    };
    create_dir(&args.out)?;
    write_csv_file(&args.out.join("data.csv"), &data, ',')?;
    TruthFile::from_model(&spec, &model)?.write(&args.out.join("truth.json"))?;
    Ok(())
}

pub fn fit(args: &FitArgs, verbose: bool) -> CliResult<()> {
    let cfg = args.optimizer.config(args.seed);
    cfg.validate()?;
    let data = read_dataset_file(&args.data, ',')?;
    if data.n() <= data.m() {
        return Err(TcaError::InvalidData(format!("need more samples ({}) than components ({})", data.n(), data.m())).into());
    }
    let start = Instant::now();
    let stderr = std::io::stderr();
    let result = alternate_minimize_with(&data, &cfg, &mut |record| {
        if verbose {
            if let Ok(line) = serde_json::to_string(record) {
                let _ = writeln!(stderr.lock(), "{line}");
            }
        }
    })?;
    let doc = FitDocument {
        version: RESULT_FORMAT_VERSION,
        data: args.data.clone(),
        objective: result.objective(),
        w: result.w,
        tree: result.tree,
        objective_trace: result.objective_trace,
        tree_switch_count: result.tree_switch_count,
        converged: result.converged,
        ica_converged: result.ica_converged,
        wall_seconds: start.elapsed().as_secs_f64(),
        config: cfg,
    };
    create_dir(&args.out)?;
    let path = args.out.join("fit.json");
    write_json(&path, &doc)?;
    if !doc.converged {
        return Err(CliError::NotConverged(path.display().to_string()));
    }
    Ok(())
}

/// Shuffles row indices with `seed` and splits off the first
/// `round(fraction * n)` for training.
pub fn split_rows(data: &Dataset, fraction: f64, seed: u64) -> CliResult<(Dataset, Dataset)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(CliError::Usage(format!("train fraction must lie in (0, 1), got {fraction}")));
    }
    let mut idx: Vec<usize> = (0..data.n()).collect();
    idx.shuffle(&mut stream_rng(seed, 0));
    let n_train = (fraction * data.n() as f64).round() as usize;
    if n_train < 2 || data.n() - n_train < 2 {
        return Err(CliError::Usage(format!("a {fraction} split of {} samples leaves a part with fewer than 2", data.n())));
    }
    let (train, test) = idx.split_at(n_train);
    Ok((data.select_rows(train)?, data.select_rows(test)?))
}

pub fn density(args: &DensityArgs) -> CliResult<DensityReport> {
    if args.kmax == 0 {
        return Err(CliError::Usage("--kmax must be at least 1".into()));
    }
    let doc = FitDocument::read(&args.fit)?;
    let data = read_dataset_file(&args.data, ',')?;
    if data.m() != doc.w.dim() {
        return Err(TcaError::DimensionMismatch {
            expected: doc.w.dim(),
            actual: data.m(),
        }
        .into());
    }
    let (train, test) = split_rows(&data, args.train_fraction, args.seed)?;
    let cfg = DensityConfig {
        k_max: args.kmax,
        seed: args.seed,
    };
    let model: TreeDensityModel = fit_tree_density(&train, &doc.w, &doc.tree, &cfg)?;
    let mut models = Vec::new();
    for kind in BaselineKind::ALL {
        let baseline = fit_baseline(kind, &train, &cfg)?;
        models.push(ModelScore {
            model: kind.to_string().to_uppercase(),
            mean_log_likelihood: baseline.mean_log_likelihood(&test)?,
        });
    }
    models.push(ModelScore {
        model: "TCA".into(),
        mean_log_likelihood: model.mean_log_likelihood(&test)?,
    });
    let report = DensityReport {
        n_train: train.n(),
        n_test: test.n(),
        seed: args.seed,
        models,
    };
    create_dir(&args.out)?;
    model.write(&args.out.join("model.json"))?;
    write_json(&args.out.join("density_report.json"), &report)?;
    Ok(report)
}

pub fn eval(args: &EvalArgs) -> CliResult<MetricReport> {
    let doc = FitDocument::read(&args.fit)?;
    let truth = TruthFile::read(&args.truth)?;
    let Some(true_tree) = truth.tree.as_ref() else {
        return Err(CliError::Usage(format!(
            "{} describes a treewidth-{} model, which has no true tree",
            args.truth.display(),
            truth.spec.treewidth
        )));
    };
    let data = read_dataset_file(&doc.data, ',')?;
    let cov = estimate_covariance(&data.centered())?;
    let (s_t, e_t) = tree_error(&doc.tree, true_tree)?;
    let report = MetricReport {
        e_w: e_w(&doc.w, &doc.tree, &truth.w, true_tree, &cov)?,
        e_t,
        s_t,
    };
    if let Some(out) = &args.out {
        create_dir(out)?;
        write_json(&out.join("metrics.json"), &report)?;
    }
    Ok(report)
}

fn benchmark_contrasts(args: &BenchmarkArgs) -> Vec<ContrastKind> {
    if args.both_contrasts {
        vec![ContrastKind::Kgv, ContrastKind::Kde]
    } else {
        vec![args.optimizer.contrast]
    }
}

pub fn benchmark(args: &BenchmarkArgs) -> CliResult<()> {
    let base = args.optimizer.config(args.seed);
    base.validate()?;
    if args.kmax == 0 {
        return Err(CliError::Usage("--kmax must be at least 1".into()));
    }
    let reps = args
        .reps
        .unwrap_or(if args.suite == Suite::Smoke { 5 } else { 20 });
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(t) = args.threads {
        pool = pool.num_threads(t);
    }
    let pool = pool
        .build()
        .map_err(|e| CliError::Usage(format!("cannot start worker pool: {e}")))?;
    create_dir(&args.out)?;
    let keep = |m: usize| args.dims.is_empty() || args.dims.contains(&m);
    pool.install(|| match args.suite {
        Suite::Smoke | Suite::Table1 => {
            let dims: Vec<usize> = if args.suite == Suite::Smoke {
                vec![4]
            } else {
                TABLE1_DIMENSIONS.into_iter().filter(|&m| keep(m)).collect()
            };
            let (mut cells, mut rows) = (Vec::new(), Vec::new());
            for m in dims {
                for contrast in benchmark_contrasts(args) {
                    let cfg = OptimizerConfig { contrast, ..base };
                    let (cell, cell_rows) = run_recovery_cell(m, reps, args.seed, &cfg);
                    log::info!(
                        "m={m} {contrast}: e_w {:.2} e_t {:.3} ({} failed)",
                        cell.mean_e_w,
                        cell.mean_e_t,
                        cell.failures
                    );
                    cells.push(cell);
                    rows.extend(cell_rows);
                    write_csv_table(&args.out.join(format!("{}.csv", args.suite)), &cells)?;
                    write_csv_table(&args.out.join(format!("{}_replicates.csv", args.suite)), &rows)?;
                }
            }
            Ok(())
        }
        Suite::Table2 => {
            let models: Vec<DensityModelKind> = all_density_models()
                .into_iter()
                .filter(|k| match k {
                    DensityModelKind::Tca(c) => benchmark_contrasts(args).contains(c),
                    DensityModelKind::Baseline(_) => true,
                })
                .collect();
            let cfg = DensityBenchConfig {
                optimizer: base,
                density: DensityConfig {
                    k_max: args.kmax,
                    seed: args.seed,
                },
                ..Default::default()
            };
            let (mut cells, mut rows) = (Vec::new(), Vec::new());
            for (m, tau) in TABLE2_CELLS.into_iter().filter(|&(m, _)| keep(m)) {
                let (cell, cell_rows) = run_density_cell(m, tau, reps, args.seed, &models, &cfg);
                cells.extend(cell);
                rows.extend(cell_rows);
                write_csv_table(&args.out.join("table2.csv"), &cells)?;
                write_csv_table(&args.out.join("table2_replicates.csv"), &rows)?;
            }
            Ok(())
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(n: usize) -> Vec<Vec<f64>> {
        (0..n).map(|i| vec![i as f64, (i * i) as f64 % 7.0]).collect()
    }

    #[test]
    fn split_is_reproducible_and_disjoint() {
        let data = Dataset::from_rows(&rows(50)).unwrap();
        let (a, b) = split_rows(&data, 0.8, 4).unwrap();
        let (c, _) = split_rows(&data, 0.8, 4).unwrap();
        assert_eq!(a.n(), 40);
        assert_eq!(b.n(), 10);
        assert_eq!(a, c);
        let mut firsts: Vec<f64> = a.component(0).iter().chain(b.component(0)).copied().collect();
        firsts.sort_by(f64::total_cmp);
        assert_eq!(firsts, (0..50).map(|i| i as f64).collect::<Vec<_>>());
    }

    #[test]
    fn split_rejects_degenerate_fractions() {
        let data = Dataset::from_rows(&rows(10)).unwrap();
        assert!(split_rows(&data, 1.0, 0).is_err());
        assert!(split_rows(&data, 0.95, 0).is_err());
    }
}
