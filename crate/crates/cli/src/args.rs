use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use tca_core::experiments::Suite;
use tca_core::kde::KdeConfig;
use tca_core::kgv::KgvConfig;
use tca_core::optimizer::OptimizerConfig;
use tca_core::synth::TemplateFamily;
use tca_core::ContrastKind;

#[derive(Debug, Parser)]
#[command(name = "tca", version, about = "Tree-dependent component analysis")]
pub struct Cli {
    /// Stream one JSON line per accepted optimizer iteration to stderr.
    #[arg(long, global = true)]
    pub verbose: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset and its ground truth.
    Gen(GenArgs),
    /// Estimate a demixing matrix and tree.
    Fit(FitArgs),
    /// Fit a tree-factorized density and compare held-out likelihoods.
    Density(DensityArgs),
    /// Score a fit against a ground-truth file.
    Eval(EvalArgs),
    /// Run a replication suite and write CSV tables.
    Benchmark(BenchmarkArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub m: usize,
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 1)]
    pub treewidth: usize,
    /// `mixed` or a single edge template name.
    #[arg(long, default_value = "mixed")]
    pub family: TemplateFamily,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

/// Optimizer and contrast settings shared by `fit` and `benchmark`.
#[derive(Debug, Args)]
pub struct OptimizerArgs {
    #[arg(long, default_value = "kgv", value_parser = parse_contrast)]
    pub contrast: ContrastKind,
    #[arg(long = "lambda-c")]
    pub lambda_c: Option<f64>,
    /// KDE bandwidth `h`.
    #[arg(long)]
    pub bandwidth: Option<f64>,
    /// KDE grid points per axis.
    #[arg(long)]
    pub grid: Option<usize>,
    /// KGV kernel width.
    #[arg(long)]
    pub sigma: Option<f64>,
    /// KGV regularization.
    #[arg(long)]
    pub kappa: Option<f64>,
    /// Incomplete Cholesky tolerance.
    #[arg(long)]
    pub eta: Option<f64>,
    /// ICA initializations screened before the final descent.
    #[arg(long)]
    pub starts: Option<usize>,
}

impl OptimizerArgs {
    pub fn config(&self, seed: u64) -> OptimizerConfig {
        let base = OptimizerConfig::default();
        let kde = KdeConfig {
            bandwidth: self.bandwidth.unwrap_or(base.kde.bandwidth),
            grid_points: self.grid.unwrap_or(base.kde.grid_points),
            ..base.kde
        };
        let kgv = KgvConfig {
            kernel_width: self.sigma.unwrap_or(base.kgv.kernel_width),
            kappa: self.kappa.unwrap_or(base.kgv.kappa),
            cholesky_tol: self.eta.unwrap_or(base.kgv.cholesky_tol),
            ..base.kgv
        };
        OptimizerConfig {
            contrast: self.contrast,
            lambda_c: self.lambda_c.unwrap_or(base.lambda_c),
            kde,
            kgv,
            seed,
            starts: self.starts.unwrap_or(base.starts),
            ..base
        }
    }
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// Delimited text or binary dataset.
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub optimizer: OptimizerArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DensityArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Result document written by `fit`.
    #[arg(long)]
    pub fit: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub kmax: usize,
    /// Fraction of samples used for training.
    #[arg(long, default_value_t = 0.8)]
    pub train_fraction: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub fit: PathBuf,
    #[arg(long)]
    pub truth: PathBuf,
    /// Also write the report here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchmarkArgs {
    #[arg(long, default_value = "smoke")]
    pub suite: Suite,
    #[command(flatten)]
    pub optimizer: OptimizerArgs,
    /// Replications per cell; defaults to 20, or 5 for the smoke suite.
    #[arg(long)]
    pub reps: Option<usize>,
    /// Restrict the suite to these dimensions.
    #[arg(long = "dims", value_delimiter = ',')]
    pub dims: Vec<usize>,
    /// Both contrasts instead of only `--contrast`.
    #[arg(long)]
    pub both_contrasts: bool,
    #[arg(long, default_value_t = 8)]
    pub kmax: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads; defaults to the available parallelism.
    #[arg(long)]
    pub threads: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_contrast(s: &str) -> Result<ContrastKind, String> {
    match s {
        "kde" => Ok(ContrastKind::Kde),
        "kgv" => Ok(ContrastKind::Kgv),
        other => Err(format!("unknown contrast `{other}` (expected kde or kgv)")),
    }
}
