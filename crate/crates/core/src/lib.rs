//! Tree-dependent component analysis.
//!
//! Given samples of a continuous random vector `x`, find a demixing matrix
//! `W` and a spanning tree `T` such that `s = W x` is well modelled by a
//! tree-structured graphical model, then fit a tree-factorized density.

pub mod baselines;
mod cache;
pub mod contrast;
pub mod data;
pub mod density;
pub mod error;
pub mod experiments;
pub mod gaussian;
pub mod io;
pub mod kde;
pub mod kgv;
pub mod linalg;
pub mod metrics;
pub mod mixture;
pub mod optimizer;
pub mod synth;
pub mod tree;

pub use cache::RowKey;
pub use contrast::{Contrast, ContrastKind};
pub use data::{estimate_covariance, transform_sources, CovarianceMatrix, Dataset, DemixingMatrix};
pub use error::{Result, TcaError};
pub use tree::{max_weight_spanning_tree, SpanningTree, WeightMatrix};
pub use density::{fit_tree_density, DensityConfig, TreeDensityModel};
pub use kde::{KdeConfig, KdeContrast};
pub use kgv::{KappaScale, KgvConfig, KgvContrast};
pub use metrics::MetricReport;
pub use optimizer::{alternate_minimize, FitResult, OptimizerConfig};
pub use synth::{sample_tca_instance, sample_treewidth_instance, GeneratorSpec};
