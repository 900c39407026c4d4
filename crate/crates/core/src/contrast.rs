//! The interface shared by the KDE and KGV tree contrasts.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::Result;
use crate::tree::{SpanningTree, WeightMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContrastKind {
    Kde,
    Kgv,
}

impl std::fmt::Display for ContrastKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ContrastKind::Kde => "kde",
            ContrastKind::Kgv => "kgv",
        })
    }
}

impl std::str::FromStr for ContrastKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "kde" => Ok(ContrastKind::Kde),
            "kgv" => Ok(ContrastKind::Kgv),
            other => Err(format!("unknown contrast '{other}' (expected kde or kgv)")),
        }
    }
}

/// An empirical estimate of the T-mutual information of `s = W x`.
///
/// Implementations memoize per-component work keyed by row content; call
/// [`Contrast::advance_cache`] between optimizer iterations to bound memory.
pub trait Contrast: Send + Sync {
    fn data(&self) -> &Dataset;

    /// Contrast restricted to the components `vertices` and the tree edges
    /// `edges` among them. With all vertices and a spanning tree this is the
    /// full contrast.
    fn local_contrast(&self, w: &DMatrix<f64>, vertices: &[usize], edges: &[(usize, usize)]) -> Result<f64>;

    /// Pairwise dependence estimates used as Chow-Liu weights.
    fn pairwise_dependence(&self, w: &DMatrix<f64>) -> Result<WeightMatrix>;

    fn advance_cache(&self);

    fn contrast(&self, w: &DMatrix<f64>, tree: &SpanningTree) -> Result<f64> {
        let all: Vec<usize> = (0..w.nrows()).collect();
        self.local_contrast(w, &all, tree.edges())
    }
}
