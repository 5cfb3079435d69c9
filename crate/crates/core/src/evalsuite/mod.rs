//! Quantitative evaluation: factor-alignment accuracy from a frozen-trunk
//! multi-head classifier, Fréchet feature distance, diversity score, and the
//! embedding-space projection.

mod faa;
mod frechet;
mod project;

pub use faa::{compute_faa, train_faa_classifier, FaaClassifier, FaaConfig, FaaScores, FaaTrainReport};
pub use frechet::{diversity_score, ffd_from_moments, frechet_feature_distance, jacobi_eigh};
pub use project::{project_embeddings, EmbeddingProjection, NeighborEntry, TokenPoint};

use serde::{Deserialize, Serialize};

/// One evaluation configuration's scores.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricReport {
    /// "existing" or "novel".
    pub suite: String,
    /// "inversion" or "zeroshot".
    pub method: String,
    /// "t2i" or "edge".
    pub mode: String,
    /// Per category (lens, sensor, view, domain).
    pub faa: [f64; 4],
    pub faa_average: f64,
    /// Fréchet feature distance to the rendered reference set, when computed.
    pub ffd: Option<f64>,
    pub diversity: f64,
    pub sample_count: usize,
    pub tuple_count: usize,
}

impl MetricReport {
    pub fn validate(&self) -> crate::Result<()> {
        for v in self.faa.iter().chain([&self.faa_average]) {
            if !(0.0..=1.0).contains(v) {
                return Err(crate::Error::Precondition(format!("FAA {v} outside [0,1]")));
            }
        }
        if let Some(f) = self.ffd {
            if f < -1e-9 {
                return Err(crate::Error::Precondition(format!("FFD {f} negative")));
            }
        }
        if self.diversity < 0.0 {
            return Err(crate::Error::Precondition("diversity negative".into()));
        }
        Ok(())
    }
}
