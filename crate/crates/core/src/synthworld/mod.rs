//! Procedural synthetic world with oracle-checkable imaging factors.
//!
//! Every image is produced by composing four exact transforms over a scene of
//! colored shapes: viewpoint fixes the layout signature, lens optionally
//! applies a radial fisheye warp, sensor remaps colors, and domain injects
//! noise or palette statistics. A thin reference border rectangle is drawn
//! into every image before the lens stage so that lens identity stays
//! measurable from pixels alone. The oracle detectors in [`oracle`] invert
//! each factor from image statistics without consulting the renderer.

mod dataset;
mod edges;
mod oracle;
mod render;
mod scene;

pub use dataset::{build_dataset, load_dataset, write_dataset, SampleRecord};
pub use edges::{extract_edges, sobel_luminance, EdgeMap};
pub use oracle::{debug_dump, debug_streaks, oracle_classify, OracleReport};
pub use render::{luminance, render_scene, thermal_colormap};
pub use scene::{caption_scene, SceneObject, SceneSpec, Shape};

use crate::factorspace::FactorTuple;
use ndarray::Array3;

/// An H x W x 3 image stored channel-first as [3, H, W] with values in [0,1].
pub type Image = Array3<f32>;

/// Rendering parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct RenderConfig {
    pub height: usize,
    pub width: usize,
    pub supersample: usize,
}

impl RenderConfig {
    pub fn new(size: usize) -> crate::Result<Self> {
        if size != 32 && size != 64 {
            return Err(crate::Error::Precondition(format!(
                "render size must be 32 or 64, got {size}"
            )));
        }
        Ok(RenderConfig { height: size, width: size, supersample: 3 })
    }
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig { height: 32, width: 32, supersample: 3 }
    }
}

/// One labeled training sample.
#[derive(Clone, Debug)]
pub struct LabeledSample {
    pub image: Image,
    pub tuple: FactorTuple,
    pub caption_ids: Vec<usize>,
    pub dataset_id: String,
    pub scene_seed: u64,
}
