//! Hybrid multi-scale pillar fusion network for LiDAR pedestrian detection.
//!
//! The pipeline runs point cloud -> per-scale pillar features -> sparse/dense
//! backbone branches -> attention fusion across scales -> center heatmap head.
//! Around it sit a synthetic crowd-scene generator, nuScenes-style dataset
//! tables, detection metrics, and the training loop.

pub mod backbone;
pub mod dataset_io;
pub mod detection_head;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod gradcheck;
pub mod numerics;
pub mod params;
pub mod pillar_encoder;
pub mod scene_synth;
pub mod training;

pub use error::{Error, Result};
