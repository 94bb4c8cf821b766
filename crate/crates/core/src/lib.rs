//! Instance-centroid point sampling for LiDAR point clouds.
//!
//! The pipeline partitions a cloud into blocks, classifies blocks as
//! foreground or background with a small learned filter, and replaces
//! farthest point sampling with confidence-ranked block centroids plus
//! near-range foreground points. Exact FPS baselines, a synthetic scene
//! generator and a benchmark harness live alongside it.
//!
//! Geometry and learning code is generic over [`Real`]; the aliases at
//! the crate root fix the precisions used by the pipeline (f32 point
//! storage, f64 networks and losses).

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod ball_query;
pub mod bench;
pub mod ciss;
pub mod cloud;
pub mod error;
pub mod grid;
pub mod labels;
pub mod lfdbf;
pub mod nn;
pub mod pipeline;
pub mod real;
pub mod rng;
pub mod samplers;
pub mod scene;

pub use ball_query::{ball_query, HashGrid};
pub use cloud::{load_cloud, save_cloud, CloudFormat};
pub use error::{Error, Result};
pub use grid::{augment, partition, BlockKey, GridConfig};
pub use labels::{load_labels, save_labels, BoxLabel, LabelSet};
pub use real::Real;
pub use pipeline::{icfps, IcfpsConfig, Preset, WeightsBundle};
pub use rng::Rng;

/// Point storage precision.
pub type PointCloud = cloud::PointCloud<f32>;
pub type BlockGrid = grid::BlockGrid<f32>;
pub type AugmentedBlockMatrix = grid::AugmentedBlockMatrix<f32>;

/// Network precision.
pub type MlpNet = nn::Mlp<f64>;
pub type CenterSet = ciss::CenterSet<f64>;
