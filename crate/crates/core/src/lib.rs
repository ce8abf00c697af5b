//! Individual-tree and semantic segmentation of forest point clouds.
//!
//! The crate covers the non-learned parts of a query-based segmentation
//! system: sparse voxelization, cylindrical tiling, query selection, the
//! training losses with analytic gradients, score-based block merging and
//! evaluation. Synthetic forests plus oracle predictors stand in for a
//! trained network so the whole pipeline can be exercised end to end.

pub mod cloud;
pub mod error;
pub mod io;
pub mod isa;
pub mod losses;
pub mod merging;
pub mod metrics;
pub mod pipeline;
pub mod sets;
pub mod synth;
pub mod tiling;

pub use cloud::{
    labels_to_points, voxel_labels_from_points, voxelize, InstanceId, PointCloud, Semantic, SparseVoxelization,
    VoxelLabels,
};
pub use error::{Error, ErrorKind, Result};
pub use isa::{select_queries_fps, select_queries_isa, EmbeddingField, QuerySelection, SelectionStats};
pub use merging::{merge_blocks, BlockPrediction, InstanceMask, MergeConfig, MergeStrategy};
pub use metrics::{evaluate, EvalReport, MatchResult};
pub use pipeline::{run_oracle_pipeline, run_pipeline, MaskPredictor, PipelineConfig, PipelineOutput};
pub use synth::{generate_forest, CorruptionParams, ForestParams};
pub use tiling::{cylinder_crop, tile_cloud, BlockGeometry, CylinderBlock};
