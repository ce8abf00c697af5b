//! End-to-end inference: tile → predict per block → merge → evaluate.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cloud::{voxel_labels_from_points, voxelize, InstanceId, PointCloud, Semantic, DEFAULT_VOXEL_RESOLUTION};
use crate::error::{Error, Result};
use crate::isa::{
    select_queries_isa, selection_stats, FpsMetric, SelectionStats, StartRule, DEFAULT_QUERY_COUNT,
    DEFAULT_TREE_THRESHOLD,
};
use crate::merging::{
    merge_blocks, BlockPrediction, MergeConfig, MergeStrategy, StageCounts, DEFAULT_BOUNDARY_MARGIN, DEFAULT_NMS_IOU,
    DEFAULT_SCORE_THRESHOLD,
};
use crate::metrics::{evaluate, EvalReport, DEFAULT_MATCH_IOU};
use crate::synth::{derive_seed, oracle_embeddings, oracle_predictor_for, CorruptionParams};
use crate::tiling::{tile_cloud, CylinderBlock, DEFAULT_RADIUS, DEFAULT_STRIDE};

/// Oracle embedding noise: a tenth of the pull margin.
pub const DEFAULT_EMBEDDING_NOISE: f64 = 0.05;
/// Oracle code separation: twice the push margin.
pub const DEFAULT_EMBEDDING_SEPARATION: f64 = 3.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub radius: f64,
    pub stride: f64,
    pub voxel_resolution: f64,
    pub k_queries: usize,
    pub binary_threshold: f64,
    pub nms_iou: f64,
    pub score_threshold: f64,
    pub boundary_margin: f64,
    pub discard_boundary: bool,
    pub strategy: MergeStrategy,
    pub match_iou: f64,
    pub seed: u64,
    /// Worker count; 0 lets the pool pick.
    pub threads: usize,
    pub embedding_noise: f64,
    pub embedding_separation: f64,
    pub tree_flip_prob: f64,
    pub corruption: CorruptionParams,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            radius: DEFAULT_RADIUS,
            stride: DEFAULT_STRIDE,
            voxel_resolution: DEFAULT_VOXEL_RESOLUTION,
            k_queries: DEFAULT_QUERY_COUNT,
            binary_threshold: DEFAULT_TREE_THRESHOLD,
            nms_iou: DEFAULT_NMS_IOU,
            score_threshold: DEFAULT_SCORE_THRESHOLD,
            boundary_margin: DEFAULT_BOUNDARY_MARGIN,
            discard_boundary: true,
            strategy: MergeStrategy::ScoreNms,
            match_iou: DEFAULT_MATCH_IOU,
            seed: 0,
            threads: 0,
            embedding_noise: DEFAULT_EMBEDDING_NOISE,
            embedding_separation: DEFAULT_EMBEDDING_SEPARATION,
            tree_flip_prob: 0.0,
            corruption: CorruptionParams::NONE,
        }
    }
}

impl PipelineConfig {
    pub fn merge_config(&self) -> MergeConfig {
        MergeConfig {
            nms_iou_threshold: self.nms_iou,
            score_threshold: self.score_threshold,
            boundary_margin: self.boundary_margin,
            block_radius: self.radius,
            discard_boundary: self.discard_boundary,
            strategy: self.strategy,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::InvalidConfig(format!("{name} must be > 0, got {v}")))
            }
        };
        positive("radius", self.radius)?;
        positive("stride", self.stride)?;
        positive("voxel_resolution", self.voxel_resolution)?;
        positive("embedding_separation", self.embedding_separation)?;
        if self.k_queries == 0 {
            return Err(Error::InvalidConfig("k_queries must be > 0".into()));
        }
        // every point must fall inside some window: the farthest a point can be
        // from its nearest grid center is stride/√2
        if self.stride > self.radius * std::f64::consts::SQRT_2 {
            return Err(Error::InvalidConfig(format!(
                "stride {} leaves gaps between windows of radius {}",
                self.stride, self.radius
            )));
        }
        for (name, v) in [
            ("binary_threshold", self.binary_threshold),
            ("match_iou", self.match_iou),
            ("tree_flip_prob", self.tree_flip_prob),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidConfig(format!("{name} = {v} outside [0, 1]")));
            }
        }
        if !(self.embedding_noise >= 0.0 && self.embedding_noise.is_finite()) {
            return Err(Error::InvalidConfig(format!("embedding_noise must be >= 0, got {}", self.embedding_noise)));
        }
        self.corruption.validate()?;
        self.merge_config().validate()
    }
}

/// Predictor output for one block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockOutput {
    pub prediction: BlockPrediction,
    /// Query-selection quality, when the predictor can measure it.
    pub selection: Option<SelectionStats>,
}

/// Anything producing instance masks for a cylinder block.
pub trait MaskPredictor: Sync {
    fn predict(&self, block: &CylinderBlock) -> Result<BlockOutput>;
}

/// Ground-truth driven stand-in for the network.
///
/// Per block: voxelize, build oracle embeddings, pick queries with ISA, and
/// emit a (possibly corrupted) mask for every tree some query lands on.
/// Semantic votes are the true class of every block point.
pub struct OraclePredictor<'a> {
    pub cloud: &'a PointCloud,
    pub config: &'a PipelineConfig,
}

impl MaskPredictor for OraclePredictor<'_> {
    fn predict(&self, block: &CylinderBlock) -> Result<BlockOutput> {
        let cfg = self.config;
        let (semantic, _) = self.cloud.labels()?;
        let sub = self.cloud.subset(&block.point_indices);
        let vox = voxelize(&sub, cfg.voxel_resolution)?;
        let gt = voxel_labels_from_points(&vox, &sub)?;
        let field = oracle_embeddings(
            &vox,
            &gt,
            cfg.embedding_noise,
            cfg.embedding_separation,
            cfg.tree_flip_prob,
            derive_seed(cfg.seed, 2 * block.block_id as u64 + 1),
        )?;
        let (hit, selection) =
            match select_queries_isa(&field, cfg.k_queries, cfg.binary_threshold, StartRule::LowestIndex, FpsMetric::L2) {
                Ok(sel) => {
                    let stats = selection_stats(&sel, &gt)?;
                    let mut hit: Vec<InstanceId> =
                        sel.voxel_indices.iter().map(|&v| gt.instance[v]).filter(|&i| i >= 1).collect();
                    hit.sort_unstable();
                    hit.dedup();
                    (hit, Some(stats))
                }
                // a block holding only ground yields no queries
                Err(Error::NoTreeVoxels { .. }) => (Vec::new(), None),
                Err(e) => return Err(e),
            };
        let masks = oracle_predictor_for(block, self.cloud, &hit, &cfg.corruption, cfg.seed)?;
        let votes = block.point_indices.iter().map(|&p| (p, semantic[p])).collect();
        Ok(BlockOutput {
            prediction: BlockPrediction { geometry: block.geometry(), masks, semantic: votes },
            selection,
        })
    }
}

fn pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::InvalidConfig(format!("cannot start worker pool: {e}")))
}

/// Runs the predictor on every block with `threads` workers. Output order
/// follows `blocks`.
pub fn predict_blocks(blocks: &[CylinderBlock], predictor: &dyn MaskPredictor, threads: usize) -> Result<Vec<BlockOutput>> {
    pool(threads)?.install(|| blocks.par_iter().map(|b| predictor.predict(b)).collect())
}

/// Mean query-selection quality over blocks that contain trees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionSummary {
    pub blocks: usize,
    pub mean_coverage_rate: f64,
    pub mean_tree_voxel_ratio: f64,
}

pub fn summarize_selection(outputs: &[BlockOutput]) -> Option<SelectionSummary> {
    let mut by_block: Vec<(u32, SelectionStats)> = outputs
        .iter()
        .filter_map(|o| o.selection.map(|s| (o.prediction.geometry.block_id, s)))
        .filter(|(_, s)| s.coverage_rate.is_some())
        .collect();
    if by_block.is_empty() {
        return None;
    }
    // fixed summation order regardless of arrival order
    by_block.sort_by_key(|(id, _)| *id);
    let n = by_block.len() as f64;
    Some(SelectionSummary {
        blocks: by_block.len(),
        mean_coverage_rate: by_block.iter().map(|(_, s)| s.coverage_rate.unwrap_or(0.0)).sum::<f64>() / n,
        mean_tree_voxel_ratio: by_block.iter().map(|(_, s)| s.tree_voxel_ratio).sum::<f64>() / n,
    })
}

/// Everything the pipeline reports besides the per-point labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub points: usize,
    pub blocks: usize,
    pub stages: StageCounts,
    pub selection: Option<SelectionSummary>,
    /// Present when the input carries ground truth.
    pub evaluation: Option<EvalReport>,
    pub config: PipelineConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutput {
    pub instance: Vec<InstanceId>,
    pub semantic: Option<Vec<Semantic>>,
    pub report: PipelineReport,
}

/// Merges block predictions and, if `cloud` is labeled, evaluates the result.
pub fn finish(cloud: &PointCloud, outputs: &[BlockOutput], config: &PipelineConfig) -> Result<PipelineOutput> {
    let predictions: Vec<BlockPrediction> = outputs.iter().map(|o| o.prediction.clone()).collect();
    let merged = merge_blocks(&predictions, cloud.positions(), &config.merge_config())?;
    log::info!(
        "merged {} masks from {} blocks into {} instances",
        merged.stages.input,
        outputs.len(),
        merged.stages.final_instances
    );
    let evaluation = match cloud.labels() {
        Ok((gt_sem, gt_inst)) => {
            let sem = merged.semantic.as_deref().map(|p| (p, gt_sem));
            Some(evaluate(&merged.instance, gt_inst, sem, config.match_iou)?)
        }
        Err(Error::MissingLabels) => None,
        Err(e) => return Err(e),
    };
    Ok(PipelineOutput {
        instance: merged.instance,
        semantic: merged.semantic,
        report: PipelineReport {
            points: cloud.len(),
            blocks: outputs.len(),
            stages: merged.stages,
            selection: summarize_selection(outputs),
            evaluation,
            config: config.clone(),
        },
    })
}

/// Tiles `cloud`, runs `predictor` on every block and merges the results.
pub fn run_pipeline(cloud: &PointCloud, predictor: &dyn MaskPredictor, config: &PipelineConfig) -> Result<PipelineOutput> {
    config.validate()?;
    let blocks = tile_cloud(cloud, config.radius, config.stride)?;
    log::info!("tiled {} points into {} blocks", cloud.len(), blocks.len());
    let outputs = predict_blocks(&blocks, predictor, config.threads)?;
    finish(cloud, &outputs, config)
}

/// [`run_pipeline`] with the oracle predictor.
pub fn run_oracle_pipeline(cloud: &PointCloud, config: &PipelineConfig) -> Result<PipelineOutput> {
    run_pipeline(cloud, &OraclePredictor { cloud, config }, config)
}
