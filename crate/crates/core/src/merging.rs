//! Fusing per-block predictions into one scene labeling.
//!
//! The default fold is boundary discard → score filter → NMS → point
//! resolution. All masks are ranked by a total order (score descending, then
//! block id, then query index), which makes the result independent of the
//! order in which blocks arrive.

use std::cmp::Ordering;
use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::cloud::{InstanceId, Semantic};
use crate::error::{Error, Result};
use crate::sets::sorted_unique;
use crate::tiling::{horizontal_distance, BlockGeometry, DEFAULT_RADIUS};

pub const DEFAULT_NMS_IOU: f64 = 0.3;
pub const DEFAULT_SCORE_THRESHOLD: f64 = 0.4;
pub const DEFAULT_BOUNDARY_MARGIN: f64 = 0.5;

/// A predicted tree: a set of global point indices with a confidence.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceMask {
    /// Ascending, unique.
    pub point_ids: Vec<usize>,
    pub score: f64,
    pub block_id: u32,
    pub query_index: u32,
}

impl InstanceMask {
    pub fn new(point_ids: Vec<usize>, score: f64, block_id: u32, query_index: u32) -> Self {
        Self { point_ids: sorted_unique(point_ids), score, block_id, query_index }
    }

    pub fn len(&self) -> usize {
        self.point_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.point_ids.is_empty()
    }
}

/// Scene-wide ranking: higher score first, then lower block id, then lower
/// query index.
pub fn rank_order(a: &InstanceMask, b: &InstanceMask) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.block_id.cmp(&b.block_id))
        .then(a.query_index.cmp(&b.query_index))
        .then_with(|| a.point_ids.cmp(&b.point_ids))
}

fn ranked(masks: &[InstanceMask]) -> Vec<InstanceMask> {
    let mut v = masks.to_vec();
    v.sort_by(rank_order);
    v
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum MergeStrategy {
    /// Global ranking and NMS.
    ScoreNms,
    /// Union of masks whose min-normalized overlap reaches the threshold.
    Overlap { threshold: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MergeConfig {
    pub nms_iou_threshold: f64,
    pub score_threshold: f64,
    pub boundary_margin: f64,
    pub block_radius: f64,
    pub discard_boundary: bool,
    pub strategy: MergeStrategy,
}

impl Default for MergeConfig {
    fn default() -> Self {
        Self {
            nms_iou_threshold: DEFAULT_NMS_IOU,
            score_threshold: DEFAULT_SCORE_THRESHOLD,
            boundary_margin: DEFAULT_BOUNDARY_MARGIN,
            block_radius: DEFAULT_RADIUS,
            discard_boundary: true,
            strategy: MergeStrategy::ScoreNms,
        }
    }
}

impl MergeConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::InvalidConfig(format!("{name} = {v} outside [0, 1]")))
            }
        };
        unit("nms_iou_threshold", self.nms_iou_threshold)?;
        unit("score_threshold", self.score_threshold)?;
        if !(self.block_radius > 0.0) {
            return Err(Error::InvalidConfig("block_radius must be > 0".into()));
        }
        if !(self.boundary_margin >= 0.0 && self.boundary_margin < self.block_radius) {
            return Err(Error::InvalidConfig(format!(
                "boundary_margin {} must lie in [0, block_radius {})",
                self.boundary_margin, self.block_radius
            )));
        }
        if let MergeStrategy::Overlap { threshold } = self.strategy {
            if !(threshold > 0.0) {
                return Err(Error::InvalidConfig("overlap threshold must be > 0".into()));
            }
        }
        Ok(())
    }
}

/// Keeps masks scoring at least `threshold`, order preserved.
pub fn score_filter(masks: &[InstanceMask], threshold: f64) -> Vec<InstanceMask> {
    masks.iter().filter(|m| m.score >= threshold).cloned().collect()
}

/// Drops every mask with a point farther than `radius − margin` (horizontally)
/// from the center of the block that produced it.
pub fn discard_boundary_masks(
    masks: &[InstanceMask],
    blocks: &[BlockGeometry],
    positions: &[[f64; 3]],
    margin: f64,
) -> Result<Vec<InstanceMask>> {
    let by_id: HashMap<u32, &BlockGeometry> = blocks.iter().map(|b| (b.block_id, b)).collect();
    let mut kept = Vec::with_capacity(masks.len());
    for m in masks {
        let block = by_id.get(&m.block_id).ok_or(Error::UnknownBlock(m.block_id))?;
        let limit = block.radius - margin;
        let mut inside = true;
        for &p in &m.point_ids {
            let pos = positions.get(p).ok_or(Error::ShapeMismatch {
                what: "mask point id",
                expected: positions.len(),
                actual: p,
            })?;
            if horizontal_distance(pos, block.center) > limit {
                inside = false;
                break;
            }
        }
        if inside {
            kept.push(m.clone());
        }
    }
    Ok(kept)
}

/// Point → indices of masks containing it, for sparse overlap counting.
struct OwnerIndex {
    owners: Vec<Vec<u32>>,
}

impl OwnerIndex {
    fn new() -> Self {
        Self { owners: Vec::new() }
    }

    fn insert(&mut self, mask: usize, points: &[usize]) {
        if let Some(&last) = points.last() {
            if last >= self.owners.len() {
                self.owners.resize(last + 1, Vec::new());
            }
        }
        for &p in points {
            self.owners[p].push(mask as u32);
        }
    }

    /// `(mask, |mask ∩ points|)` for every indexed mask sharing a point.
    fn overlaps(&self, points: &[usize]) -> Vec<(usize, usize)> {
        let mut counts: HashMap<u32, usize> = HashMap::new();
        for &p in points {
            if let Some(list) = self.owners.get(p) {
                for &m in list {
                    *counts.entry(m).or_default() += 1;
                }
            }
        }
        let mut v: Vec<(usize, usize)> = counts.into_iter().map(|(m, c)| (m as usize, c)).collect();
        v.sort_unstable();
        v
    }
}

/// Greedy non-maximum suppression over the scene-wide ranking.
///
/// A mask is suppressed when its point-set IoU with an already kept mask
/// exceeds `iou_threshold`; so a threshold of 1 keeps everything and a
/// threshold of 0 keeps a pairwise-disjoint set. Output is in rank order.
pub fn score_nms(masks: &[InstanceMask], iou_threshold: f64) -> Vec<InstanceMask> {
    let mut kept: Vec<InstanceMask> = Vec::new();
    let mut index = OwnerIndex::new();
    for m in ranked(masks) {
        let suppressed = index.overlaps(&m.point_ids).into_iter().any(|(k, inter)| {
            let union = m.len() + kept[k].len() - inter;
            inter as f64 / union as f64 > iou_threshold
        });
        if !suppressed {
            index.insert(kept.len(), &m.point_ids);
            kept.push(m);
        }
    }
    kept
}

/// Per-point instance ids from overlapping masks.
///
/// Each point goes to its best-ranked claimant. Masks left without any point
/// are dropped, and the survivors are numbered 1, 2, … in rank order; points
/// no mask claims get 0.
pub fn resolve_points(masks: &[InstanceMask], num_points: usize) -> Result<Vec<InstanceId>> {
    Ok(resolve_with_masks(masks, num_points)?.0)
}

/// [`resolve_points`] that also returns the final masks (points they own after
/// arbitration), where mask `i` carries instance id `i + 1`.
pub fn resolve_with_masks(masks: &[InstanceMask], num_points: usize) -> Result<(Vec<InstanceId>, Vec<InstanceMask>)> {
    let order = ranked(masks);
    let mut claim: Vec<u32> = vec![u32::MAX; num_points];
    for (rank, m) in order.iter().enumerate() {
        for &p in &m.point_ids {
            let slot = claim.get_mut(p).ok_or(Error::ShapeMismatch {
                what: "mask point id",
                expected: num_points,
                actual: p,
            })?;
            if *slot == u32::MAX {
                *slot = rank as u32;
            }
        }
    }
    let mut owned: Vec<Vec<usize>> = vec![Vec::new(); order.len()];
    for (p, &r) in claim.iter().enumerate() {
        if r != u32::MAX {
            owned[r as usize].push(p);
        }
    }
    let mut new_id = vec![0 as InstanceId; order.len()];
    let mut finals = Vec::new();
    for (rank, points) in owned.into_iter().enumerate() {
        if !points.is_empty() {
            finals.push(InstanceMask { point_ids: points, ..order[rank].clone() });
            new_id[rank] = finals.len() as InstanceId;
        }
    }
    let ids = claim.iter().map(|&r| if r == u32::MAX { 0 } else { new_id[r as usize] }).collect();
    Ok((ids, finals))
}

struct DisjointSet {
    parent: Vec<usize>,
}

impl DisjointSet {
    fn new(n: usize) -> Self {
        Self { parent: (0..n).collect() }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    /// Keeps the smaller index as root.
    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi] = lo;
        }
    }
}

/// Rule-based baseline: masks are linked when `|A ∩ B| / min(|A|, |B|)`
/// reaches `threshold`, and every connected component becomes one mask with
/// the union of its points and the best member's score and identity.
pub fn overlap_merge_baseline(masks: &[InstanceMask], threshold: f64) -> Vec<InstanceMask> {
    let order = ranked(masks);
    let mut sets = DisjointSet::new(order.len());
    let mut index = OwnerIndex::new();
    for (i, m) in order.iter().enumerate() {
        for (j, inter) in index.overlaps(&m.point_ids) {
            let smaller = m.len().min(order[j].len());
            if smaller > 0 && inter as f64 / smaller as f64 >= threshold {
                sets.union(i, j);
            }
        }
        index.insert(i, &m.point_ids);
    }
    let mut groups: Vec<(usize, Vec<usize>)> = Vec::new();
    let mut slot: HashMap<usize, usize> = HashMap::new();
    for i in 0..order.len() {
        let root = sets.find(i);
        let g = *slot.entry(root).or_insert_with(|| {
            groups.push((root, Vec::new()));
            groups.len() - 1
        });
        groups[g].1.extend_from_slice(&order[i].point_ids);
    }
    // roots are the best-ranked member of each component, so this stays in rank order
    groups
        .into_iter()
        .map(|(root, points)| InstanceMask { point_ids: sorted_unique(points), ..order[root].clone() })
        .collect()
}

/// Majority class per point over all block votes; ties go to the lower class.
pub fn semantic_vote(votes: &[(usize, Semantic)], num_points: usize) -> Result<Vec<Semantic>> {
    let mut counts = vec![[0u32; Semantic::COUNT]; num_points];
    for &(p, c) in votes {
        counts
            .get_mut(p)
            .ok_or(Error::ShapeMismatch { what: "vote point id", expected: num_points, actual: p })?[c.index()] += 1;
    }
    let unvoted: Vec<usize> = (0..num_points).filter(|&p| counts[p].iter().all(|&c| c == 0)).collect();
    if let Some(&first) = unvoted.first() {
        return Err(Error::Unvoted { count: unvoted.len(), first });
    }
    Ok(counts
        .iter()
        .map(|c| {
            // first maximum, so ties go to the lower class
            let best = (1..Semantic::COUNT).fold(0, |b, i| if c[i] > c[b] { i } else { b });
            Semantic::ALL[best]
        })
        .collect())
}

/// One block's predictor output.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockPrediction {
    pub geometry: BlockGeometry,
    pub masks: Vec<InstanceMask>,
    /// `(global point id, class)` votes; empty when the predictor gives none.
    pub semantic: Vec<(usize, Semantic)>,
}

/// Mask counts after each merging stage.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StageCounts {
    pub input: usize,
    pub after_boundary: usize,
    pub after_score_filter: usize,
    pub after_merge: usize,
    pub final_instances: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MergeOutcome {
    pub instance: Vec<InstanceId>,
    /// `None` when no block supplied semantic votes.
    pub semantic: Option<Vec<Semantic>>,
    /// Final masks; mask `i` is instance `i + 1`.
    pub masks: Vec<InstanceMask>,
    pub stages: StageCounts,
}

/// Masks surviving boundary discard and the score filter, before merging.
pub fn pre_merge_masks(
    blocks: &[BlockPrediction],
    positions: &[[f64; 3]],
    config: &MergeConfig,
    stages: &mut StageCounts,
) -> Result<Vec<InstanceMask>> {
    let mut all: Vec<InstanceMask> = blocks.iter().flat_map(|b| b.masks.iter().cloned()).collect();
    all.sort_by(rank_order);
    stages.input = all.len();
    let geometry: Vec<BlockGeometry> = blocks.iter().map(|b| b.geometry).collect();
    let all = if config.discard_boundary {
        discard_boundary_masks(&all, &geometry, positions, config.boundary_margin)?
    } else {
        all
    };
    stages.after_boundary = all.len();
    log::debug!("boundary discard: {} -> {} masks", stages.input, stages.after_boundary);
    let all = score_filter(&all, config.score_threshold);
    stages.after_score_filter = all.len();
    log::debug!("score filter: {} -> {} masks", stages.after_boundary, stages.after_score_filter);
    Ok(all)
}

/// Runs the full merging fold over all block predictions.
pub fn merge_blocks(
    blocks: &[BlockPrediction],
    positions: &[[f64; 3]],
    config: &MergeConfig,
) -> Result<MergeOutcome> {
    config.validate()?;
    let mut stages = StageCounts::default();
    let filtered = pre_merge_masks(blocks, positions, config, &mut stages)?;
    let merged = match config.strategy {
        MergeStrategy::ScoreNms => score_nms(&filtered, config.nms_iou_threshold),
        MergeStrategy::Overlap { threshold } => overlap_merge_baseline(&filtered, threshold),
    };
    stages.after_merge = merged.len();
    log::debug!("merge: {} -> {} masks", stages.after_score_filter, stages.after_merge);
    let (instance, masks) = resolve_with_masks(&merged, positions.len())?;
    stages.final_instances = masks.len();

    let votes: Vec<(usize, Semantic)> = blocks.iter().flat_map(|b| b.semantic.iter().copied()).collect();
    let semantic = if votes.is_empty() { None } else { Some(semantic_vote(&votes, positions.len())?) };
    Ok(MergeOutcome { instance, semantic, masks, stages })
}

/// On-disk mask record of an external predictor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskRecord {
    pub score: f64,
    pub point_ids: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query_index: Option<u32>,
}

/// On-disk block file: `{block_id, center, radius, masks: [{score, point_ids}], semantic?}`.
/// `semantic` holds `[point_id, class]` pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockMaskFile {
    pub block_id: u32,
    pub center: [f64; 2],
    pub radius: f64,
    pub masks: Vec<MaskRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub semantic: Option<Vec<(usize, u8)>>,
}

impl BlockMaskFile {
    pub fn into_prediction(self) -> Result<BlockPrediction> {
        let geometry = BlockGeometry { block_id: self.block_id, center: self.center, radius: self.radius };
        let masks = self
            .masks
            .into_iter()
            .enumerate()
            .map(|(i, r)| {
                if !(0.0..=1.0).contains(&r.score) {
                    return Err(Error::InvalidLabel(format!(
                        "mask {i} of block {} has score {} outside [0, 1]",
                        self.block_id, r.score
                    )));
                }
                Ok(InstanceMask::new(r.point_ids, r.score, self.block_id, r.query_index.unwrap_or(i as u32)))
            })
            .collect::<Result<Vec<_>>>()?;
        let semantic = self
            .semantic
            .unwrap_or_default()
            .into_iter()
            .map(|(p, c)| Ok((p, Semantic::from_index(c as i64)?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(BlockPrediction { geometry, masks, semantic })
    }

    pub fn from_prediction(p: &BlockPrediction) -> Self {
        BlockMaskFile {
            block_id: p.geometry.block_id,
            center: p.geometry.center,
            radius: p.geometry.radius,
            masks: p
                .masks
                .iter()
                .map(|m| MaskRecord { score: m.score, point_ids: m.point_ids.clone(), query_index: Some(m.query_index) })
                .collect(),
            semantic: (!p.semantic.is_empty()).then(|| p.semantic.iter().map(|&(i, c)| (i, c.index() as u8)).collect()),
        }
    }
}

/// Parses a JSON document holding one block object or an array of them.
pub fn parse_block_files(text: &str) -> Result<Vec<BlockPrediction>> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum OneOrMany {
        One(BlockMaskFile),
        Many(Vec<BlockMaskFile>),
    }
    let parsed: OneOrMany = serde_json::from_str(text)
        .map_err(|e| Error::Parse { line: e.line(), message: e.to_string() })?;
    let files = match parsed {
        OneOrMany::One(f) => vec![f],
        OneOrMany::Many(v) => v,
    };
    files.into_iter().map(BlockMaskFile::into_prediction).collect()
}
