//! Query point selection: tree-voxel filtering followed by farthest-point
//! sampling in the 5-D embedding space, plus the plain spatial FPS baseline and
//! the coverage statistics used to compare them.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cloud::{SparseVoxelization, VoxelLabels};
use crate::error::{Error, Result};

pub const EMBEDDING_DIM: usize = 5;
pub const DEFAULT_QUERY_COUNT: usize = 300;
pub const DEFAULT_TREE_THRESHOLD: f64 = 0.5;

pub type Embedding = [f64; EMBEDDING_DIM];

/// Per-voxel embedding and tree probability.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingField {
    embeddings: Vec<Embedding>,
    tree_prob: Vec<f64>,
}

impl EmbeddingField {
    pub fn new(embeddings: Vec<Embedding>, tree_prob: Vec<f64>) -> Result<Self> {
        if embeddings.len() != tree_prob.len() {
            return Err(Error::ShapeMismatch {
                what: "tree probabilities",
                expected: embeddings.len(),
                actual: tree_prob.len(),
            });
        }
        if let Some(i) = embeddings.iter().position(|e| e.iter().any(|c| !c.is_finite())) {
            return Err(Error::InvalidGeometry(format!("embedding {i} is not finite")));
        }
        if let Some(i) = tree_prob.iter().position(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::InvalidConfig(format!(
                "tree probability {} of voxel {i} outside [0, 1]",
                tree_prob[i]
            )));
        }
        Ok(Self { embeddings, tree_prob })
    }

    pub fn len(&self) -> usize {
        self.embeddings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.is_empty()
    }

    pub fn embeddings(&self) -> &[Embedding] {
        &self.embeddings
    }

    pub fn tree_prob(&self) -> &[f64] {
        &self.tree_prob
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMethod {
    Isa,
    FpsEuclidean,
}

/// Distance used by farthest-point sampling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FpsMetric {
    #[default]
    L2,
    L1,
}

impl FpsMetric {
    /// A monotone transform of the distance; only comparisons are needed.
    #[inline]
    fn key(self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            FpsMetric::L2 => a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum(),
            FpsMetric::L1 => a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum(),
        }
    }
}

/// How the first FPS point is chosen among the candidates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StartRule {
    #[default]
    LowestIndex,
    Seeded(u64),
}

impl StartRule {
    fn pick(self, n: usize) -> usize {
        match self {
            StartRule::LowestIndex => 0,
            StartRule::Seeded(seed) => ChaCha8Rng::seed_from_u64(seed).random_range(0..n),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuerySelection {
    /// Selected voxels in selection order.
    pub voxel_indices: Vec<usize>,
    pub method: SelectionMethod,
    pub k_requested: usize,
}

/// Voxels whose tree probability reaches `threshold`, ascending.
pub fn filter_tree_voxels(field: &EmbeddingField, threshold: f64) -> Result<Vec<usize>> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::InvalidConfig(format!("threshold {threshold} outside [0, 1]")));
    }
    let candidates: Vec<usize> = field
        .tree_prob
        .iter()
        .enumerate()
        .filter(|(_, &p)| p >= threshold)
        .map(|(i, _)| i)
        .collect();
    if candidates.is_empty() {
        return Err(Error::NoTreeVoxels { threshold });
    }
    Ok(candidates)
}

/// Greedy farthest-point sampling under L2.
///
/// Returns at most `k` indices in selection order, starting with `start`. Each
/// later pick maximizes the distance to the nearest already-selected point;
/// ties go to the lowest index. `k` larger than the point count is truncated.
pub fn fps<P: AsRef<[f64]>>(points: &[P], k: usize, start: usize) -> Vec<usize> {
    fps_with_metric(points, k, start, FpsMetric::L2)
}

pub fn fps_with_metric<P: AsRef<[f64]>>(points: &[P], k: usize, start: usize, metric: FpsMetric) -> Vec<usize> {
    let n = points.len();
    let k = k.min(n);
    if k == 0 {
        return Vec::new();
    }
    assert!(start < n, "FPS start index {start} out of range for {n} points");

    let mut selected = Vec::with_capacity(k);
    let mut taken = vec![false; n];
    let mut nearest = vec![f64::INFINITY; n];
    let mut current = start;
    loop {
        selected.push(current);
        taken[current] = true;
        if selected.len() == k {
            break;
        }
        let anchor = points[current].as_ref();
        let mut best: Option<(usize, f64)> = None;
        for (i, p) in points.iter().enumerate() {
            if taken[i] {
                continue;
            }
            let d = metric.key(anchor, p.as_ref());
            if d < nearest[i] {
                nearest[i] = d;
            }
            if best.is_none_or(|(_, bd)| nearest[i] > bd) {
                best = Some((i, nearest[i]));
            }
        }
        current = best.expect("k <= n leaves an untaken point").0;
    }
    selected
}

/// ISA selection: drop non-tree voxels, then FPS over the remaining embeddings.
pub fn select_queries_isa(
    field: &EmbeddingField,
    k: usize,
    threshold: f64,
    start: StartRule,
    metric: FpsMetric,
) -> Result<QuerySelection> {
    let candidates = filter_tree_voxels(field, threshold)?;
    let points: Vec<&[f64]> = candidates.iter().map(|&v| &field.embeddings[v][..]).collect();
    let picked = fps_with_metric(&points, k, start.pick(candidates.len()), metric);
    Ok(QuerySelection {
        voxel_indices: picked.into_iter().map(|i| candidates[i]).collect(),
        method: SelectionMethod::Isa,
        k_requested: k,
    })
}

/// Baseline: Euclidean FPS over the centers of all voxels, no filtering.
pub fn select_queries_fps(vox: &SparseVoxelization, k: usize, start: StartRule) -> Result<QuerySelection> {
    if vox.num_voxels() == 0 {
        return Err(Error::EmptyInput("no voxels to sample"));
    }
    let centers: Vec<[f64; 3]> = (0..vox.num_voxels()).map(|v| vox.voxel_center(v)).collect();
    Ok(QuerySelection {
        voxel_indices: fps(&centers, k, start.pick(centers.len())),
        method: SelectionMethod::FpsEuclidean,
        k_requested: k,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionStats {
    /// Fraction of trees in the block hit by at least one query; `None` when
    /// the block holds no trees.
    pub coverage_rate: Option<f64>,
    /// Fraction of queries landing on tree voxels (0 for an empty selection).
    pub tree_voxel_ratio: f64,
    pub instances_present: usize,
    pub instances_hit: usize,
}

pub fn selection_stats(sel: &QuerySelection, gt: &VoxelLabels) -> Result<SelectionStats> {
    if let Some(&bad) = sel.voxel_indices.iter().find(|&&v| v >= gt.len()) {
        return Err(Error::ShapeMismatch { what: "selected voxel index", expected: gt.len(), actual: bad });
    }
    let present = gt.instance_ids();
    let mut hit: Vec<u32> = sel
        .voxel_indices
        .iter()
        .map(|&v| gt.instance[v])
        .filter(|&id| id >= 1)
        .collect();
    let on_trees = hit.len();
    hit.sort_unstable();
    hit.dedup();
    let coverage_rate = (!present.is_empty()).then(|| hit.len() as f64 / present.len() as f64);
    let tree_voxel_ratio = if sel.voxel_indices.is_empty() {
        0.0
    } else {
        on_trees as f64 / sel.voxel_indices.len() as f64
    };
    Ok(SelectionStats {
        coverage_rate,
        tree_voxel_ratio,
        instances_present: present.len(),
        instances_hit: hit.len(),
    })
}
