//! Synthetic forests and oracle stand-ins for the learned components.
//!
//! Everything here is a pure function of its seed.

use std::collections::{BTreeMap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::cloud::{InstanceId, PointCloud, Semantic, SparseVoxelization, VoxelLabels};
use crate::error::{Error, Result};
use crate::isa::{Embedding, EmbeddingField, EMBEDDING_DIM};
use crate::merging::InstanceMask;
use crate::sets::iou;
use crate::tiling::CylinderBlock;

/// Per-tree placement attempts before giving up.
pub const MAX_PLACEMENT_ATTEMPTS: usize = 10_000;
/// Understory trees are this fraction of a canopy tree's size.
pub const UNDERSTORY_SCALE: f64 = 0.4;
const TRUNK_RADIUS: f64 = 0.15;
const TRUNK_SHARE: f64 = 0.2;
/// Range of the cut position of a split, as a quantile of the mask.
pub const SPLIT_QUANTILES: (f64, f64) = (0.25, 0.75);

/// SplitMix64 step; decorrelates seeds derived from one master seed.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestParams {
    pub n_trees: usize,
    /// Side of the square plot `[0, plot_size]²`.
    pub plot_size: f64,
    pub trunk_height: (f64, f64),
    pub crown_radius: (f64, f64),
    pub points_per_tree: (usize, usize),
    pub understory_fraction: f64,
    /// Ground points per square meter.
    pub ground_density: f64,
    /// Minimum horizontal distance between trunks.
    pub min_spacing: f64,
    pub seed: u64,
}

impl Default for ForestParams {
    fn default() -> Self {
        Self {
            n_trees: 30,
            plot_size: 50.0,
            trunk_height: (6.0, 14.0),
            crown_radius: (1.5, 3.0),
            points_per_tree: (300, 700),
            understory_fraction: 0.25,
            ground_density: 1.5,
            min_spacing: 4.0,
            seed: 0,
        }
    }
}

impl ForestParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        let range = |name: &str, (lo, hi): (f64, f64)| {
            if lo > 0.0 && lo <= hi && hi.is_finite() {
                Ok(())
            } else {
                Err(Error::InvalidConfig(format!("{name} range ({lo}, {hi}) must satisfy 0 < min <= max")))
            }
        };
        range("trunk_height", self.trunk_height)?;
        range("crown_radius", self.crown_radius)?;
        let (pmin, pmax) = self.points_per_tree;
        if pmin < 2 || pmin > pmax {
            return bad(format!("points_per_tree range ({pmin}, {pmax}) must satisfy 2 <= min <= max"));
        }
        if !(self.plot_size > 0.0 && self.plot_size.is_finite()) {
            return bad(format!("plot_size must be > 0, got {}", self.plot_size));
        }
        if !(0.0..=1.0).contains(&self.understory_fraction) {
            return bad(format!("understory_fraction {} outside [0, 1]", self.understory_fraction));
        }
        if !(self.ground_density >= 0.0 && self.ground_density.is_finite()) {
            return bad(format!("ground_density must be >= 0, got {}", self.ground_density));
        }
        if !(self.min_spacing >= 0.0 && self.min_spacing.is_finite()) {
            return bad(format!("min_spacing must be >= 0, got {}", self.min_spacing));
        }
        Ok(())
    }

    /// Parses flat `key = value` lines. `#` starts a comment; unlisted keys
    /// keep their defaults, unknown keys are rejected.
    pub fn parse(text: &str) -> Result<Self> {
        let mut p = ForestParams::default();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .or_else(|| line.split_once(':'))
                .ok_or_else(|| Error::Parse { line: line_no, message: format!("expected `key = value`, got `{line}`") })?;
            let (key, value) = (key.trim(), value.trim());
            let err = |what: &str| Error::Parse { line: line_no, message: format!("{key}: cannot parse `{value}` as {what}") };
            let f = || value.parse::<f64>().map_err(|_| err("a number"));
            let u = || value.parse::<usize>().map_err(|_| err("a non-negative integer"));
            match key {
                "n_trees" => p.n_trees = u()?,
                "plot_size" => p.plot_size = f()?,
                "trunk_height_min" => p.trunk_height.0 = f()?,
                "trunk_height_max" => p.trunk_height.1 = f()?,
                "crown_radius_min" => p.crown_radius.0 = f()?,
                "crown_radius_max" => p.crown_radius.1 = f()?,
                "points_per_tree_min" => p.points_per_tree.0 = u()?,
                "points_per_tree_max" => p.points_per_tree.1 = u()?,
                "understory_fraction" => p.understory_fraction = f()?,
                "ground_density" => p.ground_density = f()?,
                "min_spacing" => p.min_spacing = f()?,
                "seed" => p.seed = value.parse().map_err(|_| err("an unsigned integer"))?,
                _ => return Err(Error::InvalidConfig(format!("unknown forest parameter `{key}` on line {line_no}"))),
            }
        }
        p.validate()?;
        Ok(p)
    }

    pub fn to_text(&self) -> String {
        format!(
            "n_trees = {}\nplot_size = {}\ntrunk_height_min = {}\ntrunk_height_max = {}\n\
             crown_radius_min = {}\ncrown_radius_max = {}\npoints_per_tree_min = {}\npoints_per_tree_max = {}\n\
             understory_fraction = {}\nground_density = {}\nmin_spacing = {}\nseed = {}\n",
            self.n_trees,
            self.plot_size,
            self.trunk_height.0,
            self.trunk_height.1,
            self.crown_radius.0,
            self.crown_radius.1,
            self.points_per_tree.0,
            self.points_per_tree.1,
            self.understory_fraction,
            self.ground_density,
            self.min_spacing,
            self.seed
        )
    }
}

/// Which primitive produced a point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Part {
    Ground,
    Trunk,
    Crown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeSpec {
    pub id: InstanceId,
    pub base: [f64; 2],
    pub trunk_height: f64,
    pub crown_radius: f64,
    pub understory: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticForest {
    pub cloud: PointCloud,
    pub trees: Vec<TreeSpec>,
    /// Generating primitive of every point.
    pub parts: Vec<Part>,
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

fn place_trees(p: &ForestParams, rng: &mut ChaCha8Rng) -> Result<Vec<[f64; 2]>> {
    let mut bases: Vec<[f64; 2]> = Vec::with_capacity(p.n_trees);
    for tree in 0..p.n_trees {
        let mut placed = false;
        for _ in 0..MAX_PLACEMENT_ATTEMPTS {
            let c = [rng.random_range(0.0..p.plot_size), rng.random_range(0.0..p.plot_size)];
            if bases.iter().all(|b| (b[0] - c[0]).hypot(b[1] - c[1]) >= p.min_spacing) {
                bases.push(c);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::PlacementFailed { tree, attempts: MAX_PLACEMENT_ATTEMPTS, min_spacing: p.min_spacing });
        }
    }
    Ok(bases)
}

/// Trees are a thin vertical trunk (wood) under an ellipsoidal crown (leaf);
/// ground points lie in a thin slab around z = 0.
pub fn generate_forest(params: &ForestParams) -> Result<SyntheticForest> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let bases = place_trees(params, &mut rng)?;

    let mut positions = Vec::new();
    let mut semantic = Vec::new();
    let mut instance = Vec::new();
    let mut parts = Vec::new();
    let mut trees = Vec::with_capacity(bases.len());

    for (i, base) in bases.into_iter().enumerate() {
        let id = i as InstanceId + 1;
        let understory = rng.random_bool(params.understory_fraction);
        let scale = if understory { UNDERSTORY_SCALE } else { 1.0 };
        let trunk_height = uniform(&mut rng, params.trunk_height) * scale;
        let crown_radius = uniform(&mut rng, params.crown_radius) * scale;
        let n = rng.random_range(params.points_per_tree.0..=params.points_per_tree.1);
        let n_trunk = ((n as f64 * TRUNK_SHARE).round() as usize).clamp(1, n - 1);

        for _ in 0..n_trunk {
            let a = rng.random_range(0.0..std::f64::consts::TAU);
            let z = rng.random_range(0.1..trunk_height);
            positions.push([base[0] + TRUNK_RADIUS * scale * a.cos(), base[1] + TRUNK_RADIUS * scale * a.sin(), z]);
            semantic.push(Semantic::Wood);
            instance.push(id);
            parts.push(Part::Trunk);
        }
        // crown ellipsoid: horizontal semi-axis r, vertical 1.5 r, resting on the trunk top
        let vertical = 1.5 * crown_radius;
        let center_z = trunk_height + vertical;
        for _ in 0..n - n_trunk {
            let u = loop {
                let u: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
                if u.iter().map(|x| x * x).sum::<f64>() <= 1.0 {
                    break u;
                }
            };
            positions.push([base[0] + crown_radius * u[0], base[1] + crown_radius * u[1], center_z + vertical * u[2]]);
            semantic.push(Semantic::Leaf);
            instance.push(id);
            parts.push(Part::Crown);
        }
        trees.push(TreeSpec { id, base, trunk_height, crown_radius, understory });
    }

    let n_ground = (params.ground_density * params.plot_size * params.plot_size).round() as usize;
    for _ in 0..n_ground {
        positions.push([
            rng.random_range(0.0..params.plot_size),
            rng.random_range(0.0..params.plot_size),
            rng.random_range(-0.05..0.05),
        ]);
        semantic.push(Semantic::Ground);
        instance.push(0);
        parts.push(Part::Ground);
    }

    let cloud = PointCloud::new(positions, Some(semantic), Some(instance))?;
    Ok(SyntheticForest { cloud, trees, parts })
}

/// Nonzero points of the integer lattice `{−2, …, 2}⁵`, ordered by L1 norm and
/// then lexicographically. Distinct entries differ by at least 1 in L1.
fn lattice_codes() -> Vec<[i8; EMBEDDING_DIM]> {
    let mut codes = Vec::with_capacity(3124);
    let mut c = [-2i8; EMBEDDING_DIM];
    loop {
        if c.iter().any(|&x| x != 0) {
            codes.push(c);
        }
        let mut d = EMBEDDING_DIM;
        loop {
            if d == 0 {
                codes.sort_by_key(|c| (c.iter().map(|x| x.unsigned_abs() as u32).sum::<u32>(), *c));
                return codes;
            }
            d -= 1;
            if c[d] < 2 {
                c[d] += 1;
                break;
            }
            c[d] = -2;
        }
    }
}

pub fn codebook_capacity() -> usize {
    5usize.pow(EMBEDDING_DIM as u32) - 1
}

/// Ideal embedding head: every instance sits on its own lattice code scaled
/// by `separation` (pairwise L1 distance ≥ `separation`), background on the
/// origin, each voxel jittered by N(0, σ²). Tree probability is 1 on
/// instance voxels and 0 elsewhere, each flipped with `flip_prob`.
pub fn oracle_embeddings(
    vox: &SparseVoxelization,
    gt: &VoxelLabels,
    noise_sigma: f64,
    separation: f64,
    flip_prob: f64,
    seed: u64,
) -> Result<EmbeddingField> {
    if !(separation > 0.0 && separation.is_finite()) {
        return Err(Error::InvalidConfig(format!("separation must be > 0, got {separation}")));
    }
    if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
        return Err(Error::InvalidConfig(format!("noise sigma must be >= 0, got {noise_sigma}")));
    }
    if !(0.0..=1.0).contains(&flip_prob) {
        return Err(Error::InvalidConfig(format!("flip probability {flip_prob} outside [0, 1]")));
    }
    crate::losses::check_len("voxel labels", vox.num_voxels(), gt.len())?;
    let ids = gt.instance_ids();
    let capacity = codebook_capacity();
    if ids.len() > capacity {
        return Err(Error::CodebookExhausted { capacity, requested: ids.len() });
    }
    let codes = lattice_codes();
    let code_of: HashMap<InstanceId, Embedding> = ids
        .iter()
        .zip(&codes)
        .map(|(&id, c)| (id, std::array::from_fn(|d| c[d] as f64 * separation)))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, noise_sigma).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let mut embeddings = Vec::with_capacity(gt.len());
    let mut tree_prob = Vec::with_capacity(gt.len());
    for &id in &gt.instance {
        let base = code_of.get(&id).copied().unwrap_or([0.0; EMBEDDING_DIM]);
        embeddings.push(std::array::from_fn(|d| base[d] + noise.sample(&mut rng)));
        let is_tree = id >= 1;
        let flipped = flip_prob > 0.0 && rng.random_bool(flip_prob);
        tree_prob.push(if is_tree != flipped { 1.0 } else { 0.0 });
    }
    EmbeddingField::new(embeddings, tree_prob)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorruptionParams {
    /// Probability that a mask is cut in two.
    pub split_prob: f64,
    /// Probability that a tree absorbs its nearest neighbor.
    pub merge_prob: f64,
    /// Probability that a tree is not predicted at all.
    pub drop_prob: f64,
    /// Fraction of each mask's points swapped for nearby non-members.
    pub point_noise: f64,
    /// Standard deviation of the Gaussian added to each score.
    pub score_sigma: f64,
    /// Also emit the uncut mask next to the two pieces of a split.
    #[serde(default)]
    pub keep_source_on_split: bool,
}

impl Default for CorruptionParams {
    fn default() -> Self {
        Self::NONE
    }
}

impl CorruptionParams {
    pub const NONE: CorruptionParams = CorruptionParams {
        split_prob: 0.0,
        merge_prob: 0.0,
        drop_prob: 0.0,
        point_noise: 0.0,
        score_sigma: 0.0,
        keep_source_on_split: false,
    };

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("split_prob", self.split_prob),
            ("merge_prob", self.merge_prob),
            ("drop_prob", self.drop_prob),
            ("point_noise", self.point_noise),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidConfig(format!("{name} = {v} outside [0, 1]")));
            }
        }
        if !(self.score_sigma >= 0.0 && self.score_sigma.is_finite()) {
            return Err(Error::InvalidConfig(format!("score_sigma must be >= 0, got {}", self.score_sigma)));
        }
        Ok(())
    }
}

/// Full-scene point sets of every tree, keyed by id.
pub fn tree_point_sets(instance: &[InstanceId]) -> BTreeMap<InstanceId, Vec<usize>> {
    let mut sets = BTreeMap::<InstanceId, Vec<usize>>::new();
    for (p, &id) in instance.iter().enumerate() {
        if id >= 1 {
            sets.entry(id).or_default().push(p);
        }
    }
    sets
}

fn xy_centroid(points: &[usize], positions: &[[f64; 3]]) -> [f64; 2] {
    let n = points.len() as f64;
    let (sx, sy) = points.iter().fold((0.0, 0.0), |(x, y), &p| (x + positions[p][0], y + positions[p][1]));
    [sx / n, sy / n]
}

/// Cuts a mask with a vertical plane of random orientation placed at a random
/// quantile in `SPLIT_QUANTILES` of the points' projection. Both pieces are
/// non-empty when the mask has ≥ 2 points.
fn split_mask(points: &[usize], positions: &[[f64; 3]], rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let a = rng.random_range(0.0..std::f64::consts::TAU);
    let (nx, ny) = (a.cos(), a.sin());
    let mut proj: Vec<(f64, usize)> = points.iter().map(|&p| (positions[p][0] * nx + positions[p][1] * ny, p)).collect();
    proj.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
    let q = rng.random_range(SPLIT_QUANTILES.0..SPLIT_QUANTILES.1);
    let cut = ((q * proj.len() as f64).round() as usize).clamp(1, proj.len() - 1);
    let mut lo: Vec<usize> = proj[..cut].iter().map(|x| x.1).collect();
    let mut hi: Vec<usize> = proj[cut..].iter().map(|x| x.1).collect();
    lo.sort_unstable();
    hi.sort_unstable();
    (lo, hi)
}

/// Swaps `round(fraction·|mask|)` members for non-members drawn from the
/// block points nearest to the mask's horizontal centroid.
fn perturb_members(
    points: &[usize],
    block_points: &[usize],
    positions: &[[f64; 3]],
    fraction: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<usize> {
    let k = (fraction * points.len() as f64).round() as usize;
    if k == 0 {
        return points.to_vec();
    }
    let c = xy_centroid(points, positions);
    let mut outside: Vec<(f64, usize)> = block_points
        .iter()
        .filter(|p| points.binary_search(p).is_err())
        .map(|&p| ((positions[p][0] - c[0]).hypot(positions[p][1] - c[1]), p))
        .collect();
    let k = k.min(outside.len()).min(points.len() - 1);
    outside.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    outside.truncate((3 * k).max(k));
    let mut kept = points.to_vec();
    for _ in 0..k {
        let i = rng.random_range(0..kept.len());
        kept.swap_remove(i);
    }
    for _ in 0..k {
        let i = rng.random_range(0..outside.len());
        kept.push(outside.swap_remove(i).1);
    }
    kept.sort_unstable();
    kept
}

/// Ideal decoder restricted to `trees`, degraded by `corruption`.
///
/// Starts from the ground-truth masks of the listed trees inside the block,
/// then drops, merges, splits and perturbs them in that order. A mask's score
/// is its IoU with the full-scene point set of the tree contributing most of
/// its points, plus clipped Gaussian noise.
pub fn oracle_predictor_for(
    block: &CylinderBlock,
    cloud: &PointCloud,
    trees: &[InstanceId],
    corruption: &CorruptionParams,
    seed: u64,
) -> Result<Vec<InstanceMask>> {
    corruption.validate()?;
    if block.point_indices.is_empty() {
        return Err(Error::EmptyInput("oracle predictor needs a non-empty block"));
    }
    let (_, instance) = cloud.labels()?;
    let positions = cloud.positions();
    let scene = tree_point_sets(instance);
    let mut in_block = BTreeMap::<InstanceId, Vec<usize>>::new();
    for &p in &block.point_indices {
        let id = instance[p];
        if id >= 1 && trees.binary_search(&id).is_ok() {
            in_block.entry(id).or_default().push(p);
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, block.block_id as u64));
    let mut masks: Vec<Vec<usize>> = in_block
        .into_values()
        .filter(|_| !(corruption.drop_prob > 0.0 && rng.random_bool(corruption.drop_prob)))
        .collect();

    if corruption.merge_prob > 0.0 {
        let centroids: Vec<[f64; 2]> = masks.iter().map(|m| xy_centroid(m, positions)).collect();
        // each tree takes part in at most one merge
        let mut used = vec![false; masks.len()];
        let mut absorbed = vec![false; masks.len()];
        for i in 0..masks.len() {
            if used[i] || !rng.random_bool(corruption.merge_prob) {
                continue;
            }
            let nearest = (0..masks.len())
                .filter(|&j| j != i && !used[j])
                .min_by(|&a, &b| {
                    let da = (centroids[a][0] - centroids[i][0]).hypot(centroids[a][1] - centroids[i][1]);
                    let db = (centroids[b][0] - centroids[i][0]).hypot(centroids[b][1] - centroids[i][1]);
                    da.total_cmp(&db).then(a.cmp(&b))
                });
            if let Some(j) = nearest {
                used[i] = true;
                used[j] = true;
                absorbed[j] = true;
                let other = std::mem::take(&mut masks[j]);
                masks[i].extend(other);
                masks[i].sort_unstable();
            }
        }
        masks = masks.into_iter().zip(absorbed).filter(|(_, a)| !a).map(|(m, _)| m).collect();
    }

    let mut pieces: Vec<Vec<usize>> = Vec::with_capacity(masks.len() * 2);
    for m in masks {
        if corruption.split_prob > 0.0 && m.len() >= 2 && rng.random_bool(corruption.split_prob) {
            let (a, b) = split_mask(&m, positions, &mut rng);
            if corruption.keep_source_on_split {
                pieces.push(m);
            }
            pieces.push(a);
            pieces.push(b);
        } else {
            pieces.push(m);
        }
    }

    let score_noise = Normal::new(0.0, corruption.score_sigma).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let mut out = Vec::with_capacity(pieces.len());
    for (q, m) in pieces.into_iter().enumerate() {
        let m = if corruption.point_noise > 0.0 {
            perturb_members(&m, &block.point_indices, positions, corruption.point_noise, &mut rng)
        } else {
            m
        };
        let mut votes = BTreeMap::<InstanceId, usize>::new();
        for &p in &m {
            if instance[p] >= 1 {
                *votes.entry(instance[p]).or_default() += 1;
            }
        }
        let source = votes.iter().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0))).map(|(&id, _)| id);
        let quality = source.map_or(0.0, |id| iou(&m, &scene[&id]));
        let noise = if corruption.score_sigma > 0.0 { score_noise.sample(&mut rng) } else { 0.0 };
        out.push(InstanceMask::new(m, (quality + noise).clamp(0.0, 1.0), block.block_id, q as u32));
    }
    Ok(out)
}

/// [`oracle_predictor_for`] over every tree present in the block.
pub fn oracle_predictor(
    block: &CylinderBlock,
    cloud: &PointCloud,
    corruption: &CorruptionParams,
    seed: u64,
) -> Result<Vec<InstanceMask>> {
    let (_, instance) = cloud.labels()?;
    let mut trees: Vec<InstanceId> = block.point_indices.iter().map(|&p| instance[p]).filter(|&i| i >= 1).collect();
    trees.sort_unstable();
    trees.dedup();
    oracle_predictor_for(block, cloud, &trees, corruption, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cloud::{voxel_labels_from_points, voxelize};
    use crate::isa::{select_queries_isa, selection_stats, FpsMetric, StartRule};
    use crate::losses::{discriminative_loss, DiscMargins};
    use crate::tiling::cylinder_crop;

    fn small() -> ForestParams {
        ForestParams { n_trees: 5, plot_size: 20.0, min_spacing: 3.0, ground_density: 0.5, seed: 3, ..Default::default() }
    }

    #[test]
    fn exact_tree_count() {
        let f = generate_forest(&small()).unwrap();
        let ids = tree_point_sets(f.cloud.instance().unwrap());
        assert_eq!(ids.keys().copied().collect::<Vec<_>>(), vec![1, 2, 3, 4, 5]);
    }

    #[test]
    fn deterministic() {
        let a = generate_forest(&small()).unwrap();
        let b = generate_forest(&small()).unwrap();
        assert_eq!(crate::io::write_ply(&a.cloud), crate::io::write_ply(&b.cloud));
        let c = generate_forest(&ForestParams { seed: 4, ..small() }).unwrap();
        assert_ne!(a.cloud, c.cloud);
    }

    #[test]
    fn spacing_respected() {
        let p = ForestParams { n_trees: 40, min_spacing: 5.0, ..Default::default() };
        let f = generate_forest(&p).unwrap();
        for (i, a) in f.trees.iter().enumerate() {
            for b in &f.trees[i + 1..] {
                let d = ((a.base[0] - b.base[0]).powi(2) + (a.base[1] - b.base[1]).powi(2)).sqrt();
                assert!(d >= 5.0, "trees {} and {} are {d} m apart", a.id, b.id);
            }
        }
    }

    #[test]
    fn infeasible_spacing() {
        let p = ForestParams { n_trees: 50, plot_size: 10.0, min_spacing: 5.0, ..Default::default() };
        assert!(matches!(generate_forest(&p), Err(Error::PlacementFailed { .. })));
    }

    #[test]
    fn labels_follow_parts() {
        let f = generate_forest(&small()).unwrap();
        let (sem, inst) = f.cloud.labels().unwrap();
        for i in 0..f.cloud.len() {
            match f.parts[i] {
                Part::Ground => assert_eq!((sem[i], inst[i]), (Semantic::Ground, 0)),
                Part::Trunk => assert!(sem[i] == Semantic::Wood && inst[i] >= 1),
                Part::Crown => assert!(sem[i] == Semantic::Leaf && inst[i] >= 1),
            }
        }
        let understory = f.trees.iter().filter(|t| t.understory).count();
        assert!(understory <= f.trees.len());
    }

    #[test]
    fn params_text_round_trip() {
        let p = ForestParams { n_trees: 7, seed: 99, min_spacing: 2.5, ..Default::default() };
        assert_eq!(ForestParams::parse(&p.to_text()).unwrap(), p);
        let q = ForestParams::parse("# comment\nn_trees = 3  # trailing\n\nseed: 5\n").unwrap();
        assert_eq!((q.n_trees, q.seed), (3, 5));
        assert!(matches!(ForestParams::parse("bogus = 1"), Err(Error::InvalidConfig(_))));
        assert!(matches!(ForestParams::parse("n_trees = x"), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(ForestParams::parse("understory_fraction = 2"), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn codes_are_separated() {
        let codes = lattice_codes();
        assert_eq!(codes.len(), codebook_capacity());
        for (i, a) in codes.iter().enumerate().take(200) {
            assert!(a.iter().any(|&x| x != 0));
            for b in &codes[i + 1..200] {
                let d: i32 = a.iter().zip(b).map(|(x, y)| (*x as i32 - *y as i32).abs()).sum();
                assert!(d >= 1);
            }
        }
    }

    fn voxel_scene() -> (SparseVoxelization, VoxelLabels) {
        let f = generate_forest(&small()).unwrap();
        let vox = voxelize(&f.cloud, 0.2).unwrap();
        let gt = voxel_labels_from_points(&vox, &f.cloud).unwrap();
        (vox, gt)
    }

    #[test]
    fn noiseless_embeddings_leave_hinges_inactive() {
        let (vox, gt) = voxel_scene();
        let field = oracle_embeddings(&vox, &gt, 0.0, 3.0, 0.0, 1).unwrap();
        let d = discriminative_loss(field.embeddings(), &gt.instance, DiscMargins::default()).unwrap();
        assert_eq!(d.var, 0.0);
        assert_eq!(d.dist, 0.0);
    }

    #[test]
    fn noiseless_embeddings_cover_every_tree() {
        let (vox, gt) = voxel_scene();
        let field = oracle_embeddings(&vox, &gt, 0.0, 3.0, 0.0, 1).unwrap();
        let k = gt.instance_ids().len();
        let sel = select_queries_isa(&field, k, 0.5, StartRule::LowestIndex, FpsMetric::L2).unwrap();
        let stats = selection_stats(&sel, &gt).unwrap();
        assert_eq!(stats.coverage_rate, Some(1.0));
        assert_eq!(stats.tree_voxel_ratio, 1.0);
    }

    #[test]
    fn codebook_limit() {
        let n = codebook_capacity() + 1;
        let vox = SparseVoxelization {
            resolution: 1.0,
            voxel_keys: (0..n as i64).map(|i| [i, 0, 0]).collect(),
            point_to_voxel: (0..n).collect(),
            voxel_to_points: (0..n).map(|i| vec![i]).collect(),
        };
        let gt = VoxelLabels { semantic: vec![Semantic::Leaf; n], instance: (1..=n as u32).collect() };
        assert_eq!(
            oracle_embeddings(&vox, &gt, 0.0, 3.0, 0.0, 0).map(|_| ()),
            Err(Error::CodebookExhausted { capacity: n - 1, requested: n })
        );
    }

    fn full_block(cloud: &PointCloud) -> CylinderBlock {
        cylinder_crop(cloud, [10.0, 10.0], 100.0).unwrap()
    }

    #[test]
    fn zero_corruption_reproduces_truth() {
        let f = generate_forest(&small()).unwrap();
        let masks = oracle_predictor(&full_block(&f.cloud), &f.cloud, &CorruptionParams::NONE, 0).unwrap();
        let truth = tree_point_sets(f.cloud.instance().unwrap());
        assert_eq!(masks.len(), truth.len());
        for (m, t) in masks.iter().zip(truth.values()) {
            assert_eq!(&m.point_ids, t);
            assert_eq!(m.score, 1.0);
        }
    }

    #[test]
    fn full_split_doubles_masks() {
        let f = generate_forest(&small()).unwrap();
        let c = CorruptionParams { split_prob: 1.0, ..CorruptionParams::NONE };
        let masks = oracle_predictor(&full_block(&f.cloud), &f.cloud, &c, 0).unwrap();
        assert_eq!(masks.len(), 10);
        assert!(masks.iter().all(|m| !m.is_empty()));
        let c = CorruptionParams { keep_source_on_split: true, ..c };
        assert_eq!(oracle_predictor(&full_block(&f.cloud), &f.cloud, &c, 0).unwrap().len(), 15);
    }

    #[test]
    fn drop_and_merge() {
        let f = generate_forest(&small()).unwrap();
        let b = full_block(&f.cloud);
        let all_dropped = CorruptionParams { drop_prob: 1.0, ..CorruptionParams::NONE };
        assert!(oracle_predictor(&b, &f.cloud, &all_dropped, 0).unwrap().is_empty());
        let merged = CorruptionParams { merge_prob: 1.0, ..CorruptionParams::NONE };
        let masks = oracle_predictor(&b, &f.cloud, &merged, 0).unwrap();
        // pairs fuse greedily: 5 trees become 3 masks
        assert_eq!(masks.len(), 3);
        let total: usize = masks.iter().map(|m| m.len()).sum();
        assert_eq!(total, tree_point_sets(f.cloud.instance().unwrap()).values().map(Vec::len).sum::<usize>());
    }

    #[test]
    fn scores_fall_with_point_noise() {
        let f = generate_forest(&small()).unwrap();
        let b = full_block(&f.cloud);
        let mean = |noise: f64| -> f64 {
            let c = CorruptionParams { point_noise: noise, ..CorruptionParams::NONE };
            let scores: Vec<f64> = (0..20u64)
                .flat_map(|s| oracle_predictor(&b, &f.cloud, &c, s).unwrap())
                .map(|m| m.score)
                .collect();
            scores.iter().sum::<f64>() / scores.len() as f64
        };
        let (a, b2, c) = (mean(0.0), mean(0.1), mean(0.3));
        assert!(a >= b2 && b2 >= c, "{a} {b2} {c}");
    }

    #[test]
    fn predictor_is_seeded() {
        let f = generate_forest(&small()).unwrap();
        let b = full_block(&f.cloud);
        let c = CorruptionParams { split_prob: 0.5, point_noise: 0.1, score_sigma: 0.05, ..CorruptionParams::NONE };
        assert_eq!(oracle_predictor(&b, &f.cloud, &c, 7).unwrap(), oracle_predictor(&b, &f.cloud, &c, 7).unwrap());
    }
}
