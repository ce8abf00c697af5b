//! Cylindrical cropping and sliding-window block layout.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cloud::PointCloud;
use crate::error::{Error, Result};

pub const DEFAULT_RADIUS: f64 = 16.0;
pub const DEFAULT_STRIDE: f64 = 4.0;

/// Vertical cylinder of points cut from a parent cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct CylinderBlock {
    pub block_id: u32,
    pub center: [f64; 2],
    pub radius: f64,
    /// Ascending indices into the parent cloud.
    pub point_indices: Vec<usize>,
}

impl CylinderBlock {
    pub fn geometry(&self) -> BlockGeometry {
        BlockGeometry { block_id: self.block_id, center: self.center, radius: self.radius }
    }
}

/// Block placement without its point list.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlockGeometry {
    pub block_id: u32,
    pub center: [f64; 2],
    pub radius: f64,
}

#[inline]
pub fn horizontal_distance(p: &[f64; 3], center: [f64; 2]) -> f64 {
    (p[0] - center[0]).hypot(p[1] - center[1])
}

/// All points whose horizontal distance to `center` is at most `radius`.
pub fn cylinder_crop(cloud: &PointCloud, center: [f64; 2], radius: f64) -> Result<CylinderBlock> {
    if !(radius > 0.0) {
        return Err(Error::InvalidConfig(format!("cylinder radius must be > 0, got {radius}")));
    }
    let point_indices: Vec<usize> = cloud
        .positions()
        .iter()
        .enumerate()
        .filter(|(_, p)| horizontal_distance(p, center) <= radius)
        .map(|(i, _)| i)
        .collect();
    if point_indices.is_empty() {
        return Err(Error::EmptyBlock { x: center[0], y: center[1], radius });
    }
    Ok(CylinderBlock { block_id: 0, center, radius, point_indices })
}

/// Horizontal axis-aligned rectangle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct XyBounds {
    pub min: [f64; 2],
    pub max: [f64; 2],
}

impl XyBounds {
    pub fn of(cloud: &PointCloud) -> Option<Self> {
        cloud.xy_bounds().map(|(min, max)| XyBounds { min, max })
    }
}

fn axis_centers(lo: f64, hi: f64, stride: f64) -> Vec<f64> {
    let steps = ((hi - lo) / stride).ceil().max(0.0) as usize;
    (0..=steps).map(|i| lo + i as f64 * stride).collect()
}

/// Grid of window centers starting at the bounds minimum with spacing `stride`,
/// extended until the last row and column reach the bounds maximum. Row-major
/// (y outer, x inner).
pub fn sliding_window_centers(bounds: XyBounds, stride: f64) -> Result<Vec<[f64; 2]>> {
    if !(stride > 0.0 && stride.is_finite()) {
        return Err(Error::InvalidConfig(format!("stride must be > 0, got {stride}")));
    }
    if bounds.min[0] > bounds.max[0] || bounds.min[1] > bounds.max[1] {
        return Err(Error::InvalidConfig("bounds minimum exceeds maximum".into()));
    }
    let xs = axis_centers(bounds.min[0], bounds.max[0], stride);
    let ys = axis_centers(bounds.min[1], bounds.max[1], stride);
    Ok(ys.iter().flat_map(|&y| xs.iter().map(move |&x| [x, y])).collect())
}

/// Sliding-window blocks over the whole cloud. Windows with no points are
/// skipped; `block_id` is the row-major grid index, so ids may have gaps.
pub fn tile_cloud(cloud: &PointCloud, radius: f64, stride: f64) -> Result<Vec<CylinderBlock>> {
    let bounds = XyBounds::of(cloud).ok_or(Error::EmptyInput("cannot tile an empty cloud"))?;
    let mut blocks = Vec::new();
    for (id, center) in sliding_window_centers(bounds, stride)?.into_iter().enumerate() {
        match cylinder_crop(cloud, center, radius) {
            Ok(mut b) => {
                b.block_id = id as u32;
                blocks.push(b);
            }
            Err(Error::EmptyBlock { .. }) => {}
            Err(e) => return Err(e),
        }
    }
    Ok(blocks)
}

/// Training-time crop center: the xy of a uniformly drawn point.
pub fn random_crop_center(cloud: &PointCloud, seed: u64) -> Result<[f64; 2]> {
    if cloud.is_empty() {
        return Err(Error::EmptyInput("cannot pick a crop center in an empty cloud"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = cloud.positions()[rng.random_range(0..cloud.len())];
    Ok([p[0], p[1]])
}
