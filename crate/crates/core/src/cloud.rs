//! Point clouds, sparse voxelization and label transfer between points and voxels.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default voxel edge length in meters.
pub const DEFAULT_VOXEL_RESOLUTION: f64 = 0.2;

/// Semantic class of a point or voxel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Semantic {
    Ground = 0,
    Wood = 1,
    Leaf = 2,
}

impl Semantic {
    pub const ALL: [Semantic; 3] = [Semantic::Ground, Semantic::Wood, Semantic::Leaf];
    pub const COUNT: usize = 3;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: i64) -> Result<Self> {
        match i {
            0 => Ok(Semantic::Ground),
            1 => Ok(Semantic::Wood),
            2 => Ok(Semantic::Leaf),
            _ => Err(Error::InvalidLabel(format!("semantic class {i} not in {{0, 1, 2}}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Semantic::Ground => "ground",
            Semantic::Wood => "wood",
            Semantic::Leaf => "leaf",
        }
    }

    pub fn is_tree(self) -> bool {
        self != Semantic::Ground
    }
}

/// Instance id of a point; `0` means no tree.
pub type InstanceId = u32;

/// A set of 3-D points in meters with optional ground-truth or predicted labels.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    positions: Vec<[f64; 3]>,
    semantic: Option<Vec<Semantic>>,
    instance: Option<Vec<InstanceId>>,
}

impl PointCloud {
    /// Builds a cloud, checking finiteness, lengths and label consistency.
    pub fn new(
        positions: Vec<[f64; 3]>,
        semantic: Option<Vec<Semantic>>,
        instance: Option<Vec<InstanceId>>,
    ) -> Result<Self> {
        if let Some(i) = positions.iter().position(|p| p.iter().any(|c| !c.is_finite())) {
            return Err(Error::InvalidGeometry(format!("point {i} has a non-finite coordinate")));
        }
        let n = positions.len();
        if let Some(s) = &semantic {
            check_len("semantic labels", n, s.len())?;
        }
        if let Some(ids) = &instance {
            check_len("instance labels", n, ids.len())?;
        }
        if let (Some(s), Some(ids)) = (&semantic, &instance) {
            for (i, (&class, &id)) in s.iter().zip(ids).enumerate() {
                if id >= 1 && !class.is_tree() {
                    return Err(Error::InvalidLabel(format!(
                        "point {i} belongs to tree {id} but is labeled ground"
                    )));
                }
                if id == 0 && class.is_tree() {
                    return Err(Error::InvalidLabel(format!(
                        "point {i} is labeled {} but has no instance",
                        class.name()
                    )));
                }
            }
        }
        Ok(Self { positions, semantic, instance })
    }

    pub fn from_positions(positions: Vec<[f64; 3]>) -> Result<Self> {
        Self::new(positions, None, None)
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn positions(&self) -> &[[f64; 3]] {
        &self.positions
    }

    pub fn semantic(&self) -> Option<&[Semantic]> {
        self.semantic.as_deref()
    }

    pub fn instance(&self) -> Option<&[InstanceId]> {
        self.instance.as_deref()
    }

    /// Both label arrays, or `MissingLabels`.
    pub fn labels(&self) -> Result<(&[Semantic], &[InstanceId])> {
        match (&self.semantic, &self.instance) {
            (Some(s), Some(i)) => Ok((s, i)),
            _ => Err(Error::MissingLabels),
        }
    }

    /// Sub-cloud made of the given point indices, labels included.
    pub fn subset(&self, indices: &[usize]) -> PointCloud {
        PointCloud {
            positions: indices.iter().map(|&i| self.positions[i]).collect(),
            semantic: self.semantic.as_ref().map(|s| indices.iter().map(|&i| s[i]).collect()),
            instance: self.instance.as_ref().map(|s| indices.iter().map(|&i| s[i]).collect()),
        }
    }

    /// Axis-aligned horizontal extent `(min, max)`.
    pub fn xy_bounds(&self) -> Option<([f64; 2], [f64; 2])> {
        let first = self.positions.first()?;
        let mut lo = [first[0], first[1]];
        let mut hi = lo;
        for p in &self.positions {
            for a in 0..2 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        Some((lo, hi))
    }
}

fn check_len(what: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::ShapeMismatch { what, expected, actual });
    }
    Ok(())
}

/// Integer voxel coordinate.
pub type VoxelKey = [i64; 3];

/// Occupied voxels of a cloud at a fixed resolution.
///
/// Voxels are ordered lexicographically by key; the member list of every voxel
/// is in ascending point order.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseVoxelization {
    pub resolution: f64,
    pub voxel_keys: Vec<VoxelKey>,
    pub point_to_voxel: Vec<usize>,
    pub voxel_to_points: Vec<Vec<usize>>,
}

impl SparseVoxelization {
    pub fn num_voxels(&self) -> usize {
        self.voxel_keys.len()
    }

    pub fn num_points(&self) -> usize {
        self.point_to_voxel.len()
    }

    /// Center of voxel `v` in world coordinates.
    pub fn voxel_center(&self, v: usize) -> [f64; 3] {
        let k = self.voxel_keys[v];
        [
            (k[0] as f64 + 0.5) * self.resolution,
            (k[1] as f64 + 0.5) * self.resolution,
            (k[2] as f64 + 0.5) * self.resolution,
        ]
    }
}

pub fn voxel_key(p: &[f64; 3], resolution: f64) -> VoxelKey {
    [
        (p[0] / resolution).floor() as i64,
        (p[1] / resolution).floor() as i64,
        (p[2] / resolution).floor() as i64,
    ]
}

/// Quantizes every point to `floor(p / resolution)`.
pub fn voxelize(cloud: &PointCloud, resolution: f64) -> Result<SparseVoxelization> {
    if !(resolution > 0.0 && resolution.is_finite()) {
        return Err(Error::InvalidConfig(format!("voxel resolution must be > 0, got {resolution}")));
    }
    if cloud.is_empty() {
        return Err(Error::EmptyInput("cannot voxelize an empty cloud"));
    }
    let keys: Vec<VoxelKey> = cloud.positions().iter().map(|p| voxel_key(p, resolution)).collect();

    let mut unique = keys.clone();
    unique.sort_unstable();
    unique.dedup();
    let index: HashMap<VoxelKey, usize> = unique.iter().enumerate().map(|(i, k)| (*k, i)).collect();

    let mut voxel_to_points = vec![Vec::new(); unique.len()];
    let point_to_voxel: Vec<usize> = keys
        .iter()
        .enumerate()
        .map(|(i, k)| {
            let v = index[k];
            voxel_to_points[v].push(i);
            v
        })
        .collect();

    Ok(SparseVoxelization {
        resolution,
        voxel_keys: unique,
        point_to_voxel,
        voxel_to_points,
    })
}

/// Per-voxel ground-truth labels.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelLabels {
    pub semantic: Vec<Semantic>,
    pub instance: Vec<InstanceId>,
}

impl VoxelLabels {
    pub fn len(&self) -> usize {
        self.instance.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instance.is_empty()
    }

    /// Distinct tree ids (≥ 1), ascending.
    pub fn instance_ids(&self) -> Vec<InstanceId> {
        let mut ids: Vec<_> = self.instance.iter().copied().filter(|&i| i >= 1).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    /// Voxel indices of every tree, keyed by id.
    pub fn instance_masks(&self) -> std::collections::BTreeMap<InstanceId, Vec<usize>> {
        let mut masks = std::collections::BTreeMap::<InstanceId, Vec<usize>>::new();
        for (v, &id) in self.instance.iter().enumerate() {
            if id >= 1 {
                masks.entry(id).or_default().push(v);
            }
        }
        masks
    }
}

/// Majority vote with ties going to the smallest value.
pub(crate) fn majority<T: Ord + Copy>(values: impl IntoIterator<Item = T>) -> Option<T> {
    let mut sorted: Vec<T> = values.into_iter().collect();
    sorted.sort_unstable();
    let mut best: Option<(T, usize)> = None;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j < sorted.len() && sorted[j] == sorted[i] {
            j += 1;
        }
        if best.is_none_or(|(_, c)| j - i > c) {
            best = Some((sorted[i], j - i));
        }
        i = j;
    }
    best.map(|(v, _)| v)
}

/// Aggregates per-point labels to voxels by majority vote.
pub fn voxel_labels_from_points(vox: &SparseVoxelization, cloud: &PointCloud) -> Result<VoxelLabels> {
    let (semantic, instance) = cloud.labels()?;
    check_len("cloud points", vox.num_points(), cloud.len())?;
    let mut vs = Vec::with_capacity(vox.num_voxels());
    let mut vi = Vec::with_capacity(vox.num_voxels());
    for members in &vox.voxel_to_points {
        vs.push(majority(members.iter().map(|&p| semantic[p])).expect("voxels are never empty"));
        vi.push(majority(members.iter().map(|&p| instance[p])).expect("voxels are never empty"));
    }
    Ok(VoxelLabels { semantic: vs, instance: vi })
}

/// Broadcasts voxel labels back to every member point.
pub fn labels_to_points(
    vox: &SparseVoxelization,
    labels: &VoxelLabels,
) -> Result<(Vec<Semantic>, Vec<InstanceId>)> {
    check_len("voxel semantic labels", vox.num_voxels(), labels.semantic.len())?;
    check_len("voxel instance labels", vox.num_voxels(), labels.instance.len())?;
    Ok(vox
        .point_to_voxel
        .iter()
        .map(|&v| (labels.semantic[v], labels.instance[v]))
        .unzip())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashSet;

    fn cloud(points: &[[f64; 3]]) -> PointCloud {
        PointCloud::from_positions(points.to_vec()).unwrap()
    }

    #[test]
    fn single_point_single_voxel() {
        let v = voxelize(&cloud(&[[0.05, 0.05, 0.05]]), 0.2).unwrap();
        assert_eq!(v.voxel_keys, vec![[0, 0, 0]]);
        assert_eq!(v.voxel_to_points, vec![vec![0]]);
    }

    #[test]
    fn two_points_same_cell() {
        let v = voxelize(&cloud(&[[0.05, 0.05, 0.05], [0.15, 0.15, 0.15]]), 0.2).unwrap();
        assert_eq!(v.num_voxels(), 1);
        assert_eq!(v.voxel_to_points[0], vec![0, 1]);
    }

    #[test]
    fn negative_coordinates_floor() {
        let v = voxelize(&cloud(&[[-0.05, 0.0, 0.39]]), 0.2).unwrap();
        assert_eq!(v.voxel_keys, vec![[-1, 0, 1]]);
    }

    #[test]
    fn uniform_cube_matches_hash_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let pts: Vec<[f64; 3]> = (0..10_000)
            .map(|_| [rng.random_range(0.0..10.0), rng.random_range(0.0..10.0), rng.random_range(0.0..10.0)])
            .collect();
        let oracle: HashSet<(i64, i64, i64)> = pts
            .iter()
            .map(|p| {
                (
                    (p[0] / 0.2).floor() as i64,
                    (p[1] / 0.2).floor() as i64,
                    (p[2] / 0.2).floor() as i64,
                )
            })
            .collect();
        let v = voxelize(&cloud(&pts), 0.2).unwrap();
        assert_eq!(v.num_voxels(), oracle.len());
    }

    #[test]
    fn errors() {
        assert_eq!(
            voxelize(&PointCloud::default(), 0.2).unwrap_err(),
            Error::EmptyInput("cannot voxelize an empty cloud")
        );
        assert!(matches!(voxelize(&cloud(&[[0.0; 3]]), 0.0), Err(Error::InvalidConfig(_))));
        assert!(matches!(
            PointCloud::from_positions(vec![[0.0, f64::NAN, 0.0]]),
            Err(Error::InvalidGeometry(_))
        ));
        assert!(matches!(
            PointCloud::new(vec![[0.0; 3]], Some(vec![Semantic::Ground]), Some(vec![3])),
            Err(Error::InvalidLabel(_))
        ));
    }

    fn labeled(sem: &[Semantic], ids: &[u32]) -> PointCloud {
        // all points in one voxel
        let pts = vec![[0.01, 0.01, 0.01]; sem.len()];
        PointCloud::new(pts, Some(sem.to_vec()), Some(ids.to_vec())).unwrap()
    }

    #[test]
    fn majority_and_tie_break() {
        use Semantic::*;
        let c = labeled(&[Wood, Wood, Leaf], &[2, 2, 2]);
        let v = voxelize(&c, 0.2).unwrap();
        assert_eq!(voxel_labels_from_points(&v, &c).unwrap().semantic, vec![Wood]);

        let c = labeled(&[Leaf, Wood], &[5, 4]);
        let v = voxelize(&c, 0.2).unwrap();
        let l = voxel_labels_from_points(&v, &c).unwrap();
        assert_eq!(l.semantic, vec![Wood]);
        assert_eq!(l.instance, vec![4]);
    }

    #[test]
    fn missing_labels() {
        let c = cloud(&[[0.0; 3]]);
        let v = voxelize(&c, 0.2).unwrap();
        assert_eq!(voxel_labels_from_points(&v, &c), Err(Error::MissingLabels));
    }

    #[test]
    fn random_labels_match_counting_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        // 500 voxels along x, 1..6 points each
        let mut pts = Vec::new();
        let mut sem = Vec::new();
        let mut ids = Vec::new();
        for v in 0..500 {
            for _ in 0..rng.random_range(1..7) {
                pts.push([v as f64 * 0.2 + 0.1, 0.1, 0.1]);
                let id: u32 = rng.random_range(0..4);
                ids.push(id);
                sem.push(if id == 0 { Semantic::Ground } else if rng.random_bool(0.5) { Semantic::Wood } else { Semantic::Leaf });
            }
        }
        let c = PointCloud::new(pts, Some(sem.clone()), Some(ids.clone())).unwrap();
        let v = voxelize(&c, 0.2).unwrap();
        assert_eq!(v.num_voxels(), 500);
        let l = voxel_labels_from_points(&v, &c).unwrap();
        for (vi, members) in v.voxel_to_points.iter().enumerate() {
            let mut sc = [0usize; 3];
            let mut ic = [0usize; 4];
            for &p in members {
                sc[sem[p].index()] += 1;
                ic[ids[p] as usize] += 1;
            }
            // first index holding the maximum count
            let smax = *sc.iter().max().unwrap();
            let imax = *ic.iter().max().unwrap();
            assert_eq!(l.semantic[vi].index(), sc.iter().position(|&c| c == smax).unwrap());
            assert_eq!(l.instance[vi] as usize, ic.iter().position(|&c| c == imax).unwrap());
        }
    }

    #[test]
    fn broadcast_single_voxel() {
        let c = cloud(&[[0.01; 3], [0.02; 3], [0.03; 3], [0.04; 3]]);
        let v = voxelize(&c, 0.2).unwrap();
        let labels = VoxelLabels { semantic: vec![Semantic::Leaf], instance: vec![3] };
        let (s, i) = labels_to_points(&v, &labels).unwrap();
        assert_eq!(s, vec![Semantic::Leaf; 4]);
        assert_eq!(i, vec![3; 4]);
        let bad = VoxelLabels { semantic: vec![], instance: vec![] };
        assert!(matches!(labels_to_points(&v, &bad), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn random_voxel_labels_match_index_lookup() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pts: Vec<[f64; 3]> = (0..2000)
            .map(|_| [rng.random_range(0.0..3.0), rng.random_range(0.0..3.0), rng.random_range(0.0..1.0)])
            .collect();
        let c = cloud(&pts);
        let v = voxelize(&c, 0.2).unwrap();
        let labels = VoxelLabels {
            semantic: (0..v.num_voxels()).map(|_| Semantic::from_index(rng.random_range(0..3)).unwrap()).collect(),
            instance: (0..v.num_voxels()).map(|_| rng.random_range(0..9)).collect(),
        };
        let (s, i) = labels_to_points(&v, &labels).unwrap();
        for p in 0..pts.len() {
            let key = voxel_key(&pts[p], 0.2);
            let vi = v.voxel_keys.binary_search(&key).unwrap();
            assert_eq!(s[p], labels.semantic[vi]);
            assert_eq!(i[p], labels.instance[vi]);
        }
    }

    proptest! {
        #[test]
        fn voxelization_invariants(pts in prop::collection::vec(prop::array::uniform3(-50.0f64..50.0), 1..200)) {
            let v = voxelize(&cloud(&pts), 0.2).unwrap();
            prop_assert!(v.num_voxels() <= pts.len());
            prop_assert!(v.voxel_keys.windows(2).all(|w| w[0] < w[1]));
            let mut seen = vec![false; pts.len()];
            for (vi, members) in v.voxel_to_points.iter().enumerate() {
                for &p in members {
                    prop_assert!(!seen[p]);
                    seen[p] = true;
                    prop_assert_eq!(v.point_to_voxel[p], vi);
                    prop_assert_eq!(voxel_key(&pts[p], 0.2), v.voxel_keys[vi]);
                }
            }
            prop_assert!(seen.iter().all(|&s| s));
        }

        #[test]
        fn translation_by_whole_voxels_shifts_keys(
            pts in prop::collection::vec(prop::array::uniform3(-20i32..20), 1..100),
            shift in prop::array::uniform3(-30i64..30),
        ) {
            // voxel-center points so quantization is exact under shifting
            let res = 0.25;
            let base: Vec<[f64; 3]> = pts.iter().map(|p| [(p[0] as f64 + 0.5) * res, (p[1] as f64 + 0.5) * res, (p[2] as f64 + 0.5) * res]).collect();
            let moved: Vec<[f64; 3]> = base.iter().map(|p| [p[0] + shift[0] as f64 * res, p[1] + shift[1] as f64 * res, p[2] + shift[2] as f64 * res]).collect();
            let a = voxelize(&cloud(&base), res).unwrap();
            let b = voxelize(&cloud(&moved), res).unwrap();
            let shifted: Vec<VoxelKey> = a.voxel_keys.iter().map(|k| [k[0] + shift[0], k[1] + shift[1], k[2] + shift[2]]).collect();
            prop_assert_eq!(shifted, b.voxel_keys);
            prop_assert_eq!(a.point_to_voxel, b.point_to_voxel);
        }

        #[test]
        fn homogeneous_round_trip(cells in prop::collection::btree_map(prop::array::uniform3(0i64..20), (0u32..5, 1usize..4), 1..40)) {
            let mut pts = Vec::new();
            let mut sem = Vec::new();
            let mut ids = Vec::new();
            for (k, (id, n)) in &cells {
                for j in 0..*n {
                    pts.push([k[0] as f64 * 0.2 + 0.02 + 0.01 * j as f64, k[1] as f64 * 0.2 + 0.1, k[2] as f64 * 0.2 + 0.1]);
                    ids.push(*id);
                    sem.push(if *id == 0 { Semantic::Ground } else { Semantic::Leaf });
                }
            }
            let c = PointCloud::new(pts, Some(sem.clone()), Some(ids.clone())).unwrap();
            let v = voxelize(&c, 0.2).unwrap();
            let l = voxel_labels_from_points(&v, &c).unwrap();
            let (s2, i2) = labels_to_points(&v, &l).unwrap();
            prop_assert_eq!(s2, sem);
            prop_assert_eq!(i2, ids);
        }

        #[test]
        fn sparse_points_get_own_voxels(n in 1usize..50) {
            let pts: Vec<[f64; 3]> = (0..n).map(|i| [i as f64 * 0.5 + 0.01, 0.01, 0.01]).collect();
            let v = voxelize(&cloud(&pts), 0.2).unwrap();
            prop_assert_eq!(v.num_voxels(), n);
        }
    }
}
