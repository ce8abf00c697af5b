use crate::cloud::{InstanceId, VoxelLabels};
use crate::error::{Error, Result};
use crate::isa::QuerySelection;

/// A query whose voxel carries no ground-truth tree.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UnassociatedQuery {
    pub query: usize,
    pub voxel: usize,
}

/// One-to-many assignment of queries to ground-truth trees.
///
/// `gt_ids[j]` is the tree of query `j`'s voxel, or `None` for a query that
/// landed on a non-tree voxel and is left out of the mask losses.
#[derive(Debug, Clone, PartialEq)]
pub struct Association {
    pub gt_ids: Vec<Option<InstanceId>>,
    pub unassociated: Vec<UnassociatedQuery>,
}

impl Association {
    pub fn num_queries(&self) -> usize {
        self.gt_ids.len()
    }

    /// `(query, tree)` for every associated query.
    pub fn pairs(&self) -> impl Iterator<Item = (usize, InstanceId)> + '_ {
        self.gt_ids.iter().enumerate().filter_map(|(q, id)| id.map(|id| (q, id)))
    }

    /// Fails on the first query without a tree.
    pub fn require_complete(&self) -> Result<()> {
        match self.unassociated.first() {
            Some(u) => Err(Error::UnassociatedQuery { query: u.query, voxel: u.voxel }),
            None => Ok(()),
        }
    }
}

/// Each query takes the instance id of its own voxel; no matching step, and
/// any number of queries may share a tree.
pub fn one_to_many_associate(queries: &QuerySelection, gt: &VoxelLabels) -> Result<Association> {
    let mut gt_ids = Vec::with_capacity(queries.voxel_indices.len());
    let mut unassociated = Vec::new();
    for (query, &voxel) in queries.voxel_indices.iter().enumerate() {
        let id = *gt.instance.get(voxel).ok_or(Error::ShapeMismatch {
            what: "query voxel index",
            expected: gt.len(),
            actual: voxel,
        })?;
        if id >= 1 {
            gt_ids.push(Some(id));
        } else {
            log::debug!("query {query} on voxel {voxel} has no tree; dropped from the mask losses");
            gt_ids.push(None);
            unassociated.push(UnassociatedQuery { query, voxel });
        }
    }
    Ok(Association { gt_ids, unassociated })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cloud::Semantic;
    use crate::isa::SelectionMethod;

    fn gt() -> VoxelLabels {
        VoxelLabels {
            semantic: vec![Semantic::Wood, Semantic::Leaf, Semantic::Ground, Semantic::Leaf],
            instance: vec![7, 7, 0, 2],
        }
    }

    fn sel(v: &[usize]) -> QuerySelection {
        QuerySelection { voxel_indices: v.to_vec(), method: SelectionMethod::Isa, k_requested: v.len() }
    }

    #[test]
    fn lookup_and_one_to_many() {
        let a = one_to_many_associate(&sel(&[0]), &gt()).unwrap();
        assert_eq!(a.gt_ids, vec![Some(7)]);
        let a = one_to_many_associate(&sel(&[0, 1, 3]), &gt()).unwrap();
        assert_eq!(a.pairs().collect::<Vec<_>>(), vec![(0, 7), (1, 7), (2, 2)]);
        assert!(a.require_complete().is_ok());
    }

    #[test]
    fn ground_query_is_flagged() {
        let a = one_to_many_associate(&sel(&[3, 2]), &gt()).unwrap();
        assert_eq!(a.gt_ids, vec![Some(2), None]);
        assert_eq!(a.require_complete(), Err(Error::UnassociatedQuery { query: 1, voxel: 2 }));
    }
}
