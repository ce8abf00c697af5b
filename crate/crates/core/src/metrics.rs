//! Instance detection scores, coverage and semantic mIoU.
//!
//! Instance id 0 marks non-tree points and is excluded on both sides.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::cloud::{InstanceId, Semantic};
use crate::error::{Error, Result};
use crate::losses::check_len;

pub const DEFAULT_MATCH_IOU: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchPair {
    pub pred: InstanceId,
    pub gt: InstanceId,
    pub iou: f64,
}

/// One-to-one assignment between predicted and ground-truth instances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub pairs: Vec<MatchPair>,
    /// Ascending.
    pub unmatched_preds: Vec<InstanceId>,
    /// Ascending.
    pub unmatched_gts: Vec<InstanceId>,
}

impl MatchResult {
    pub fn counts(&self) -> DetectionCounts {
        DetectionCounts {
            tp: self.pairs.len(),
            fp: self.unmatched_preds.len(),
            fn_: self.unmatched_gts.len(),
        }
    }
}

/// Point sets of every id ≥ 1, keyed by id.
fn instance_sets(ids: &[InstanceId]) -> BTreeMap<InstanceId, Vec<usize>> {
    let mut sets = BTreeMap::<InstanceId, Vec<usize>>::new();
    for (p, &id) in ids.iter().enumerate() {
        if id >= 1 {
            sets.entry(id).or_default().push(p);
        }
    }
    sets
}

/// Sparse IoU table: every (pred, gt) pair sharing at least one point.
fn overlap_table(
    pred: &BTreeMap<InstanceId, Vec<usize>>,
    gt: &BTreeMap<InstanceId, Vec<usize>>,
) -> Vec<MatchPair> {
    let mut gt_of: HashMap<usize, Vec<InstanceId>> = HashMap::new();
    for (&g, points) in gt {
        for &p in points {
            gt_of.entry(p).or_default().push(g);
        }
    }
    let mut table = Vec::new();
    for (&pid, points) in pred {
        let mut inter: BTreeMap<InstanceId, usize> = BTreeMap::new();
        for p in points {
            for &g in gt_of.get(p).map(Vec::as_slice).unwrap_or(&[]) {
                *inter.entry(g).or_default() += 1;
            }
        }
        for (g, i) in inter {
            let union = points.len() + gt[&g].len() - i;
            table.push(MatchPair { pred: pid, gt: g, iou: i as f64 / union as f64 });
        }
    }
    table
}

fn greedy_match(
    pred: &BTreeMap<InstanceId, Vec<usize>>,
    gt: &BTreeMap<InstanceId, Vec<usize>>,
    iou_threshold: f64,
) -> MatchResult {
    let mut candidates: Vec<MatchPair> =
        overlap_table(pred, gt).into_iter().filter(|c| c.iou >= iou_threshold && c.iou > 0.0).collect();
    candidates.sort_by(|a, b| b.iou.total_cmp(&a.iou).then(a.gt.cmp(&b.gt)).then(a.pred.cmp(&b.pred)));
    let mut used_pred = std::collections::HashSet::new();
    let mut used_gt = std::collections::HashSet::new();
    let mut pairs = Vec::new();
    for c in candidates {
        if !used_pred.contains(&c.pred) && !used_gt.contains(&c.gt) {
            used_pred.insert(c.pred);
            used_gt.insert(c.gt);
            pairs.push(c);
        }
    }
    MatchResult {
        unmatched_preds: pred.keys().copied().filter(|p| !used_pred.contains(p)).collect(),
        unmatched_gts: gt.keys().copied().filter(|g| !used_gt.contains(g)).collect(),
        pairs,
    }
}

/// Greedy one-to-one matching by IoU descending; ties go to the lower gt id,
/// then the lower pred id. Pairs with IoU below `iou_threshold` never match.
pub fn match_instances(pred: &[InstanceId], gt: &[InstanceId], iou_threshold: f64) -> Result<MatchResult> {
    check_len("predicted instance labels", gt.len(), pred.len())?;
    Ok(greedy_match(&instance_sets(pred), &instance_sets(gt), iou_threshold))
}

/// [`match_instances`] over explicit, possibly overlapping, point sets. Mask
/// `i` on either side gets id `i + 1`.
pub fn match_mask_sets(pred: &[Vec<usize>], gt: &[Vec<usize>], iou_threshold: f64) -> MatchResult {
    let keyed = |masks: &[Vec<usize>]| -> BTreeMap<InstanceId, Vec<usize>> {
        masks
            .iter()
            .enumerate()
            .map(|(i, m)| (i as InstanceId + 1, crate::sets::sorted_unique(m.clone())))
            .collect()
    };
    greedy_match(&keyed(pred), &keyed(gt), iou_threshold)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DetectionCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl std::ops::Add for DetectionCounts {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self { tp: self.tp + o.tp, fp: self.fp + o.fp, fn_: self.fn_ + o.fn_ }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Precision, recall and F1; any zero denominator yields 0.
pub fn detection_scores(c: DetectionCounts) -> DetectionScores {
    let precision = ratio(c.tp, c.tp + c.fp);
    let recall = ratio(c.tp, c.tp + c.fn_);
    let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
    DetectionScores { precision, recall, f1 }
}

/// Mean over ground-truth trees of the best IoU any prediction achieves.
pub fn coverage(pred: &[InstanceId], gt: &[InstanceId]) -> Result<f64> {
    check_len("predicted instance labels", gt.len(), pred.len())?;
    let (p, g) = (instance_sets(pred), instance_sets(gt));
    if g.is_empty() {
        return Err(Error::NoGroundTruth);
    }
    let mut best: BTreeMap<InstanceId, f64> = g.keys().map(|&k| (k, 0.0)).collect();
    for c in overlap_table(&p, &g) {
        let b = best.get_mut(&c.gt).expect("gt id from table");
        *b = b.max(c.iou);
    }
    Ok(best.values().sum::<f64>() / g.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemanticIou {
    /// Classes present in either labeling, by name.
    pub per_class: BTreeMap<String, f64>,
    pub miou: f64,
}

/// Per-class IoU over the three semantic classes; classes absent from both
/// labelings are left out of the mean.
pub fn semantic_miou(pred: &[Semantic], gt: &[Semantic]) -> Result<SemanticIou> {
    check_len("predicted semantic labels", gt.len(), pred.len())?;
    if gt.is_empty() {
        return Err(Error::EmptyInput("semantic labels are empty"));
    }
    let mut inter = [0usize; Semantic::COUNT];
    let mut union = [0usize; Semantic::COUNT];
    for (&p, &g) in pred.iter().zip(gt) {
        if p == g {
            inter[p.index()] += 1;
            union[p.index()] += 1;
        } else {
            union[p.index()] += 1;
            union[g.index()] += 1;
        }
    }
    let per_class: BTreeMap<String, f64> = Semantic::ALL
        .iter()
        .filter(|c| union[c.index()] > 0)
        .map(|c| (c.name().to_string(), inter[c.index()] as f64 / union[c.index()] as f64))
        .collect();
    let miou = per_class.values().sum::<f64>() / per_class.len() as f64;
    Ok(SemanticIou { per_class, miou })
}

/// Evaluation of one plot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub iou_threshold: f64,
    #[serde(flatten)]
    pub counts: DetectionCounts,
    pub gt_trees: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub coverage: f64,
    /// Equals recall.
    pub completeness: f64,
    /// `1 − recall`.
    pub omission: f64,
    /// `1 − precision`.
    pub commission: f64,
    /// `None` unless both sides carry semantic labels.
    pub per_class_iou: Option<BTreeMap<String, f64>>,
    pub miou: Option<f64>,
}

pub fn evaluate(
    pred_instance: &[InstanceId],
    gt_instance: &[InstanceId],
    semantic: Option<(&[Semantic], &[Semantic])>,
    iou_threshold: f64,
) -> Result<EvalReport> {
    if !(0.0..=1.0).contains(&iou_threshold) {
        return Err(Error::InvalidConfig(format!("IoU threshold {iou_threshold} outside [0, 1]")));
    }
    let m = match_instances(pred_instance, gt_instance, iou_threshold)?;
    let counts = m.counts();
    let s = detection_scores(counts);
    let cov = coverage(pred_instance, gt_instance)?;
    let sem = semantic.map(|(p, g)| semantic_miou(p, g)).transpose()?;
    Ok(EvalReport {
        iou_threshold,
        counts,
        gt_trees: counts.tp + counts.fn_,
        precision: s.precision,
        recall: s.recall,
        f1: s.f1,
        coverage: cov,
        completeness: s.recall,
        omission: 1.0 - s.recall,
        commission: 1.0 - s.precision,
        miou: sem.as_ref().map(|x| x.miou),
        per_class_iou: sem.map(|x| x.per_class),
    })
}

/// Scores pooled across plots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub plots: usize,
    /// From summed counts; coverage weighted by GT tree count.
    pub micro: AggregateScores,
    /// Unweighted mean of per-plot values.
    #[serde(rename = "macro")]
    pub macro_: AggregateScores,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggregateScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub coverage: f64,
    pub miou: Option<f64>,
}

pub fn aggregate(reports: &[EvalReport]) -> Result<Aggregate> {
    if reports.is_empty() {
        return Err(Error::EmptyInput("no reports to aggregate"));
    }
    let n = reports.len() as f64;
    let counts = reports.iter().fold(DetectionCounts::default(), |a, r| a + r.counts);
    let s = detection_scores(counts);
    let trees: usize = reports.iter().map(|r| r.gt_trees).sum();
    let mious: Option<Vec<f64>> = reports.iter().map(|r| r.miou).collect();
    let miou = mious.map(|v| v.iter().sum::<f64>() / n);
    let micro = AggregateScores {
        precision: s.precision,
        recall: s.recall,
        f1: s.f1,
        coverage: reports.iter().map(|r| r.coverage * r.gt_trees as f64).sum::<f64>() / trees.max(1) as f64,
        miou,
    };
    let mean = |f: fn(&EvalReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    let macro_ = AggregateScores {
        precision: mean(|r| r.precision),
        recall: mean(|r| r.recall),
        f1: mean(|r| r.f1),
        coverage: mean(|r| r.coverage),
        miou,
    };
    Ok(Aggregate { plots: reports.len(), micro, macro_ })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_labels(rng: &mut ChaCha8Rng, n: usize, ids: u32) -> Vec<u32> {
        (0..n).map(|_| rng.random_range(0..=ids)).collect()
    }

    fn brute_iou(a: &[u32], b: &[u32], i: u32, j: u32) -> f64 {
        let inter = a.iter().zip(b).filter(|&(&x, &y)| x == i && y == j).count();
        let union = a.iter().zip(b).filter(|&(&x, &y)| x == i || y == j).count();
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }

    #[test]
    fn identity_matches_everything() {
        let ids = vec![0, 1, 1, 2, 3, 3, 3, 0];
        let m = match_instances(&ids, &ids, 0.5).unwrap();
        assert_eq!(m.pairs.len(), 3);
        assert!(m.unmatched_preds.is_empty() && m.unmatched_gts.is_empty());
        assert_eq!(coverage(&ids, &ids).unwrap(), 1.0);
    }

    #[test]
    fn below_threshold_is_false_positive() {
        // pred 1 covers 2 of gt 1's 5 points: IoU 0.4
        let gt = vec![1, 1, 1, 1, 1];
        let pred = vec![1, 1, 0, 0, 0];
        let m = match_instances(&pred, &gt, 0.5).unwrap();
        assert_eq!(m.counts(), DetectionCounts { tp: 0, fp: 1, fn_: 1 });
        assert!((coverage(&pred, &gt).unwrap() - 0.4).abs() < 1e-15);
    }

    #[test]
    fn length_mismatch() {
        assert!(matches!(match_instances(&[1], &[1, 2], 0.5), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn detection_arithmetic() {
        let s = detection_scores(DetectionCounts { tp: 3, fp: 0, fn_: 0 });
        assert_eq!((s.precision, s.recall, s.f1), (1.0, 1.0, 1.0));
        let s = detection_scores(DetectionCounts { tp: 3, fp: 1, fn_: 1 });
        assert_eq!((s.precision, s.recall, s.f1), (0.75, 0.75, 0.75));
        let s = detection_scores(DetectionCounts::default());
        assert_eq!((s.precision, s.recall, s.f1), (0.0, 0.0, 0.0));
    }

    #[test]
    fn detection_random_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..500 {
            let (tp, fp, fn_) = (rng.random_range(0..50), rng.random_range(0..50), rng.random_range(0..50));
            let s = detection_scores(DetectionCounts { tp, fp, fn_ });
            let p = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
            let r = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
            let f = if tp == 0 { 0.0 } else { 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64 };
            assert_eq!(s.precision, p);
            assert_eq!(s.recall, r);
            assert!((s.f1 - f).abs() < 1e-12);
        }
    }

    #[test]
    fn coverage_zero_overlap_and_no_gt() {
        let gt = vec![1, 1, 2, 2];
        let pred = vec![1, 1, 0, 0];
        assert_eq!(coverage(&pred, &gt).unwrap(), 0.5);
        assert_eq!(coverage(&pred, &[0, 0, 0, 0]), Err(Error::NoGroundTruth));
    }

    #[test]
    fn coverage_random_matches_table() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..50 {
            let gt = random_labels(&mut rng, 80, 5);
            let pred = random_labels(&mut rng, 80, 6);
            let gts: Vec<u32> = (1..=5).filter(|g| gt.contains(g)).collect();
            let expected = gts
                .iter()
                .map(|&g| (1..=6).map(|p| brute_iou(&pred, &gt, p, g)).fold(0.0, f64::max))
                .sum::<f64>()
                / gts.len() as f64;
            assert!((coverage(&pred, &gt).unwrap() - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn miou_cases() {
        use Semantic::*;
        let labels = vec![Ground, Wood, Leaf, Leaf];
        let r = semantic_miou(&labels, &labels).unwrap();
        assert_eq!(r.miou, 1.0);
        assert_eq!(r.per_class.len(), 3);
        let r = semantic_miou(&[Wood, Leaf], &[Wood, Wood]).unwrap();
        assert!(!r.per_class.contains_key("ground"));
        assert_eq!(r.per_class["wood"], 0.5);
        assert_eq!(r.per_class["leaf"], 0.0);
        assert_eq!(r.miou, 0.25);
        assert!(matches!(semantic_miou(&[], &[]), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn miou_random_matches_confusion_matrix() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..50 {
            let draw = |rng: &mut ChaCha8Rng| -> Vec<Semantic> {
                (0..60).map(|_| Semantic::ALL[rng.random_range(0..3)]).collect()
            };
            let (p, g) = (draw(&mut rng), draw(&mut rng));
            let mut cm = [[0usize; 3]; 3];
            for (a, b) in p.iter().zip(&g) {
                cm[b.index()][a.index()] += 1;
            }
            let mut ious = vec![];
            for c in 0..3 {
                let row: usize = cm[c].iter().sum();
                let col: usize = (0..3).map(|r| cm[r][c]).sum();
                if row + col > 0 {
                    ious.push(cm[c][c] as f64 / (row + col - cm[c][c]) as f64);
                }
            }
            let expected = ious.iter().sum::<f64>() / ious.len() as f64;
            assert!((semantic_miou(&p, &g).unwrap().miou - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn report_aliases_and_aggregation() {
        let gt = vec![0, 1, 1, 2, 2, 3, 3];
        let pred = vec![0, 1, 1, 2, 0, 0, 0];
        let r = evaluate(&pred, &gt, None, 0.5).unwrap();
        assert_eq!(r.counts, DetectionCounts { tp: 2, fp: 0, fn_: 1 });
        assert_eq!(r.completeness, r.recall);
        assert_eq!(r.omission, 1.0 - r.recall);
        assert_eq!(r.commission, 0.0);
        assert_eq!(r.miou, None);
        let ident = evaluate(&gt, &gt, None, 0.5).unwrap();
        let a = aggregate(&[r.clone(), ident]).unwrap();
        assert_eq!(a.micro.recall, 5.0 / 6.0);
        assert_eq!(a.macro_.recall, (2.0 / 3.0 + 1.0) / 2.0);
        let json = serde_json::to_value(&r).unwrap();
        assert_eq!(json["fn"], 1);
    }

    #[test]
    fn mask_sets_allow_overlap() {
        let gt = vec![vec![0, 1, 2, 3]];
        let pred = vec![vec![0, 1, 2, 3], vec![0, 1, 2]];
        let m = match_mask_sets(&pred, &gt, 0.5);
        assert_eq!(m.counts(), DetectionCounts { tp: 1, fp: 1, fn_: 0 });
        assert_eq!(m.pairs[0].pred, 1);
    }

    proptest! {
        #[test]
        fn swapping_sides_swaps_errors(seed in any::<u64>(), thr in 0.05f64..1.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_labels(&mut rng, 60, 5);
            let b = random_labels(&mut rng, 60, 5);
            let ab = match_instances(&a, &b, thr).unwrap().counts();
            let ba = match_instances(&b, &a, thr).unwrap().counts();
            prop_assert_eq!(ab.tp, ba.tp);
            prop_assert_eq!(ab.fp, ba.fn_);
            prop_assert_eq!(ab.fn_, ba.fp);
        }

        #[test]
        fn coverage_bounds_matches(seed in any::<u64>(), thr in 0.05f64..1.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let gt = random_labels(&mut rng, 60, 4);
            let pred = random_labels(&mut rng, 60, 4);
            prop_assume!(gt.iter().any(|&g| g > 0));
            let m = match_instances(&pred, &gt, thr).unwrap();
            let n_gt = m.pairs.len() + m.unmatched_gts.len();
            let cov = coverage(&pred, &gt).unwrap();
            prop_assert!(cov + 1e-12 >= m.pairs.len() as f64 * thr / n_gt as f64);
            prop_assert!((0.0..=1.0).contains(&cov));
        }

        #[test]
        fn relabeling_is_invisible(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let gt = random_labels(&mut rng, 60, 4);
            let pred = random_labels(&mut rng, 60, 4);
            prop_assume!(gt.iter().any(|&g| g > 0));
            // bijection on ids ≥ 1 that keeps 0 fixed
            let relabel = |v: &[u32]| -> Vec<u32> { v.iter().map(|&x| if x == 0 { 0 } else { 100 - x }).collect() };
            let r1 = evaluate(&pred, &gt, None, 0.5).unwrap();
            let r2 = evaluate(&relabel(&pred), &relabel(&gt), None, 0.5).unwrap();
            prop_assert_eq!(r1.counts, r2.counts);
            prop_assert!((r1.coverage - r2.coverage).abs() < 1e-12);
        }

        #[test]
        fn one_to_one_and_above_threshold(seed in any::<u64>(), thr in 0.05f64..1.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let gt = random_labels(&mut rng, 50, 6);
            let pred = random_labels(&mut rng, 50, 6);
            let m = match_instances(&pred, &gt, thr).unwrap();
            let mut ps: Vec<u32> = m.pairs.iter().map(|p| p.pred).collect();
            let mut gs: Vec<u32> = m.pairs.iter().map(|p| p.gt).collect();
            ps.sort(); ps.dedup(); gs.sort(); gs.dedup();
            prop_assert_eq!(ps.len(), m.pairs.len());
            prop_assert_eq!(gs.len(), m.pairs.len());
            for p in &m.pairs {
                prop_assert!(p.iou >= thr);
                prop_assert!((p.iou - brute_iou(&pred, &gt, p.pred, p.gt)).abs() < 1e-12);
            }
        }
    }
}
