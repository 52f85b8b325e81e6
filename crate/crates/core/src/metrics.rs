//! Segmentation and retrieval metrics: mIoU, component-level F1 and top-1
//! macro-precision.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{ClassId, LabelGrid, IGNORE};

/// Per-class true positive, false positive and false negative cell counts.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionTally {
    pub counts: BTreeMap<ClassId, [u64; 3]>,
}

impl ConfusionTally {
    pub fn new() -> Self {
        Self::default()
    }

    /// Accumulates one frame. Cells whose ground truth is `IGNORE` are skipped.
    pub fn add(&mut self, pred: &LabelGrid, gt: &LabelGrid, classes: &[ClassId]) -> Result<()> {
        if !pred.same_shape(gt) {
            return Err(Error::InvalidInput(format!(
                "prediction {}x{} vs ground truth {}x{}",
                pred.height, pred.width, gt.height, gt.width
            )));
        }
        for &c in classes {
            self.counts.entry(c).or_insert([0; 3]);
        }
        for (&p, &g) in pred.labels.iter().zip(&gt.labels) {
            if g == IGNORE {
                continue;
            }
            if p == g {
                if let Some(t) = self.counts.get_mut(&g) {
                    t[0] += 1;
                }
                continue;
            }
            if let Some(t) = self.counts.get_mut(&p) {
                t[1] += 1;
            }
            if let Some(t) = self.counts.get_mut(&g) {
                t[2] += 1;
            }
        }
        Ok(())
    }

    pub fn iou(&self, class: ClassId) -> Option<f64> {
        let [tp, fp, fn_] = *self.counts.get(&class)?;
        let denom = tp + fp + fn_;
        (denom > 0).then(|| tp as f64 / denom as f64)
    }

    pub fn report(&self) -> MiouReport {
        let per_class: Vec<ClassIou> = self
            .counts
            .keys()
            .map(|&class| ClassIou { class, iou: self.iou(class) })
            .collect();
        let present: Vec<f64> = per_class.iter().filter_map(|c| c.iou).collect();
        let mean = if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        };
        MiouReport { per_class, mean }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassIou {
    pub class: ClassId,
    /// `None` when the class is absent from both prediction and ground truth.
    pub iou: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiouReport {
    pub per_class: Vec<ClassIou>,
    pub mean: f64,
}

impl MiouReport {
    pub fn iou(&self, class: ClassId) -> Option<f64> {
        self.per_class.iter().find(|c| c.class == class).and_then(|c| c.iou)
    }
}

pub fn miou(pred: &LabelGrid, gt: &LabelGrid, classes: &[ClassId]) -> Result<MiouReport> {
    let mut tally = ConfusionTally::new();
    tally.add(pred, gt, classes)?;
    Ok(tally.report())
}

/// mIoU pooled over frames.
pub fn miou_frames(pairs: &[(&LabelGrid, &LabelGrid)], classes: &[ClassId]) -> Result<MiouReport> {
    let mut tally = ConfusionTally::new();
    for (p, g) in pairs {
        tally.add(p, g, classes)?;
    }
    Ok(tally.report())
}

/// A connected region as a set of cell indices on one grid.
pub type CellSet = Vec<usize>;

pub fn set_iou(a: &[usize], b: &[usize]) -> f64 {
    let a: HashSet<usize> = a.iter().copied().collect();
    let b: HashSet<usize> = b.iter().copied().collect();
    let inter = a.intersection(&b).count();
    let union = a.len() + b.len() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ComponentCounts {
    /// Ground-truth components with IoU > 0.25 against some prediction.
    pub true_positive: usize,
    pub false_negative: usize,
    /// Predictions with IoU < 0.25 against every ground-truth component.
    pub false_positive: usize,
}

impl ComponentCounts {
    pub fn merge(&mut self, other: ComponentCounts) {
        self.true_positive += other.true_positive;
        self.false_negative += other.false_negative;
        self.false_positive += other.false_positive;
    }

    pub fn scores(&self) -> F1Score {
        let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        let precision = ratio(self.true_positive, self.true_positive + self.false_positive);
        let recall = ratio(self.true_positive, self.true_positive + self.false_negative);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        F1Score { precision, recall, f1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct F1Score {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

pub fn component_counts(pred: &[CellSet], gt: &[CellSet]) -> ComponentCounts {
    let ious: Vec<Vec<f64>> = gt.iter().map(|g| pred.iter().map(|p| set_iou(g, p)).collect()).collect();
    let true_positive = ious.iter().filter(|row| row.iter().any(|&v| v > 0.25)).count();
    let false_positive = (0..pred.len())
        .filter(|&j| ious.iter().all(|row| row[j] < 0.25))
        .count();
    ComponentCounts {
        true_positive,
        false_negative: gt.len() - true_positive,
        false_positive,
    }
}

pub fn component_f1(pred: &[CellSet], gt: &[CellSet]) -> F1Score {
    component_counts(pred, gt).scores()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentF1Report {
    /// Counts pooled over every frame.
    pub pooled: F1Score,
    pub counts: ComponentCounts,
    /// Unweighted mean of per-frame F1 over frames with any component.
    pub mean_per_frame: f64,
}

/// Component F1 over frames given as `(predicted, ground truth)` pairs.
pub fn component_f1_frames(frames: &[(Vec<CellSet>, Vec<CellSet>)]) -> ComponentF1Report {
    let mut counts = ComponentCounts::default();
    let mut per_frame = Vec::new();
    for (pred, gt) in frames {
        let c = component_counts(pred, gt);
        counts.merge(c);
        if !pred.is_empty() || !gt.is_empty() {
            per_frame.push(c.scores().f1);
        }
    }
    let mean_per_frame = if per_frame.is_empty() {
        0.0
    } else {
        per_frame.iter().sum::<f64>() / per_frame.len() as f64
    };
    ComponentF1Report { pooled: counts.scores(), counts, mean_per_frame }
}

/// 4-connected components of cells satisfying `mask`, each sorted, ordered
/// by their first cell.
pub fn connected_components(height: usize, width: usize, mask: impl Fn(usize) -> bool) -> Vec<CellSet> {
    let mut seen = vec![false; height * width];
    let mut out = Vec::new();
    for start in 0..height * width {
        if seen[start] || !mask(start) {
            continue;
        }
        seen[start] = true;
        let mut stack = vec![start];
        let mut members = Vec::new();
        while let Some(i) = stack.pop() {
            members.push(i);
            let (r, c) = (i / width, i % width);
            let mut visit = |j: usize| {
                if !seen[j] && mask(j) {
                    seen[j] = true;
                    stack.push(j);
                }
            };
            if r > 0 {
                visit(i - width);
            }
            if r + 1 < height {
                visit(i + width);
            }
            if c > 0 {
                visit(i - 1);
            }
            if c + 1 < width {
                visit(i + 1);
            }
        }
        members.sort_unstable();
        out.push(members);
    }
    out
}

/// Ground-truth components: per class in `classes`, the 4-connected regions
/// of that label.
pub fn label_components(grid: &LabelGrid, classes: &[ClassId]) -> Vec<CellSet> {
    let mut out = Vec::new();
    for &c in classes {
        out.extend(connected_components(grid.height, grid.width, |i| grid.labels[i] == c));
    }
    out.sort_by_key(|s| s[0]);
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalQuery {
    pub class: ClassId,
    /// Labels of the ranked results, best first.
    pub results: Vec<Option<ClassId>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MacroPrecision {
    pub mp: f64,
    pub per_class: Vec<(ClassId, f64)>,
    /// Queries that returned nothing (counted as incorrect).
    pub empty_queries: usize,
}

pub fn top1_macro_precision(queries: &[RetrievalQuery]) -> MacroPrecision {
    let mut tally: BTreeMap<ClassId, (usize, usize)> = BTreeMap::new();
    let mut empty_queries = 0;
    for q in queries {
        let entry = tally.entry(q.class).or_insert((0, 0));
        entry.1 += 1;
        match q.results.first() {
            None => empty_queries += 1,
            Some(&top) if top == Some(q.class) => entry.0 += 1,
            Some(_) => {}
        }
    }
    let per_class: Vec<(ClassId, f64)> = tally
        .iter()
        .map(|(&c, &(hit, total))| (c, hit as f64 / total as f64))
        .collect();
    let mp = if per_class.is_empty() {
        0.0
    } else {
        per_class.iter().map(|p| p.1).sum::<f64>() / per_class.len() as f64
    };
    MacroPrecision { mp, per_class, empty_queries }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(labels: &[ClassId]) -> LabelGrid {
        LabelGrid::new("f", 2, 2, labels.to_vec()).unwrap()
    }

    #[test]
    fn perfect_prediction() {
        let g = grid(&[0, 1, 1, 0]);
        let r = miou(&g, &g, &[0, 1]).unwrap();
        assert_eq!(r.mean, 1.0);
    }

    #[test]
    fn hand_counted_iou() {
        let r = miou(&grid(&[0, 1, 1, 1]), &grid(&[0, 0, 1, 1]), &[0, 1]).unwrap();
        assert_eq!(r.iou(0), Some(0.5));
        assert_eq!(r.iou(1), Some(2.0 / 3.0));
        assert!((r.mean - 7.0 / 12.0).abs() < 1e-15);
    }

    #[test]
    fn disjoint_masks_score_zero() {
        let r = miou(&grid(&[0, 0, 0, 0]), &grid(&[1, 1, 1, 1]), &[0, 1]).unwrap();
        assert_eq!(r.iou(0), Some(0.0));
        assert_eq!(r.iou(1), Some(0.0));
    }

    #[test]
    fn absent_classes_and_ignore_cells() {
        let r = miou(&grid(&[0, 0, 5, 0]), &grid(&[0, 0, IGNORE, 0]), &[0, 1]).unwrap();
        assert_eq!(r.iou(1), None);
        assert_eq!(r.mean, 1.0);
    }

    #[test]
    fn component_hand_example() {
        let gt = vec![vec![0, 1], vec![10, 11]];
        let pred = vec![vec![0, 1], vec![20, 21]];
        let s = component_f1(&pred, &gt);
        assert_eq!((s.precision, s.recall, s.f1), (0.5, 0.5, 0.5));
        assert_eq!(component_f1(&gt, &gt).f1, 1.0);
    }

    #[test]
    fn quarter_iou_matches_neither_rule() {
        // |inter| = 1, |union| = 4
        let gt = vec![vec![0, 1]];
        let pred = vec![vec![1, 2, 3]];
        assert_eq!(set_iou(&gt[0], &pred[0]), 0.25);
        let c = component_counts(&pred, &gt);
        assert_eq!((c.true_positive, c.false_positive, c.false_negative), (0, 0, 1));
    }

    #[test]
    fn macro_precision_hand_example() {
        let q = |c, top| RetrievalQuery { class: c, results: vec![Some(top)] };
        let r = top1_macro_precision(&[q(0, 0), q(0, 0), q(1, 1), q(1, 0)]);
        assert_eq!(r.mp, 0.75);
        let single = top1_macro_precision(&[q(2, 2), q(2, 1), q(2, 2)]);
        assert_eq!(single.mp, 2.0 / 3.0);
    }

    #[test]
    fn empty_results_count_as_misses() {
        let r = top1_macro_precision(&[RetrievalQuery { class: 0, results: vec![] }]);
        assert_eq!((r.mp, r.empty_queries), (0.0, 1));
    }

    #[test]
    fn components_are_four_connected() {
        // diagonal neighbours stay separate
        let mask = [true, false, false, true];
        let comps = connected_components(2, 2, |i| mask[i]);
        assert_eq!(comps, vec![vec![0], vec![3]]);
    }
}
