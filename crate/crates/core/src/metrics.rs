//! Detection and segmentation scores.
//!
//! * Detection: a predicted instance is a true positive when exactly one
//!   expert centroid falls on it. Instances holding zero or several
//!   centroids are false positives; centroids not on a true positive are
//!   false negatives.
//! * Instance segmentation: a prediction / ground-truth pair matches when
//!   their IoU is strictly greater than the threshold (0.5 by default).
//! * Dice between the foreground masks, and relative count error
//!   `|N_a − N_e| / N_e`.
//!
//! With no true positives, false positives or false negatives at all,
//! precision, recall and F1 are all 1 (an empty prediction of an empty scene
//! is perfect). A zero denominator otherwise gives 0.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labelsynth::PointAnnotationSet;
use crate::raster::{InstanceLabelMap, SemanticMask};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct EvalCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl std::ops::Add for EvalCounts {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrecisionRecall {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

pub fn precision_recall_f1(c: EvalCounts) -> PrecisionRecall {
    if c.tp == 0 && c.fp == 0 && c.fn_ == 0 {
        return PrecisionRecall {
            precision: 1.0,
            recall: 1.0,
            f1: 1.0,
        };
    }
    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let precision = ratio(c.tp, c.tp + c.fp);
    let recall = ratio(c.tp, c.tp + c.fn_);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    PrecisionRecall {
        precision,
        recall,
        f1,
    }
}

/// Counts detections under the exactly-one-centroid rule. A centroid is on
/// an instance when the pixel at its coordinate carries that instance's id.
pub fn match_detections(pred: &InstanceLabelMap, centroids: &PointAnnotationSet) -> Result<EvalCounts> {
    if pred.dims() != centroids.dims() {
        return Err(Error::dims(centroids.dims(), pred.dims()));
    }
    let mut hits: BTreeMap<u32, usize> = pred.ids().into_iter().map(|id| (id, 0)).collect();
    let mut on_background = 0;
    for p in centroids.points() {
        match *pred.get(p.x as usize, p.y as usize) {
            0 => on_background += 1,
            id => *hits.get_mut(&id).expect("id from map") += 1,
        }
    }
    let tp = hits.values().filter(|&&n| n == 1).count();
    let fp = hits.len() - tp;
    let in_multi: usize = hits.values().filter(|&&n| n >= 2).sum();
    Ok(EvalCounts {
        tp,
        fp,
        fn_: on_background + in_multi,
    })
}

type Areas = HashMap<u32, u64>;

/// Pixel areas per id and pairwise intersections.
fn overlaps(pred: &InstanceLabelMap, gt: &InstanceLabelMap) -> (Areas, Areas, HashMap<(u32, u32), u64>) {
    let mut area_p = HashMap::new();
    let mut area_g = HashMap::new();
    let mut inter = HashMap::new();
    for (&p, &g) in pred.as_slice().iter().zip(gt.as_slice()) {
        if p != 0 {
            *area_p.entry(p).or_insert(0) += 1;
        }
        if g != 0 {
            *area_g.entry(g).or_insert(0) += 1;
        }
        if p != 0 && g != 0 {
            *inter.entry((p, g)).or_insert(0) += 1;
        }
    }
    (area_p, area_g, inter)
}

/// IoU of every overlapping `(pred, gt)` pair.
pub fn pairwise_iou(pred: &InstanceLabelMap, gt: &InstanceLabelMap) -> Result<Vec<(u32, u32, f64)>> {
    pred.ensure_same_dims(gt)?;
    let (ap, ag, inter) = overlaps(pred, gt);
    let mut out: Vec<_> = inter
        .into_iter()
        .map(|((p, g), i)| (p, g, i as f64 / (ap[&p] + ag[&g] - i) as f64))
        .collect();
    out.sort_by_key(|a| (a.0, a.1));
    Ok(out)
}

/// One-to-one pairs with IoU strictly above `iou_thresh`.
///
/// Pairs are taken greedily by decreasing IoU (ties by ids). For thresholds
/// of 0.5 and above every qualifying pair is already unique on both sides.
pub fn matched_pairs(
    pred: &InstanceLabelMap,
    gt: &InstanceLabelMap,
    iou_thresh: f64,
) -> Result<Vec<(u32, u32, f64)>> {
    let mut cand: Vec<_> = pairwise_iou(pred, gt)?
        .into_iter()
        .filter(|&(_, _, iou)| iou > iou_thresh)
        .collect();
    cand.sort_by(|a, b| b.2.total_cmp(&a.2).then((a.0, a.1).cmp(&(b.0, b.1))));
    let mut used_p = std::collections::HashSet::new();
    let mut used_g = std::collections::HashSet::new();
    Ok(cand
        .into_iter()
        .filter(|&(p, g, _)| {
            if used_p.contains(&p) || used_g.contains(&g) {
                false
            } else {
                used_p.insert(p);
                used_g.insert(g);
                true
            }
        })
        .collect())
}

pub fn match_instances_iou(pred: &InstanceLabelMap, gt: &InstanceLabelMap, iou_thresh: f64) -> Result<EvalCounts> {
    let tp = matched_pairs(pred, gt, iou_thresh)?.len();
    Ok(EvalCounts {
        tp,
        fp: pred.ids().len() - tp,
        fn_: gt.ids().len() - tp,
    })
}

/// `2|A∩B| / (|A| + |B|)`, 1 when both masks are empty.
pub fn dice(pred: &SemanticMask, gt: &SemanticMask) -> Result<f64> {
    let (inter, total) = dice_terms(pred, gt)?;
    Ok(dice_from_terms(inter, total))
}

fn dice_terms(pred: &SemanticMask, gt: &SemanticMask) -> Result<(u64, u64)> {
    pred.ensure_same_dims(gt)?;
    let mut inter = 0u64;
    let mut total = 0u64;
    for (&a, &b) in pred.as_slice().iter().zip(gt.as_slice()) {
        inter += (a && b) as u64;
        total += a as u64 + b as u64;
    }
    Ok((inter, total))
}

fn dice_from_terms(inter: u64, total: u64) -> f64 {
    if total == 0 {
        1.0
    } else {
        2.0 * inter as f64 / total as f64
    }
}

/// Relative count error; undefined without expert counts.
pub fn rce(n_detected: usize, n_expert: usize) -> Result<f64> {
    if n_expert == 0 {
        return Err(Error::InvalidInput(
            "relative count error needs at least one expert count".into(),
        ));
    }
    Ok((n_detected as f64 - n_expert as f64).abs() / n_expert as f64)
}

/// Scores of one image, or of several pooled together.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub det: PrecisionRecall,
    pub seg: PrecisionRecall,
    pub dice: f64,
    /// `None` when there are no expert centroids.
    pub rce: Option<f64>,
    pub n_detected: usize,
    pub n_expert: usize,
    pub det_counts: EvalCounts,
    pub seg_counts: EvalCounts,
    pub dice_intersection: u64,
    pub dice_total: u64,
}

impl EvalReport {
    fn from_parts(
        det_counts: EvalCounts,
        seg_counts: EvalCounts,
        dice_intersection: u64,
        dice_total: u64,
        n_detected: usize,
        n_expert: usize,
    ) -> Self {
        Self {
            det: precision_recall_f1(det_counts),
            seg: precision_recall_f1(seg_counts),
            dice: dice_from_terms(dice_intersection, dice_total),
            rce: rce(n_detected, n_expert).ok(),
            n_detected,
            n_expert,
            det_counts,
            seg_counts,
            dice_intersection,
            dice_total,
        }
    }

    /// Pools counts and pixel sums over several images.
    pub fn pooled<'a>(reports: impl IntoIterator<Item = &'a EvalReport>) -> Self {
        let mut det = EvalCounts::default();
        let mut seg = EvalCounts::default();
        let (mut di, mut dt, mut na, mut ne) = (0, 0, 0, 0);
        for r in reports {
            det = det + r.det_counts;
            seg = seg + r.seg_counts;
            di += r.dice_intersection;
            dt += r.dice_total;
            na += r.n_detected;
            ne += r.n_expert;
        }
        Self::from_parts(det, seg, di, dt, na, ne)
    }

    /// Plain-text table with `det-F1  seg-F1  Dice  RCE` columns.
    pub fn table(rows: &[(String, EvalReport)]) -> String {
        let name_w = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max(5);
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<name_w$}  {:>7}  {:>7}  {:>7}  {:>7}",
            "Model", "det-F1", "seg-F1", "Dice", "RCE"
        );
        for (name, r) in rows {
            let rce = r.rce.map_or_else(|| "-".to_string(), |v| format!("{v:.3}"));
            let _ = writeln!(
                out,
                "{:<name_w$}  {:>7.3}  {:>7.3}  {:>7.3}  {:>7}",
                name, r.det.f1, r.seg.f1, r.dice, rce
            );
        }
        out
    }
}

/// Full report for one predicted label map.
pub fn evaluate(
    pred: &InstanceLabelMap,
    gt: &InstanceLabelMap,
    centroids: &PointAnnotationSet,
    iou_thresh: f64,
) -> Result<EvalReport> {
    let det = match_detections(pred, centroids)?;
    let seg = match_instances_iou(pred, gt, iou_thresh)?;
    let (inter, total) = dice_terms(&pred.to_mask(), &gt.to_mask())?;
    Ok(EvalReport::from_parts(
        det,
        seg,
        inter,
        total,
        pred.ids().len(),
        centroids.len(),
    ))
}

/// Writes `image,det_f1` rows for external plotting.
pub fn write_det_f1_csv(path: &Path, rows: &[(String, EvalReport)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["image", "det_f1"])?;
    for (name, r) in rows {
        w.write_record([name.as_str(), &format!("{:.6}", r.det.f1)])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labelsynth::PointAnnotation;
    use crate::raster::Grid;

    fn centroids(w: usize, h: usize, p: &[(u32, u32)]) -> PointAnnotationSet {
        let pts = p
            .iter()
            .enumerate()
            .map(|(i, &(x, y))| PointAnnotation {
                id: i as u32 + 1,
                x,
                y,
            })
            .collect();
        PointAnnotationSet::new(w, h, pts).unwrap()
    }

    #[test]
    fn prf_examples() {
        let p = precision_recall_f1(EvalCounts { tp: 8, fp: 2, fn_: 2 });
        assert!((p.precision - 0.8).abs() < 1e-12);
        assert!((p.recall - 0.8).abs() < 1e-12);
        assert!((p.f1 - 0.8).abs() < 1e-12);
        let e = precision_recall_f1(EvalCounts::default());
        assert_eq!((e.precision, e.recall, e.f1), (1.0, 1.0, 1.0));
        let z = precision_recall_f1(EvalCounts { tp: 0, fp: 5, fn_: 5 });
        assert_eq!((z.precision, z.recall, z.f1), (0.0, 0.0, 0.0));
    }

    #[test]
    fn rce_examples() {
        assert_eq!(rce(100, 100).unwrap(), 0.0);
        assert!((rce(120, 100).unwrap() - 0.2).abs() < 1e-12);
        assert!((rce(96, 100).unwrap() - 0.04).abs() < 1e-12);
        assert!(rce(5, 0).is_err());
    }

    #[test]
    fn detection_rules() {
        let mut m: InstanceLabelMap = Grid::new(10, 10);
        for y in 0..5 {
            for x in 0..5 {
                m.set(x, y, 3);
            }
        }
        let one = match_detections(&m, &centroids(10, 10, &[(2, 2)])).unwrap();
        assert_eq!(one, EvalCounts { tp: 1, fp: 0, fn_: 0 });
        let two = match_detections(&m, &centroids(10, 10, &[(1, 1), (3, 3)])).unwrap();
        assert_eq!(two, EvalCounts { tp: 0, fp: 1, fn_: 2 });
        let miss = match_detections(&m, &centroids(10, 10, &[(8, 8)])).unwrap();
        assert_eq!(miss, EvalCounts { tp: 0, fp: 1, fn_: 1 });
    }

    #[test]
    fn identical_maps_match_fully() {
        let mut m: InstanceLabelMap = Grid::new(12, 6);
        for y in 0..6 {
            for x in 0..5 {
                m.set(x, y, 1);
                m.set(x + 6, y, 2);
            }
        }
        assert_eq!(match_instances_iou(&m, &m, 0.5).unwrap(), EvalCounts { tp: 2, fp: 0, fn_: 0 });
        // Shift by 3 px: IoU = 2*6 / (2*30 - 12) = 0.25 for the overlapping pair.
        let mut shifted: InstanceLabelMap = Grid::new(12, 6);
        for y in 0..6 {
            for x in 3..8 {
                shifted.set(x, y, 1);
            }
        }
        let c = match_instances_iou(&shifted, &m, 0.5).unwrap();
        assert_eq!(c.tp, 0);
    }

    #[test]
    fn dice_cases() {
        let a: SemanticMask = Grid::from_vec(2, 2, vec![true, true, false, false]).unwrap();
        let b: SemanticMask = Grid::from_vec(2, 2, vec![false, false, true, true]).unwrap();
        assert_eq!(dice(&a, &a).unwrap(), 1.0);
        assert_eq!(dice(&a, &b).unwrap(), 0.0);
        assert_eq!(dice(&Grid::new(2, 2), &Grid::new(2, 2)).unwrap(), 1.0);
    }

    #[test]
    fn report_for_perfect_prediction() {
        let mut m: InstanceLabelMap = Grid::new(10, 10);
        for y in 2..6 {
            for x in 2..6 {
                m.set(x, y, 1);
            }
        }
        let c = centroids(10, 10, &[(3, 3)]);
        let r = evaluate(&m, &m, &c, 0.5).unwrap();
        assert_eq!((r.det.f1, r.seg.f1, r.dice, r.rce), (1.0, 1.0, 1.0, Some(0.0)));
        let table = EvalReport::table(&[("scene".into(), r)]);
        assert!(table.lines().next().unwrap().contains("det-F1"));
        assert!(table.contains("seg-F1") && table.contains("Dice") && table.contains("RCE"));
    }
}
