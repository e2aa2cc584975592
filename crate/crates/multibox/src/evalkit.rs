//! Detection metrics: greedy TP/FP matching, detection-rate-vs-budget
//! curves, average precision (11-point and exact-area styles), top-k
//! detection accuracy, and their CSV outputs.

use std::collections::BTreeMap;
use std::io::Write;

use crate::datagen::SceneObject;
use crate::error::{MultiboxError, Result};
use crate::geometry::{jaccard, NormBox};
use crate::postprocess::Detection;

/// IoU threshold used by [`detection_at_k`].
pub const DETECTION_AT_K_IOU: f64 = 0.5;

/// One point of a precision/recall curve; points are ordered by score
/// threshold descending, so recall is non-decreasing along the list.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PRPoint {
    pub threshold: f64,
    pub recall: f64,
    pub precision: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PRCurve {
    pub points: Vec<PRPoint>,
    pub ap: f64,
}

/// Detection rate as a function of the per-image box budget; points run
/// from n = 1 to the requested maximum and are monotone non-decreasing.
#[derive(Debug, Clone, PartialEq)]
pub struct BudgetCurve {
    pub points: Vec<(usize, f64)>,
}

impl BudgetCurve {
    /// Rate at budget `n`: 0 for n = 0, the last point beyond the curve.
    pub fn rate_at(&self, n: usize) -> f64 {
        if n == 0 || self.points.is_empty() {
            return 0.0;
        }
        let idx = n.min(self.points.len()) - 1;
        self.points[idx].1
    }
}

/// Per-image evaluation input: proposed detections plus labeled truth.
#[derive(Debug, Clone)]
pub struct EvalImage {
    pub detections: Vec<Detection>,
    pub gt: Vec<SceneObject>,
}

/// A detection with its matching verdict, in processing (descending-score)
/// order.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchOutcome {
    pub detection: Detection,
    pub is_true_positive: bool,
}

/// Descending-score processing order; ties keep input order.
fn score_order(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score().total_cmp(&dets[a].score()).then(a.cmp(&b)));
    order
}

/// Greedy single-image matching: detections are processed in descending
/// score; each claims the unclaimed ground-truth box of highest IoU that
/// meets the threshold (same class required when `class_aware`), and is a
/// true positive iff such a box exists. Each ground truth is claimed at
/// most once, so duplicates on one object count as false positives.
pub fn match_detections(
    dets: &[Detection],
    gt: &[SceneObject],
    iou_threshold: f64,
    class_aware: bool,
) -> Vec<MatchOutcome> {
    let mut claimed = vec![false; gt.len()];
    let mut out = Vec::with_capacity(dets.len());
    for i in score_order(dets) {
        let d = &dets[i];
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gt.iter().enumerate() {
            if claimed[j] {
                continue;
            }
            if class_aware && d.class_label != Some(g.class_label) {
                continue;
            }
            let iou = jaccard(&d.bbox, &g.bbox);
            if iou >= iou_threshold && best.map_or(true, |(_, b)| iou > b) {
                best = Some((j, iou));
            }
        }
        let is_tp = match best {
            Some((j, _)) => {
                claimed[j] = true;
                true
            }
            None => false,
        };
        out.push(MatchOutcome { detection: d.clone(), is_true_positive: is_tp });
    }
    out
}

/// Class-agnostic detection rate versus per-image box budget. For each
/// image, detections are ranked by localizer confidence and greedily claim
/// ground truth; a truth box matched first at rank r is counted for every
/// budget n ≥ r, which makes the curve monotone by construction and equal
/// to re-running the match on each top-n prefix.
pub fn budget_curve(images: &[EvalImage], iou_threshold: f64, max_n: usize) -> BudgetCurve {
    let total_gt: usize = images.iter().map(|im| im.gt.len()).sum();
    let mut matched_by_rank = vec![0usize; max_n + 1];
    for im in images {
        let mut order: Vec<usize> = (0..im.detections.len()).collect();
        order.sort_by(|&a, &b| {
            im.detections[b]
                .localizer_conf
                .total_cmp(&im.detections[a].localizer_conf)
                .then(a.cmp(&b))
        });
        let mut claimed = vec![false; im.gt.len()];
        for (rank0, &i) in order.iter().enumerate().take(max_n) {
            let d = &im.detections[i];
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in im.gt.iter().enumerate() {
                if claimed[j] {
                    continue;
                }
                let iou = jaccard(&d.bbox, &g.bbox);
                if iou >= iou_threshold && best.map_or(true, |(_, b)| iou > b) {
                    best = Some((j, iou));
                }
            }
            if let Some((j, _)) = best {
                claimed[j] = true;
                matched_by_rank[rank0 + 1] += 1;
            }
        }
    }
    let mut points = Vec::with_capacity(max_n);
    let mut cum = 0usize;
    for n in 1..=max_n {
        cum += matched_by_rank[n];
        let rate = if total_gt == 0 { 0.0 } else { cum as f64 / total_gt as f64 };
        points.push((n, rate));
    }
    BudgetCurve { points }
}

/// AP summarization style.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ApStyle {
    /// Mean of the maximum precision at recall ∈ {0.0, 0.1, …, 1.0}.
    Voc2007_11pt,
    /// Exact area under the monotone envelope of the PR curve.
    Auc,
}

/// Average precision over globally scored matches. `scored` holds
/// (score, is_true_positive) pairs; they are ranked by descending score
/// (stable, so equal scores keep input order). Zero ground truth makes AP
/// undefined and is reported as an error, never as 0.
pub fn average_precision(
    scored: &[(f64, bool)],
    total_gt: usize,
    style: ApStyle,
) -> Result<PRCurve> {
    if total_gt == 0 {
        return Err(MultiboxError::ZeroGroundTruth { class: None });
    }
    let mut ranked: Vec<(f64, bool)> = scored.to_vec();
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut points = Vec::with_capacity(ranked.len());
    let mut tp = 0usize;
    for (i, &(threshold, is_tp)) in ranked.iter().enumerate() {
        if is_tp {
            tp += 1;
        }
        points.push(PRPoint {
            threshold,
            recall: tp as f64 / total_gt as f64,
            precision: tp as f64 / (i + 1) as f64,
        });
    }
    let ap = match style {
        ApStyle::Voc2007_11pt => {
            let mut sum = 0.0;
            for step in 0..=10 {
                let r = step as f64 / 10.0;
                let best = points
                    .iter()
                    .filter(|p| p.recall >= r - 1e-12)
                    .map(|p| p.precision)
                    .fold(0.0, f64::max);
                sum += best;
            }
            sum / 11.0
        }
        ApStyle::Auc => {
            // Monotone envelope from the right, then sum precision over
            // each recall increment.
            let mut env: Vec<f64> = points.iter().map(|p| p.precision).collect();
            for i in (0..env.len().saturating_sub(1)).rev() {
                env[i] = env[i].max(env[i + 1]);
            }
            let mut area = 0.0;
            let mut prev_recall = 0.0;
            for (p, &e) in points.iter().zip(&env) {
                if p.recall > prev_recall {
                    area += (p.recall - prev_recall) * e;
                    prev_recall = p.recall;
                }
            }
            area
        }
    };
    Ok(PRCurve { points, ap })
}

/// Per-class AP: for each class with at least one ground-truth box, match
/// that class's detections class-aware within each image, pool the scored
/// outcomes globally, and compute AP. Classes without ground truth are
/// absent from the result.
pub fn per_class_average_precision(
    images: &[EvalImage],
    iou_threshold: f64,
    style: ApStyle,
) -> BTreeMap<usize, PRCurve> {
    let mut classes: Vec<usize> = images
        .iter()
        .flat_map(|im| im.gt.iter().map(|g| g.class_label))
        .collect();
    classes.sort_unstable();
    classes.dedup();

    let mut out = BTreeMap::new();
    for &class in &classes {
        let mut scored: Vec<(f64, bool)> = Vec::new();
        let mut total_gt = 0usize;
        for im in images {
            let dets: Vec<Detection> = im
                .detections
                .iter()
                .filter(|d| d.class_label == Some(class))
                .cloned()
                .collect();
            let gt: Vec<SceneObject> =
                im.gt.iter().filter(|g| g.class_label == class).copied().collect();
            total_gt += gt.len();
            for m in match_detections(&dets, &gt, iou_threshold, true) {
                scored.push((m.detection.score(), m.is_true_positive));
            }
        }
        // total_gt > 0 by construction of `classes`.
        let curve = average_precision(&scored, total_gt, style).expect("class has ground truth");
        out.insert(class, curve);
    }
    out
}

/// Mean AP over the per-class curves; absent (no classes) yields None.
pub fn mean_average_precision(per_class: &BTreeMap<usize, PRCurve>) -> Option<f64> {
    if per_class.is_empty() {
        return None;
    }
    Some(per_class.values().map(|c| c.ap).sum::<f64>() / per_class.len() as f64)
}

/// Per-image top-k input for [`detection_at_k`].
#[derive(Debug, Clone)]
pub struct TopKImage {
    pub image_id: u64,
    /// (class, box) pairs, strongest first; at most one box per class.
    pub pairs: Vec<(usize, NormBox)>,
    pub gt: Vec<SceneObject>,
}

/// Fraction of images where one of the first `k` (class, box) pairs names
/// a correct class and overlaps a ground-truth box of that class with IoU
/// ≥ 0.5. A class appearing twice within an image's top k is an error.
pub fn detection_at_k(images: &[TopKImage], k: usize) -> Result<f64> {
    if images.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for im in images {
        let top = &im.pairs[..im.pairs.len().min(k)];
        for (i, &(class, _)) in top.iter().enumerate() {
            if top[..i].iter().any(|&(c, _)| c == class) {
                return Err(MultiboxError::DuplicateClassInTopK { image_id: im.image_id, class });
            }
        }
        let hit = top.iter().any(|(class, bbox)| {
            im.gt.iter().any(|g| {
                g.class_label == *class && jaccard(bbox, &g.bbox) >= DETECTION_AT_K_IOU
            })
        });
        if hit {
            hits += 1;
        }
    }
    Ok(hits as f64 / images.len() as f64)
}

// ---------------------------------------------------------------------------
// CSV outputs.

pub fn write_budget_curve_csv(w: &mut impl Write, curve: &BudgetCurve) -> Result<()> {
    writeln!(w, "n,rate")?;
    for &(n, rate) in &curve.points {
        writeln!(w, "{n},{rate}")?;
    }
    Ok(())
}

pub fn write_pr_csv(w: &mut impl Write, curve: &PRCurve) -> Result<()> {
    writeln!(w, "threshold,recall,precision")?;
    for p in &curve.points {
        writeln!(w, "{},{},{}", p.threshold, p.recall, p.precision)?;
    }
    Ok(())
}

pub fn write_summary_csv(w: &mut impl Write, rows: &[(String, f64)]) -> Result<()> {
    writeln!(w, "metric,value")?;
    for (metric, value) in rows {
        writeln!(w, "{metric},{value}")?;
    }
    Ok(())
}
