//! Lane prediction post-processing and both evaluation protocols: per-point
//! accuracy with FP/FN lane rates, and rasterized-line IoU matching with the
//! F1 measure.

mod spline;

pub use spline::{fit_spline, Spline};

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lanedata::{rasterize_lanes, LanePolyline};
use crate::numcore::{NumError, Tensor};

pub const DEFAULT_ROW_STRIDE: usize = 20;
pub const DEFAULT_PROB_FLOOR: f32 = 0.3;
pub const DEFAULT_EXISTENCE_THRESHOLD: f32 = 0.5;
pub const DEFAULT_POINT_THRESHOLD_PX: f64 = 20.0;
pub const DEFAULT_LANE_MATCH_FRACTION: f64 = 0.85;
pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;
/// Exhaustive lane matching is exact only for small lane counts.
pub const MAX_LANES_EXACT_MATCH: usize = 6;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("spline error: {0}")]
    Spline(String),
    #[error("empty ground truth: {0}")]
    EmptyGroundTruth(String),
    #[error("{count} lanes exceed the exhaustive matching limit of {MAX_LANES_EXACT_MATCH}")]
    TooManyLanes { count: usize },
    #[error("invalid metric input: {0}")]
    Input(String),
    #[error(transparent)]
    Num(#[from] NumError),
    #[error("{path}: {reason}")]
    File { path: String, reason: String },
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// One detected lane: points sampled at the evaluation rows plus the head's
/// existence probability.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictedLane {
    pub slot: usize,
    /// (x, y) with strictly increasing integer-valued rows.
    pub points: Vec<(f64, f64)>,
    pub existence: f32,
}

/// All detected lanes of one image.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LanePrediction {
    pub lanes: Vec<PredictedLane>,
}

/// Rows sampled by the point protocol: every `stride` rows upward from the
/// bottom of the image, returned in increasing order.
pub fn sample_rows(height: usize, stride: usize) -> Vec<usize> {
    let mut rows: Vec<usize> = (0..height).rev().step_by(stride.max(1)).collect();
    rows.reverse();
    rows
}

/// Extract lanes from per-class probability maps. For each lane slot whose
/// existence probability exceeds the threshold, the highest-response column
/// is taken every `row_stride` rows; rows whose best probability falls below
/// `prob_floor` contribute no point. Lanes with fewer than two points are
/// dropped.
pub fn extract_lanes(
    prob_maps: &Tensor<f32>,
    existence: &[f32],
    row_stride: usize,
    prob_floor: f32,
    existence_threshold: f32,
) -> Result<LanePrediction> {
    let d = prob_maps.dims();
    if d.n != 1 {
        return Err(EvalError::Input(format!("expected a single image, got batch {}", d.n)));
    }
    if d.h < row_stride {
        return Err(EvalError::Input(format!(
            "probability map height {} smaller than row stride {row_stride}",
            d.h
        )));
    }
    if existence.len() + 1 != d.c {
        return Err(EvalError::Input(format!(
            "{} existence slots do not match {} class maps (background + slots)",
            existence.len(),
            d.c
        )));
    }
    let rows = sample_rows(d.h, row_stride);
    let mut lanes = Vec::new();
    for (slot, &exist) in existence.iter().enumerate() {
        if exist <= existence_threshold {
            continue;
        }
        let class = slot + 1;
        let mut points = Vec::new();
        for &y in &rows {
            let mut best_x = 0usize;
            let mut best_p = prob_maps.at(0, class, y, 0);
            for x in 1..d.w {
                let p = prob_maps.at(0, class, y, x);
                if p > best_p {
                    best_p = p;
                    best_x = x;
                }
            }
            if best_p >= prob_floor {
                points.push((best_x as f64, y as f64));
            }
        }
        if points.len() >= 2 {
            lanes.push(PredictedLane { slot, points, existence: exist });
        }
    }
    Ok(LanePrediction { lanes })
}

/// Resample a ground-truth polyline at the evaluation rows by linear
/// interpolation; rows outside the polyline's span are skipped.
pub fn sample_polyline_at_rows(poly: &LanePolyline, rows: &[usize]) -> Vec<(f64, f64)> {
    let mut out = Vec::new();
    for &row in rows {
        let y = row as f64;
        let first = poly.points.first().unwrap();
        let last = poly.points.last().unwrap();
        if y < first.1 || y > last.1 {
            continue;
        }
        let mut x = first.0;
        for seg in poly.points.windows(2) {
            if y >= seg[0].1 && y <= seg[1].1 {
                let t = (y - seg[0].1) / (seg[1].1 - seg[0].1);
                x = seg[0].0 + t * (seg[1].0 - seg[0].0);
                break;
            }
        }
        out.push((x, y));
    }
    out
}

/// Densify a predicted lane with a cubic spline: one (x, y) per image row
/// spanned by its points, x clamped into the image.
pub fn densify_lane(lane: &PredictedLane, width: usize) -> Result<Vec<(f64, f64)>> {
    let spline = fit_spline(&lane.points)?;
    Ok(spline
        .dense_rows()
        .into_iter()
        .map(|(x, y)| (x.clamp(0.0, (width - 1) as f64), y))
        .collect())
}

// ------------------------------------------------------------- reports

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PointMetrics {
    pub accuracy: f64,
    pub fp_rate: f64,
    pub fn_rate: f64,
    pub correct_points: usize,
    pub gt_points: usize,
    pub fp_lanes: usize,
    pub pred_lanes: usize,
    pub fn_lanes: usize,
    pub gt_lanes: usize,
    pub point_threshold_px: f64,
    pub lane_match_fraction: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IouMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub line_width_px: usize,
    pub iou_threshold: f64,
}

/// Combined report; protocols that did not run stay `None`.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct MetricReport {
    pub point: Option<PointMetrics>,
    pub iou: Option<IouMetrics>,
}

impl MetricReport {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        if let Some(p) = &self.point {
            out.push_str(&format!(
                "point protocol: accuracy {:.4}  FP {:.4}  FN {:.4}  ({} / {} points, thresholds: {}px, match fraction {})\n",
                p.accuracy, p.fp_rate, p.fn_rate, p.correct_points, p.gt_points,
                p.point_threshold_px, p.lane_match_fraction
            ));
        }
        if let Some(i) = &self.iou {
            out.push_str(&format!(
                "iou protocol: precision {:.4}  recall {:.4}  F1 {:.4}  (TP {} FP {} FN {}, width {}px, IoU > {})\n",
                i.precision, i.recall, i.f1, i.tp, i.fp, i.fn_, i.line_width_px, i.iou_threshold
            ));
        }
        out
    }
}

// ----------------------------------------------------------- assignment

/// Best injective assignment of rows (predictions) to columns (ground
/// truths) maximizing the total score, by exhaustive search.
fn best_assignment(scores: &[Vec<f64>]) -> Vec<Option<usize>> {
    let preds = scores.len();
    let gts = scores.first().map_or(0, |r| r.len());
    let mut best_total = f64::NEG_INFINITY;
    let mut best: Vec<Option<usize>> = vec![None; preds];
    let mut current: Vec<Option<usize>> = vec![None; preds];
    let mut used = vec![false; gts];

    fn recurse(
        scores: &[Vec<f64>],
        p: usize,
        total: f64,
        current: &mut Vec<Option<usize>>,
        used: &mut Vec<bool>,
        best_total: &mut f64,
        best: &mut Vec<Option<usize>>,
    ) {
        if p == scores.len() {
            if total > *best_total {
                *best_total = total;
                best.clone_from(current);
            }
            return;
        }
        // Leave prediction p unmatched.
        current[p] = None;
        recurse(scores, p + 1, total, current, used, best_total, best);
        for g in 0..used.len() {
            if !used[g] {
                used[g] = true;
                current[p] = Some(g);
                recurse(scores, p + 1, total + scores[p][g], current, used, best_total, best);
                used[g] = false;
            }
        }
        current[p] = None;
    }

    recurse(scores, 0, 0.0, &mut current, &mut used, &mut best_total, &mut best);
    best
}

// -------------------------------------------------------- point protocol

/// Per-point accuracy with FP/FN lane rates.
///
/// Predictions and ground truths must be sampled at the same rows. Points
/// match when their x distance at the same row stays below the threshold;
/// lanes pair up one-to-one by the assignment maximizing total matched
/// points (exhaustive). A predicted lane is a false positive when its
/// matched fraction (relative to its assigned ground-truth lane's points)
/// falls below `lane_match_fraction`; a ground-truth lane with no qualifying
/// prediction is a false negative.
pub fn tusimple_metrics(
    preds: &[Vec<Vec<(f64, f64)>>],
    gts: &[Vec<Vec<(f64, f64)>>],
    point_threshold_px: f64,
    lane_match_fraction: f64,
) -> Result<PointMetrics> {
    if preds.len() != gts.len() {
        return Err(EvalError::Input(format!(
            "{} prediction images vs {} ground-truth images",
            preds.len(),
            gts.len()
        )));
    }
    let total_gt_points: usize =
        gts.iter().map(|lanes| lanes.iter().map(|l| l.len()).sum::<usize>()).sum();
    if total_gt_points == 0 {
        return Err(EvalError::EmptyGroundTruth(
            "no ground-truth points; accuracy denominator undefined".into(),
        ));
    }

    let mut correct = 0usize;
    let mut fp_lanes = 0usize;
    let mut fn_lanes = 0usize;
    let mut pred_lanes = 0usize;
    let mut gt_lanes = 0usize;

    for (pred, gt) in preds.iter().zip(gts) {
        // Ground-truth lanes with no sampled points cannot be matched.
        let gt: Vec<&Vec<(f64, f64)>> = gt.iter().filter(|l| !l.is_empty()).collect();
        if pred.len() > MAX_LANES_EXACT_MATCH || gt.len() > MAX_LANES_EXACT_MATCH {
            return Err(EvalError::TooManyLanes { count: pred.len().max(gt.len()) });
        }
        pred_lanes += pred.len();
        gt_lanes += gt.len();

        let matched: Vec<Vec<f64>> = pred
            .iter()
            .map(|p| gt.iter().map(|g| matched_points(p, g, point_threshold_px) as f64).collect())
            .collect();
        let assignment = best_assignment(&matched);

        let mut gt_served = vec![false; gt.len()];
        for (p, assigned) in assignment.iter().enumerate() {
            match assigned {
                Some(g) => {
                    let m = matched[p][*g] as usize;
                    correct += m;
                    let fraction = m as f64 / gt[*g].len() as f64;
                    if fraction < lane_match_fraction {
                        fp_lanes += 1;
                    } else {
                        gt_served[*g] = true;
                    }
                }
                None => fp_lanes += 1,
            }
        }
        fn_lanes += gt_served.iter().filter(|&&s| !s).count();
    }

    Ok(PointMetrics {
        accuracy: correct as f64 / total_gt_points as f64,
        fp_rate: if pred_lanes == 0 { 0.0 } else { fp_lanes as f64 / pred_lanes as f64 },
        fn_rate: if gt_lanes == 0 { 0.0 } else { fn_lanes as f64 / gt_lanes as f64 },
        correct_points: correct,
        gt_points: total_gt_points,
        fp_lanes,
        pred_lanes,
        fn_lanes,
        gt_lanes,
        point_threshold_px,
        lane_match_fraction,
    })
}

/// Number of rows where both lanes have a point and the x distance stays
/// strictly below the threshold.
fn matched_points(pred: &[(f64, f64)], gt: &[(f64, f64)], threshold: f64) -> usize {
    let mut count = 0;
    for &(px, py) in pred {
        for &(gx, gy) in gt {
            if py == gy && (px - gx).abs() < threshold {
                count += 1;
                break;
            }
        }
    }
    count
}

// ---------------------------------------------------------- IoU protocol

/// Pixel-count IoU of two single-lane rasterizations.
fn mask_iou(a: &crate::numcore::ClassMask, b: &crate::numcore::ClassMask) -> f64 {
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&pa, &pb) in a.data().iter().zip(b.data()) {
        let fa = pa > 0;
        let fb = pb > 0;
        if fa && fb {
            inter += 1;
        }
        if fa || fb {
            union += 1;
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Rasterized-line IoU matching with F-measure (beta = 1).
///
/// Every lane (predicted and ground truth) is stroked into its own binary
/// mask with the given line width; lanes pair up by the exhaustive
/// assignment maximizing total IoU; pairs with IoU strictly above the
/// threshold are true positives.
pub fn culane_f1(
    preds: &[Vec<LanePolyline>],
    gts: &[Vec<LanePolyline>],
    line_width_px: usize,
    iou_threshold: f64,
    height: usize,
    width: usize,
) -> Result<IouMetrics> {
    if preds.len() != gts.len() {
        return Err(EvalError::Input(format!(
            "{} prediction images vs {} ground-truth images",
            preds.len(),
            gts.len()
        )));
    }
    if line_width_px == 0 {
        return Err(EvalError::Input("line width must be >= 1".into()));
    }
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fn_ = 0usize;
    for (pred, gt) in preds.iter().zip(gts) {
        if pred.len() > MAX_LANES_EXACT_MATCH || gt.len() > MAX_LANES_EXACT_MATCH {
            return Err(EvalError::TooManyLanes { count: pred.len().max(gt.len()) });
        }
        let pred_masks: Vec<_> = pred
            .iter()
            .map(|l| rasterize_lanes(std::slice::from_ref(l), line_width_px, height, width))
            .collect();
        let gt_masks: Vec<_> = gt
            .iter()
            .map(|l| rasterize_lanes(std::slice::from_ref(l), line_width_px, height, width))
            .collect();
        let iou: Vec<Vec<f64>> = pred_masks
            .iter()
            .map(|pm| gt_masks.iter().map(|gm| mask_iou(pm, gm)).collect())
            .collect();
        let assignment = best_assignment(&iou);
        let mut image_tp = 0usize;
        for (p, assigned) in assignment.iter().enumerate() {
            if let Some(g) = assigned {
                if iou[p][*g] > iou_threshold {
                    image_tp += 1;
                }
            }
        }
        tp += image_tp;
        fp += pred.len() - image_tp;
        fn_ += gt.len() - image_tp;
    }
    let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let recall = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(IouMetrics { precision, recall, f1, tp, fp, fn_, line_width_px: line_width_px, iou_threshold })
}

// -------------------------------------------------- prediction JSON files

#[derive(Serialize, Deserialize)]
struct PredictionRecord {
    existence: Vec<bool>,
    lanes: Vec<LanePolyline>,
}

/// Serialize per-image predictions using the dataset's lane-record schema
/// (existence probabilities thresholded at 0.5).
pub fn save_predictions(path: &Path, preds: &[LanePrediction], max_lanes: usize) -> Result<()> {
    let records: Vec<PredictionRecord> = preds
        .iter()
        .map(|p| {
            let mut existence = vec![false; max_lanes];
            for lane in &p.lanes {
                if lane.slot < max_lanes {
                    existence[lane.slot] = true;
                }
            }
            PredictionRecord {
                existence,
                lanes: p
                    .lanes
                    .iter()
                    .map(|l| LanePolyline { slot: l.slot, points: l.points.clone() })
                    .collect(),
            }
        })
        .collect();
    let json = serde_json::to_string_pretty(&records)
        .map_err(|e| EvalError::File { path: path.display().to_string(), reason: e.to_string() })?;
    std::fs::write(path, json)
        .map_err(|e| EvalError::File { path: path.display().to_string(), reason: e.to_string() })?;
    Ok(())
}

/// Read back predictions written by [`save_predictions`] (or produced by an
/// external tool using the same schema).
pub fn load_predictions(path: &Path) -> Result<Vec<(Vec<LanePolyline>, Vec<bool>)>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| EvalError::File { path: path.display().to_string(), reason: e.to_string() })?;
    let records: Vec<PredictionRecord> = serde_json::from_str(&text)
        .map_err(|e| EvalError::File { path: path.display().to_string(), reason: e.to_string() })?;
    Ok(records.into_iter().map(|r| (r.lanes, r.existence)).collect())
}
