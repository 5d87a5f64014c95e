//! Inverse normalization and merging of per-unit predictions.
//!
//! Detection: map boxes back to the LiDAR frame, then greedy NMS on the
//! rotated BEV IoU. Segmentation: average the probability rows of every
//! unit that covers a point.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::geom::{FrameMap, OrientedBox, Point2};
use crate::perceive::{PatchPrediction, ProbRows};

/// Label for points no surviving unit covered.
pub const UNKNOWN_LABEL: i32 = -1;

pub const DEFAULT_NMS_IOU: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScenePrediction {
    pub boxes: Vec<OrientedBox>,
    pub point_probs: Option<ProbRows>,
    pub point_labels: Option<Vec<i32>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NmsParams {
    pub iou_threshold: f64,
    pub class_aware: bool,
}

impl Default for NmsParams {
    fn default() -> Self {
        NmsParams {
            iou_threshold: DEFAULT_NMS_IOU,
            class_aware: true,
        }
    }
}

impl NmsParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.iou_threshold) {
            return Err(Error::invalid(format!(
                "IoU threshold must lie in [0, 1], got {}",
                self.iou_threshold
            )));
        }
        Ok(())
    }
}

/// Counter-clockwise vertex list of a convex polygon.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ConvexPolygon {
    pub vertices: Vec<Point2>,
}

impl ConvexPolygon {
    /// Shoelace area; positive for counter-clockwise order.
    pub fn signed_area(&self) -> f64 {
        let v = &self.vertices;
        let n = v.len();
        if n < 3 {
            return 0.0;
        }
        let mut acc = 0.0;
        for i in 0..n {
            let (a, b) = (v[i], v[(i + 1) % n]);
            acc += a.x * b.y - b.x * a.y;
        }
        acc / 2.0
    }

    pub fn area(&self) -> f64 {
        self.signed_area().max(0.0)
    }

    /// Sutherland-Hodgman: keeps the part of `self` on the left of every
    /// edge of the counter-clockwise `clip` polygon.
    pub fn clip(&self, clip: &ConvexPolygon) -> ConvexPolygon {
        let mut out = self.vertices.clone();
        let m = clip.vertices.len();
        for e in 0..m {
            if out.is_empty() {
                break;
            }
            let e0 = clip.vertices[e];
            let e1 = clip.vertices[(e + 1) % m];
            let side = |p: Point2| (e1.x - e0.x) * (p.y - e0.y) - (e1.y - e0.y) * (p.x - e0.x);
            let input = std::mem::take(&mut out);
            let mut prev = *input.last().expect("non-empty");
            let mut d_prev = side(prev);
            for &cur in &input {
                let d_cur = side(cur);
                if d_cur >= 0.0 {
                    if d_prev < 0.0 {
                        out.push(lerp(prev, cur, d_prev / (d_prev - d_cur)));
                    }
                    out.push(cur);
                } else if d_prev >= 0.0 {
                    out.push(lerp(prev, cur, d_prev / (d_prev - d_cur)));
                }
                prev = cur;
                d_prev = d_cur;
            }
        }
        ConvexPolygon { vertices: out }
    }
}

fn lerp(a: Point2, b: Point2, t: f64) -> Point2 {
    Point2::new(a.x + t * (b.x - a.x), a.y + t * (b.y - a.y))
}

/// BEV corners, counter-clockwise, starting at local `(+l/2, +w/2)`.
pub fn box_corners_bev(b: &OrientedBox) -> ConvexPolygon {
    let (s, c) = b.yaw.sin_cos();
    let (hl, hw) = (b.length / 2.0, b.width / 2.0);
    let vertices = [(hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw)]
        .iter()
        .map(|&(u, v)| Point2::new(b.cx + c * u - s * v, b.cy + s * u + c * v))
        .collect();
    ConvexPolygon { vertices }
}

fn bev_radius(b: &OrientedBox) -> f64 {
    0.5 * b.length.hypot(b.width)
}

fn disjoint_by_radius(a: &OrientedBox, b: &OrientedBox) -> bool {
    let d = (a.cx - b.cx).hypot(a.cy - b.cy);
    d > bev_radius(a) + bev_radius(b)
}

fn iou_from_parts(a: &OrientedBox, pa: &ConvexPolygon, b: &OrientedBox, pb: &ConvexPolygon) -> f64 {
    if disjoint_by_radius(a, b) {
        return 0.0;
    }
    let inter = pa.clip(pb).area();
    let union = a.bev_area() + b.bev_area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Rotated bird's-eye-view IoU of two boxes.
pub fn rotated_iou_bev(a: &OrientedBox, b: &OrientedBox) -> f64 {
    iou_from_parts(a, &box_corners_bev(a), b, &box_corners_bev(b))
}

/// Total order used by NMS: score descending, then BEV area descending,
/// then `cx`, `cy`, `yaw` ascending.
pub fn nms_order(a: &OrientedBox, b: &OrientedBox) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| b.bev_area().total_cmp(&a.bev_area()))
        .then_with(|| a.cx.total_cmp(&b.cx))
        .then_with(|| a.cy.total_cmp(&b.cy))
        .then_with(|| a.yaw.total_cmp(&b.yaw))
}

/// Greedy non-maximum suppression. A box is dropped when its IoU with an
/// already kept box exceeds `iou_threshold` (same class only when
/// `class_aware`). Output is in keep order.
pub fn nms(boxes: &[OrientedBox], iou_threshold: f64, class_aware: bool) -> Vec<OrientedBox> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&i, &j| nms_order(&boxes[i], &boxes[j]));
    let polys: Vec<ConvexPolygon> = boxes.iter().map(box_corners_bev).collect();
    let mut suppressed = vec![false; boxes.len()];
    let mut kept = Vec::new();
    for (rank, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        kept.push(boxes[i]);
        for &j in &order[rank + 1..] {
            if suppressed[j] || (class_aware && boxes[j].class_id != boxes[i].class_id) {
                continue;
            }
            if iou_from_parts(&boxes[i], &polys[i], &boxes[j], &polys[j]) > iou_threshold {
                suppressed[j] = true;
            }
        }
    }
    kept
}

/// Maps every unit's boxes back to the LiDAR frame and runs NMS.
pub fn merge_detections<F: FrameMap>(
    per_unit: &[(F, PatchPrediction)],
    params: &NmsParams,
) -> ScenePrediction {
    let boxes: Vec<OrientedBox> = per_unit
        .iter()
        .flat_map(|(frame, pred)| pred.boxes.iter().map(move |b| frame.box_from_frame(b)))
        .collect();
    ScenePrediction {
        boxes: nms(&boxes, params.iou_threshold, params.class_aware),
        point_probs: None,
        point_labels: None,
    }
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Averages the probability rows of every unit covering each scene point.
/// `per_unit` pairs the scene indices of a unit with its prediction.
pub fn merge_segmentation(
    per_unit: &[(&[usize], &PatchPrediction)],
    scene_point_count: usize,
    n_classes: usize,
) -> Result<ScenePrediction> {
    let mut sums = ProbRows::zeros(scene_point_count, n_classes);
    let mut counts = vec![0u32; scene_point_count];
    for (u, (indices, pred)) in per_unit.iter().enumerate() {
        let rows = pred
            .point_probs
            .as_ref()
            .ok_or_else(|| Error::Contract(format!("patch {u} has no point probabilities")))?;
        if rows.len() != indices.len() || (rows.n_classes() != n_classes && !indices.is_empty()) {
            return Err(Error::Contract(format!(
                "patch {u}: {} rows of width {} for {} points of width {n_classes}",
                rows.len(),
                rows.n_classes(),
                indices.len()
            )));
        }
        for (k, &i) in indices.iter().enumerate() {
            if i >= scene_point_count {
                return Err(Error::Contract(format!(
                    "patch {u} references point {i} of {scene_point_count}"
                )));
            }
            for (acc, v) in sums.row_mut(i).iter_mut().zip(rows.row(k)) {
                *acc += v;
            }
            counts[i] += 1;
        }
    }
    let mut labels = vec![UNKNOWN_LABEL; scene_point_count];
    for (i, &n) in counts.iter().enumerate() {
        if n == 0 {
            continue;
        }
        let row = sums.row_mut(i);
        row.iter_mut().for_each(|v| *v /= n as f64);
        labels[i] = argmax(row) as i32;
    }
    Ok(ScenePrediction {
        boxes: Vec::new(),
        point_probs: Some(sums),
        point_labels: Some(labels),
    })
}
