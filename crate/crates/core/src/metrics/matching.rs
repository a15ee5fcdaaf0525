use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::geometry::{iou, Detection, GroundTruth};

use super::uncertainty::u_pred;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImagePredictions {
    pub image_id: String,
    pub detections: Vec<Detection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageGroundTruth {
    pub image_id: String,
    pub objects: Vec<GroundTruth>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluatedDetection {
    pub detection: Detection,
    /// Correct detection (true) or incorrect detection (false).
    pub matched: bool,
    pub u_pred: f64,
    pub image_id: String,
}

/// Total order on detections: descending score, then content. Two permutations
/// of the same detections are processed identically.
pub fn detection_order(a: &Detection, b: &Detection) -> Ordering {
    b.score()
        .total_cmp(&a.score())
        .then(a.class_id.cmp(&b.class_id))
        .then(a.bbox.cx.total_cmp(&b.bbox.cx))
        .then(a.bbox.cy.total_cmp(&b.bbox.cy))
        .then(a.bbox.w.total_cmp(&b.bbox.w))
        .then(a.bbox.h.total_cmp(&b.bbox.h))
}

/// Greedy matching within one image: in descending score order each detection
/// claims the unclaimed same-class ground truth with the highest IoU at or
/// above `iou_thresh`.
pub fn match_detections(
    image_id: &str,
    dets: &[Detection],
    gts: &[GroundTruth],
    iou_thresh: f64,
) -> Vec<EvaluatedDetection> {
    let mut order: Vec<&Detection> = dets.iter().collect();
    order.sort_by(|a, b| detection_order(a, b));
    let mut claimed = vec![false; gts.len()];
    order
        .into_iter()
        .map(|d| {
            let mut best: Option<(usize, f64)> = None;
            for (g, gt) in gts.iter().enumerate() {
                if claimed[g] || gt.class_id != d.class_id {
                    continue;
                }
                let v = iou(&d.bbox, &gt.bbox);
                if v >= iou_thresh && best.is_none_or(|(_, b)| v > b) {
                    best = Some((g, v));
                }
            }
            if let Some((g, _)) = best {
                claimed[g] = true;
            }
            EvaluatedDetection {
                detection: d.clone(),
                matched: best.is_some(),
                u_pred: u_pred(d.confidence),
                image_id: image_id.to_string(),
            }
        })
        .collect()
}

pub fn match_image(
    preds: &ImagePredictions,
    gts: &ImageGroundTruth,
    iou_thresh: f64,
) -> Vec<EvaluatedDetection> {
    match_detections(&preds.image_id, &preds.detections, &gts.objects, iou_thresh)
}
