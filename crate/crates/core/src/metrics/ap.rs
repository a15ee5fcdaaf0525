use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::matching::{
    detection_order, match_image, EvaluatedDetection, ImageGroundTruth, ImagePredictions,
};

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub const COCO_THRESHOLDS: [f64; 10] = [0.50, 0.55, 0.60, 0.65, 0.70, 0.75, 0.80, 0.85, 0.90, 0.95];

/// All-point interpolated average precision over score-ranked detections.
///
/// With no ground truth the AP is 1 when there are also no detections and 0
/// otherwise.
pub fn average_precision(evaluated: &[EvaluatedDetection], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return if evaluated.is_empty() { 1.0 } else { 0.0 };
    }
    let mut ranked: Vec<&EvaluatedDetection> = evaluated.iter().collect();
    ranked.sort_by(|a, b| {
        b.detection
            .score()
            .total_cmp(&a.detection.score())
            .then_with(|| a.image_id.cmp(&b.image_id))
            .then_with(|| detection_order(&a.detection, &b.detection))
    });

    let mut tp = 0usize;
    let mut recall = Vec::with_capacity(ranked.len());
    let mut precision = Vec::with_capacity(ranked.len());
    for (i, e) in ranked.iter().enumerate() {
        tp += e.matched as usize;
        recall.push(tp as f64 / n_gt as f64);
        precision.push(tp as f64 / (i + 1) as f64);
    }
    // precision envelope, right to left
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (r, p) in recall.iter().zip(&precision) {
        if *r > prev_recall {
            ap += (r - prev_recall) * p;
            prev_recall = *r;
        }
    }
    ap
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanAp {
    /// AP averaged over classes, then over every threshold.
    pub map: f64,
    /// Class-averaged AP at IoU 0.5.
    pub ap50: f64,
}

/// Class-averaged AP per IoU threshold. `num_classes` classes are averaged,
/// including classes absent from both predictions and ground truth.
fn class_mean_ap(
    preds: &[ImagePredictions],
    gts: &[ImageGroundTruth],
    num_classes: usize,
    iou_thresh: f64,
) -> f64 {
    let gt_by_id: HashMap<&str, &ImageGroundTruth> =
        gts.iter().map(|g| (g.image_id.as_str(), g)).collect();
    let empty = |id: &str| ImageGroundTruth {
        image_id: id.to_string(),
        objects: Vec::new(),
    };
    let mut evaluated = Vec::new();
    for p in preds {
        match gt_by_id.get(p.image_id.as_str()) {
            Some(g) => evaluated.extend(match_image(p, g, iou_thresh)),
            None => evaluated.extend(match_image(p, &empty(&p.image_id), iou_thresh)),
        }
    }
    let mut total = 0.0;
    for c in 0..num_classes {
        let cls: Vec<EvaluatedDetection> = evaluated
            .iter()
            .filter(|e| e.detection.class_id == c)
            .cloned()
            .collect();
        let n_gt = gts
            .iter()
            .flat_map(|g| g.objects.iter())
            .filter(|o| o.class_id == c)
            .count();
        total += average_precision(&cls, n_gt);
    }
    total / num_classes as f64
}

/// mAP over `thresholds` and AP50, both averaged over classes first.
pub fn mean_ap(
    preds: &[ImagePredictions],
    gts: &[ImageGroundTruth],
    num_classes: usize,
    thresholds: &[f64],
) -> MeanAp {
    let ap50 = class_mean_ap(preds, gts, num_classes, 0.5);
    let per: Vec<f64> = thresholds
        .iter()
        .map(|&t| {
            if t == 0.5 {
                ap50
            } else {
                class_mean_ap(preds, gts, num_classes, t)
            }
        })
        .collect();
    let map = if per.is_empty() {
        0.0
    } else {
        per.iter().sum::<f64>() / per.len() as f64
    };
    MeanAp { map, ap50 }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{BBox, Detection, GroundTruth};

    fn ev(score: f64, matched: bool) -> EvaluatedDetection {
        EvaluatedDetection {
            detection: Detection::new(BBox::new(0.5, 0.5, 0.1, 0.1), score, vec![1.0]),
            matched,
            u_pred: 1.0 - score,
            image_id: "0".into(),
        }
    }

    #[test]
    fn ap_examples() {
        assert_eq!(average_precision(&[ev(0.9, true)], 1), 1.0);
        assert_eq!(average_precision(&[ev(0.9, false)], 1), 0.0);
        assert_eq!(average_precision(&[ev(0.9, false), ev(0.8, true)], 1), 0.5);
        assert_eq!(average_precision(&[], 0), 1.0);
        assert_eq!(average_precision(&[ev(0.9, false)], 0), 0.0);
        assert_eq!(average_precision(&[], 3), 0.0);
    }

    #[test]
    fn ap_hand_pr_curve() {
        // TP, FP, TP with 3 GT: recall steps 1/3 @ p=1, 2/3 @ p=2/3
        let e = [ev(0.9, true), ev(0.8, false), ev(0.7, true)];
        let expected = 1.0 / 3.0 * 1.0 + 1.0 / 3.0 * (2.0 / 3.0);
        assert!((average_precision(&e, 3) - expected).abs() < 1e-15);
    }

    #[test]
    fn ap_non_increasing_when_tp_relabelled() {
        let base = [
            ev(0.9, true),
            ev(0.8, false),
            ev(0.7, true),
            ev(0.6, true),
            ev(0.5, false),
        ];
        let a0 = average_precision(&base, 4);
        for i in 0..base.len() {
            if base[i].matched {
                let mut m = base.clone();
                m[i].matched = false;
                assert!(average_precision(&m, 4) <= a0);
            }
        }
    }

    fn image(id: &str, dets: Vec<Detection>) -> ImagePredictions {
        ImagePredictions {
            image_id: id.into(),
            detections: dets,
        }
    }

    fn gts(id: &str, objs: Vec<GroundTruth>) -> ImageGroundTruth {
        ImageGroundTruth {
            image_id: id.into(),
            objects: objs,
        }
    }

    fn onehot(c: usize, k: usize) -> Vec<f64> {
        (0..k).map(|i| (i == c) as u8 as f64).collect()
    }

    #[test]
    fn perfect_and_empty_detectors() {
        let objs = vec![
            GroundTruth {
                bbox: BBox::new(0.3, 0.3, 0.2, 0.2),
                class_id: 0,
            },
            GroundTruth {
                bbox: BBox::new(0.7, 0.7, 0.1, 0.3),
                class_id: 1,
            },
        ];
        let dets = objs
            .iter()
            .map(|o| Detection::new(o.bbox, 0.9, onehot(o.class_id, 2)))
            .collect();
        let m = mean_ap(
            &[image("a", dets)],
            &[gts("a", objs.clone())],
            2,
            &COCO_THRESHOLDS,
        );
        assert_eq!(m.map, 1.0);
        assert_eq!(m.ap50, 1.0);

        let m = mean_ap(
            &[image("a", vec![])],
            &[gts("a", objs)],
            2,
            &COCO_THRESHOLDS,
        );
        assert_eq!(m.map, 0.0);
        assert_eq!(m.ap50, 0.0);
    }

    #[test]
    fn mean_ap_is_composition_of_average_precision() {
        let objs = vec![
            GroundTruth {
                bbox: BBox::new(0.3, 0.3, 0.2, 0.2),
                class_id: 0,
            },
            GroundTruth {
                bbox: BBox::new(0.6, 0.6, 0.2, 0.2),
                class_id: 0,
            },
            GroundTruth {
                bbox: BBox::new(0.5, 0.2, 0.2, 0.1),
                class_id: 1,
            },
        ];
        let dets = vec![
            Detection::new(BBox::new(0.31, 0.3, 0.2, 0.2), 0.9, onehot(0, 2)),
            Detection::new(BBox::new(0.65, 0.62, 0.2, 0.2), 0.8, onehot(0, 2)),
            Detection::new(BBox::new(0.1, 0.9, 0.2, 0.2), 0.85, onehot(0, 2)),
            Detection::new(BBox::new(0.5, 0.21, 0.18, 0.1), 0.7, onehot(1, 2)),
        ];
        let preds = [image("a", dets.clone())];
        let g = [gts("a", objs.clone())];
        let m = mean_ap(&preds, &g, 2, &COCO_THRESHOLDS);

        let mut per_t = Vec::new();
        for &t in &COCO_THRESHOLDS {
            let e = match_image(&preds[0], &g[0], t);
            let mut s = 0.0;
            for c in 0..2 {
                let cls: Vec<_> = e
                    .iter()
                    .filter(|x| x.detection.class_id == c)
                    .cloned()
                    .collect();
                let n = objs.iter().filter(|o| o.class_id == c).count();
                s += average_precision(&cls, n);
            }
            per_t.push(s / 2.0);
        }
        assert_eq!(m.ap50, per_t[0]);
        let expected = per_t.iter().sum::<f64>() / per_t.len() as f64;
        assert!((m.map - expected).abs() < 1e-15);
        assert!(m.map < m.ap50);
    }
}
