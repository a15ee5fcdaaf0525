use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::ap::mean_ap;
use super::matching::{detection_order, EvaluatedDetection, ImageGroundTruth, ImagePredictions};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetentionCurve {
    pub fractions: Vec<f64>,
    pub ap50_values: Vec<f64>,
    /// Trapezoid area normalized by the fraction span.
    pub auc: f64,
}

/// `0.05, 0.10, ..., 1.00`.
pub fn default_fractions() -> Vec<f64> {
    (1..=20).map(|i| i as f64 / 20.0).collect()
}

fn retained_count(f: f64, n: usize) -> usize {
    // guards 0.05 * 20 = 1.0000000000000002 from rounding up
    (((f * n as f64) - 1e-9).ceil().max(0.0) as usize).min(n)
}

/// AP50 while keeping only the most certain detections.
///
/// At fraction `f` the `ceil(f * N)` detections with the lowest `u_pred`
/// (ties: higher score first) are re-matched against the full ground truth.
pub fn retention_curve(
    evaluated: &[EvaluatedDetection],
    gts: &[ImageGroundTruth],
    num_classes: usize,
    fractions: &[f64],
) -> RetentionCurve {
    let n = evaluated.len();
    let mut by_certainty: Vec<usize> = (0..n).collect();
    by_certainty.sort_by(|&a, &b| {
        let (x, y) = (&evaluated[a], &evaluated[b]);
        x.u_pred
            .total_cmp(&y.u_pred)
            .then_with(|| detection_order(&x.detection, &y.detection))
            .then_with(|| x.image_id.cmp(&y.image_id))
    });

    let ap50_values: Vec<f64> = fractions
        .iter()
        .map(|&f| {
            let mut keep = vec![false; n];
            for &i in &by_certainty[..retained_count(f, n)] {
                keep[i] = true;
            }
            let mut per_image: BTreeMap<&str, Vec<_>> = BTreeMap::new();
            for g in gts {
                per_image.entry(g.image_id.as_str()).or_default();
            }
            for (e, _) in evaluated.iter().zip(&keep).filter(|(_, &k)| k) {
                per_image
                    .entry(e.image_id.as_str())
                    .or_default()
                    .push(e.detection.clone());
            }
            let preds: Vec<ImagePredictions> = per_image
                .into_iter()
                .map(|(id, detections)| ImagePredictions {
                    image_id: id.to_string(),
                    detections,
                })
                .collect();
            mean_ap(&preds, gts, num_classes, &[0.5]).ap50
        })
        .collect();

    let auc = match fractions.len() {
        0 => 0.0,
        1 => ap50_values[0],
        _ => {
            let area: f64 = fractions
                .windows(2)
                .zip(ap50_values.windows(2))
                .map(|(f, a)| (f[1] - f[0]) * (a[0] + a[1]) / 2.0)
                .sum();
            area / (fractions[fractions.len() - 1] - fractions[0])
        }
    };
    RetentionCurve {
        fractions: fractions.to_vec(),
        ap50_values,
        auc,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{BBox, Detection, GroundTruth};
    use crate::metrics::matching::match_image;

    fn gt_at(x: f64) -> GroundTruth {
        GroundTruth {
            bbox: BBox::new(x, 0.5, 0.1, 0.1),
            class_id: 0,
        }
    }

    fn setup(
        dets: Vec<Detection>,
        objs: Vec<GroundTruth>,
    ) -> (
        Vec<EvaluatedDetection>,
        Vec<ImageGroundTruth>,
        Vec<ImagePredictions>,
    ) {
        let preds = vec![ImagePredictions {
            image_id: "0".into(),
            detections: dets,
        }];
        let gts = vec![ImageGroundTruth {
            image_id: "0".into(),
            objects: objs,
        }];
        let e = match_image(&preds[0], &gts[0], 0.5);
        (e, gts, preds)
    }

    #[test]
    fn counts() {
        assert_eq!(retained_count(0.05, 20), 1);
        assert_eq!(retained_count(0.5, 3), 2);
        assert_eq!(retained_count(1.0, 7), 7);
    }

    #[test]
    fn equal_uncertainty_tps_rise_to_raw_ap() {
        let objs = vec![gt_at(0.2), gt_at(0.5), gt_at(0.8)];
        let dets = objs
            .iter()
            .map(|o| Detection::new(o.bbox, 0.7, vec![1.0]))
            .collect();
        let (e, gts, preds) = setup(dets, objs);
        let raw = mean_ap(&preds, &gts, 1, &[0.5]).ap50;
        assert_eq!(raw, 1.0);
        // against the full ground truth, k of 3 retained TPs give recall k/3 at precision 1
        let c = retention_curve(&e, &gts, 1, &[0.3, 0.6, 1.0]);
        assert_eq!(c.ap50_values, vec![1.0 / 3.0, 2.0 / 3.0, raw]);
    }

    #[test]
    fn tp_then_fp() {
        let tp = Detection::new(gt_at(0.2).bbox, 0.9, vec![1.0]);
        let fp = Detection::new(BBox::new(0.8, 0.8, 0.1, 0.1), 0.1, vec![1.0]);
        let (e, gts, preds) = setup(vec![fp, tp], vec![gt_at(0.2)]);
        let c = retention_curve(&e, &gts, 1, &[0.5, 1.0]);
        assert_eq!(c.ap50_values, vec![1.0, 1.0]);
        assert_eq!(c.ap50_values[1], mean_ap(&preds, &gts, 1, &[0.5]).ap50);
    }

    #[test]
    fn empty_detections_give_zeros() {
        let (_, gts, _) = setup(vec![], vec![gt_at(0.2)]);
        let c = retention_curve(&[], &gts, 1, &default_fractions());
        assert!(c.ap50_values.iter().all(|&v| v == 0.0));
        assert_eq!(c.auc, 0.0);
    }

    #[test]
    fn nothing_to_find_agrees_with_raw_ap() {
        // no objects and no detections: the curve still ends at AP50_raw
        let (_, gts, preds) = setup(vec![], vec![]);
        let c = retention_curve(&[], &gts, 3, &default_fractions());
        assert_eq!(
            c.ap50_values.last().copied(),
            Some(mean_ap(&preds, &gts, 3, &[0.5]).ap50)
        );
    }

    #[test]
    fn miscalibrated_uncertainty_lowers_auc() {
        // two TPs and two FPs; u assigned well and then reversed
        let objs = vec![gt_at(0.2), gt_at(0.6)];
        let dets = vec![
            Detection::new(gt_at(0.2).bbox, 0.6, vec![1.0]),
            Detection::new(gt_at(0.6).bbox, 0.5, vec![1.0]),
            Detection::new(BBox::new(0.9, 0.1, 0.1, 0.1), 0.7, vec![1.0]),
            Detection::new(BBox::new(0.1, 0.9, 0.1, 0.1), 0.8, vec![1.0]),
        ];
        let (e, gts, _) = setup(dets, objs);
        let mut good = e.clone();
        let mut bad = e.clone();
        for (g, b) in good.iter_mut().zip(bad.iter_mut()) {
            g.u_pred = if g.matched { 0.1 } else { 0.9 };
            b.u_pred = if b.matched { 0.9 } else { 0.1 };
        }
        let fr = default_fractions();
        let cg = retention_curve(&good, &gts, 1, &fr);
        let cb = retention_curve(&bad, &gts, 1, &fr);
        assert!(cb.auc <= cg.auc);
        assert_eq!(cg.ap50_values.last(), cb.ap50_values.last());
        assert!((0.0..=1.0).contains(&cg.auc));
    }
}
