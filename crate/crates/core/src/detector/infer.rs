//! Inference: tandem aggregation, confidence floor and NMS.

use ndarray::{ArrayView2, ArrayView4};
use serde::{Deserialize, Serialize};

use super::model::Detector;
use super::scene::Sample;
use crate::error::Result;
use crate::geometry::{average_boxes, grid_detections, nms, Detection, GridSpec};
use crate::metrics::{u_ood_image, u_ood_single};
use crate::tandem::TandemOutput;

/// Final detections and OOD score for one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageResult {
    pub image_id: String,
    pub detections: Vec<Detection>,
    pub u_ood: f64,
}

/// Which outputs of a model to turn into detections.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadSelection {
    /// α/β aggregation on a BEA model, the single head otherwise.
    Aggregate,
    /// One head on its own, scored like a base model.
    Head(usize),
}

/// Merges the α/β pair anchor by anchor: averaged box, maximum confidence,
/// elementwise maximum class scores. The OOD score is taken from the pair
/// before merging.
pub fn aggregate_and_predict(
    out: &TandemOutput,
    grid: &GridSpec,
    conf_floor: f64,
    nms_thresh: f64,
) -> (Vec<Detection>, f64) {
    let u_ood = u_ood_image(out);
    let a = grid_detections(out.alpha.view(), grid);
    let b = grid_detections(out.beta.view(), grid);
    let merged: Vec<Detection> = a
        .iter()
        .zip(&b)
        .map(|(x, y)| {
            let probs = x
                .class_probs
                .iter()
                .zip(&y.class_probs)
                .map(|(p, q)| p.max(*q))
                .collect();
            Detection::new(
                average_boxes(&x.bbox, &y.bbox),
                x.confidence.max(y.confidence),
                probs,
            )
        })
        .filter(|d| d.confidence >= conf_floor)
        .collect();
    (nms(&merged, nms_thresh), u_ood)
}

/// Single-grid counterpart; the OOD score falls back to `1 - max confidence`.
pub fn predict_single(
    grid_out: ArrayView4<f64>,
    grid: &GridSpec,
    conf_floor: f64,
    nms_thresh: f64,
) -> (Vec<Detection>, f64) {
    let dets: Vec<Detection> = grid_detections(grid_out, grid)
        .into_iter()
        .filter(|d| d.confidence >= conf_floor)
        .collect();
    (nms(&dets, nms_thresh), u_ood_single(grid_out))
}

/// Runs the model over `samples` in chunks of `batch_size`.
pub fn predict(
    model: &Detector,
    samples: &[Sample],
    selection: HeadSelection,
    conf_floor: f64,
    nms_thresh: f64,
    batch_size: usize,
) -> Result<Vec<ImageResult>> {
    let grid = model.grid();
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let views: Vec<ArrayView2<f64>> = chunk.iter().map(|s| s.image.view()).collect();
        let preds = model.forward(&views)?;
        for (i, s) in chunk.iter().enumerate() {
            let (detections, u_ood) = match (selection, preds.heads.len()) {
                (HeadSelection::Aggregate, 2) => {
                    aggregate_and_predict(&preds.tandem(i)?, grid, conf_floor, nms_thresh)
                }
                (HeadSelection::Aggregate, _) => {
                    predict_single(preds.grid(0, i).view(), grid, conf_floor, nms_thresh)
                }
                (HeadSelection::Head(h), _) => {
                    predict_single(preds.grid(h, i).view(), grid, conf_floor, nms_thresh)
                }
            };
            out.push(ImageResult {
                image_id: s.image_id.clone(),
                detections,
                u_ood,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{channel, BBox};
    use approx::assert_abs_diff_eq;
    use ndarray::Array4;

    fn one_anchor() -> GridSpec {
        GridSpec::new(1, vec![(0.2, 0.2)], 2).unwrap()
    }

    fn cell(bbox: BBox, conf: f64, probs: [f64; 2]) -> Array4<f64> {
        let v = vec![bbox.cx, bbox.cy, bbox.w, bbox.h, conf, probs[0], probs[1]];
        Array4::from_shape_vec((1, 1, 1, 7), v).unwrap()
    }

    #[test]
    fn max_confidence_and_class_scores() {
        let bx = BBox::new(0.5, 0.5, 0.2, 0.2);
        let out = TandemOutput::new(cell(bx, 0.8, [0.1, 0.7]), cell(bx, 0.6, [0.9, 0.2])).unwrap();
        let (dets, _) = aggregate_and_predict(&out, &one_anchor(), 0.05, 0.5);
        assert_eq!(dets.len(), 1);
        assert_eq!(dets[0].confidence, 0.8);
        assert_eq!(dets[0].class_probs, vec![0.9, 0.7]);
        assert_eq!(dets[0].class_id, 0);
    }

    #[test]
    fn agreeing_heads_keep_box_and_score_zero() {
        let bx = BBox::new(0.4, 0.6, 0.3, 0.1);
        let g = cell(bx, 0.5, [0.3, 0.6]);
        let out = TandemOutput::new(g.clone(), g).unwrap();
        let (dets, u) = aggregate_and_predict(&out, &one_anchor(), 0.05, 0.5);
        assert_eq!(dets[0].bbox, bx);
        assert_eq!(u, 0.0);
    }

    #[test]
    fn pixel_boxes_average() {
        let a = BBox::from_pixel_corners(0.0, 0.0, 10.0, 10.0, 64.0);
        let b = BBox::from_pixel_corners(2.0, 2.0, 12.0, 12.0, 64.0);
        let out = TandemOutput::new(cell(a, 0.9, [1.0, 0.0]), cell(b, 0.9, [1.0, 0.0])).unwrap();
        let (dets, _) = aggregate_and_predict(&out, &one_anchor(), 0.05, 0.5);
        let (x0, y0, x1, y1) = dets[0].bbox.to_pixel_corners(64.0);
        for (got, want) in [(x0, 1.0), (y0, 1.0), (x1, 11.0), (y1, 11.0)] {
            assert_abs_diff_eq!(got, want, epsilon = 1e-9);
        }
    }

    #[test]
    fn confidence_floor_and_single_head_fallback() {
        let bx = BBox::new(0.5, 0.5, 0.2, 0.2);
        let low = cell(bx, 0.04, [0.5, 0.5]);
        let out = TandemOutput::new(low.clone(), low.clone()).unwrap();
        assert!(aggregate_and_predict(&out, &one_anchor(), 0.05, 0.5)
            .0
            .is_empty());

        let mut g = low;
        g[[0, 0, 0, channel::CONF]] = 0.7;
        let (dets, u) = predict_single(g.view(), &one_anchor(), 0.05, 0.5);
        assert_eq!(dets.len(), 1);
        assert_abs_diff_eq!(u, 0.3, epsilon = 1e-15);
    }
}
