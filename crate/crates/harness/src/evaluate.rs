//! Metrics for one run, computed from detection dumps and ground truth.

use bea_core::metrics::{
    match_image, mean_ap, retention_curve, roc_auc, roc_curve, uncertainty_error,
    EvaluatedDetection, ImageGroundTruth, ImagePredictions, OodLabel, OodScore, RetentionCurve,
    UncertaintyError, COCO_THRESHOLDS,
};
use serde::{Deserialize, Serialize};

use crate::config::EvalConfig;
use crate::dump::ImageRecord;
use crate::error::Result;

/// One row of the metrics CSV. Metrics that are undefined for a run (for
/// instance UE without any incorrect detection) are left empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub config_id: String,
    pub seed: u64,
    #[serde(rename = "mAP_raw")]
    pub map_raw: f64,
    #[serde(rename = "AP50_raw")]
    pub ap50_raw: f64,
    #[serde(rename = "AP50_upred")]
    pub ap50_upred: Option<f64>,
    #[serde(rename = "UE")]
    pub ue: Option<f64>,
    pub delta_opt: Option<f64>,
    pub retention_auc: f64,
    pub auroc_near: Option<f64>,
    pub auroc_far: Option<f64>,
}

/// Everything the report needs besides the CSV row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub row: MetricsRow,
    pub uncertainty: Option<UncertaintyError>,
    pub retention: RetentionCurve,
    pub roc_near: Vec<(f64, f64)>,
    pub roc_far: Vec<(f64, f64)>,
}

pub struct EvalInputs<'a> {
    pub config_id: &'a str,
    pub seed: u64,
    pub num_classes: usize,
    pub test: &'a [ImageRecord],
    pub ground_truth: &'a [ImageGroundTruth],
    pub near_ood: &'a [ImageRecord],
    pub far_ood: &'a [ImageRecord],
}

pub fn predictions(records: &[ImageRecord]) -> Vec<ImagePredictions> {
    records.iter().map(ImageRecord::predictions).collect()
}

/// Greedy matching of every image, in ground-truth order.
pub fn evaluated_detections(
    preds: &[ImagePredictions],
    gts: &[ImageGroundTruth],
    iou_thresh: f64,
) -> Vec<EvaluatedDetection> {
    let empty = ImageGroundTruth {
        image_id: String::new(),
        objects: Vec::new(),
    };
    preds
        .iter()
        .flat_map(|p| {
            let gt = gts
                .iter()
                .find(|g| g.image_id == p.image_id)
                .unwrap_or(&empty);
            match_image(p, gt, iou_thresh)
        })
        .collect()
}

fn ood_scores(inl: &[ImageRecord], ood: &[ImageRecord]) -> Vec<OodScore> {
    let tag = |r: &ImageRecord, label| OodScore {
        image_id: r.image_id.clone(),
        u_ood: r.u_ood,
        label,
    };
    inl.iter()
        .map(|r| tag(r, OodLabel::InDist))
        .chain(ood.iter().map(|r| tag(r, OodLabel::Ood)))
        .collect()
}

pub fn evaluate(inputs: &EvalInputs<'_>, cfg: &EvalConfig) -> Result<Evaluation> {
    let k = inputs.num_classes;
    let preds = predictions(inputs.test);
    let gts = inputs.ground_truth;
    let raw = mean_ap(&preds, gts, k, &COCO_THRESHOLDS);
    let evaluated = evaluated_detections(&preds, gts, cfg.iou_thresh);
    let uncertainty = uncertainty_error(&evaluated).ok();
    let ap50_upred = uncertainty.map(|u| {
        let kept: Vec<ImagePredictions> = preds
            .iter()
            .map(|p| ImagePredictions {
                image_id: p.image_id.clone(),
                detections: p
                    .detections
                    .iter()
                    .filter(|d| bea_core::metrics::u_pred(d.confidence) <= u.delta_opt)
                    .cloned()
                    .collect(),
            })
            .collect();
        mean_ap(&kept, gts, k, &[0.5]).ap50
    });
    let retention = retention_curve(&evaluated, gts, k, &cfg.retention_fractions);

    let near = ood_scores(inputs.test, inputs.near_ood);
    let far = ood_scores(inputs.test, inputs.far_ood);
    let row = MetricsRow {
        config_id: inputs.config_id.to_string(),
        seed: inputs.seed,
        map_raw: raw.map,
        ap50_raw: raw.ap50,
        ap50_upred,
        ue: uncertainty.map(|u| u.ue),
        delta_opt: uncertainty.map(|u| u.delta_opt),
        retention_auc: retention.auc,
        auroc_near: roc_auc(&near).ok(),
        auroc_far: roc_auc(&far).ok(),
    };
    Ok(Evaluation {
        row,
        uncertainty,
        retention,
        roc_near: roc_curve(&near).unwrap_or_default(),
        roc_far: roc_curve(&far).unwrap_or_default(),
    })
}
