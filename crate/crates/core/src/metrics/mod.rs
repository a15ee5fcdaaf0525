//! Detection accuracy, uncertainty error, retention curves and OOD scoring.

mod ap;
mod matching;
mod retention;
mod roc;
mod uncertainty;

pub use ap::{average_precision, mean_ap, MeanAp, COCO_THRESHOLDS};
pub use matching::{
    detection_order, match_detections, match_image, EvaluatedDetection, ImageGroundTruth,
    ImagePredictions,
};
pub use retention::{default_fractions, retention_curve, RetentionCurve};
pub use roc::{roc_auc, roc_curve, OodLabel, OodScore};
pub use uncertainty::{
    binary_entropy, u_ood_image, u_ood_single, u_pred, uncertainty_error, UncertaintyError,
    ENTROPY_CLAMP,
};
