use serde::{Deserialize, Serialize};

use crate::error::{BeaError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OodLabel {
    InDist,
    Ood,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OodScore {
    pub image_id: String,
    pub u_ood: f64,
    pub label: OodLabel,
}

fn split(scores: &[OodScore]) -> Result<(Vec<f64>, Vec<f64>)> {
    let (mut inl, mut ood) = (Vec::new(), Vec::new());
    for s in scores {
        match s.label {
            OodLabel::InDist => inl.push(s.u_ood),
            OodLabel::Ood => ood.push(s.u_ood),
        }
    }
    if inl.is_empty() || ood.is_empty() {
        return Err(BeaError::Undefined(
            "ROC AUC needs both in-distribution and OOD scores".into(),
        ));
    }
    inl.sort_by(f64::total_cmp);
    ood.sort_by(f64::total_cmp);
    Ok((inl, ood))
}

/// Area under the ROC curve with OOD as the positive class, computed as the
/// Mann-Whitney statistic `P(ood > in) + P(tie) / 2`.
pub fn roc_auc(scores: &[OodScore]) -> Result<f64> {
    let (inl, ood) = split(scores)?;
    // doubled counts keep the tie half exact
    let mut twice: u128 = 0;
    for &u in &ood {
        let below = inl.partition_point(|&v| v < u);
        let not_above = inl.partition_point(|&v| v <= u);
        twice += 2 * below as u128 + (not_above - below) as u128;
    }
    Ok(twice as f64 / (2 * inl.len() as u128 * ood.len() as u128) as f64)
}

/// ROC points `(fpr, tpr)` from the strictest threshold to the loosest.
pub fn roc_curve(scores: &[OodScore]) -> Result<Vec<(f64, f64)>> {
    let (inl, ood) = split(scores)?;
    let mut thresholds: Vec<f64> = inl.iter().chain(&ood).copied().collect();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let mut pts = vec![(0.0, 0.0)];
    for t in thresholds {
        let fp = inl.len() - inl.partition_point(|&v| v < t);
        let tp = ood.len() - ood.partition_point(|&v| v < t);
        pts.push((fp as f64 / inl.len() as f64, tp as f64 / ood.len() as f64));
    }
    Ok(pts)
}
