//! YOLO-style conventional loss on decoded predictions.

use ndarray::{Array2, ArrayView2, ArrayView4};
use serde::{Deserialize, Serialize};

use crate::error::{BeaError, Result};
use crate::geometry::{channel, GroundTruth, ResponsibilityMask};

/// Probability clamp for cross-entropy terms.
pub const BCE_CLAMP: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConvLossConfig {
    /// Multiplier on the squared box error of responsible anchors.
    pub box_weight: f64,
    /// Multiplier on the confidence cross-entropy of non-responsible anchors.
    pub noobj_weight: f64,
}

impl Default for ConvLossConfig {
    fn default() -> Self {
        Self {
            box_weight: 5.0,
            noobj_weight: 1.0,
        }
    }
}

pub fn bce(p: f64, target: f64) -> f64 {
    let q = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
    -target * q.ln() - (1.0 - target) * (1.0 - q).ln()
}

/// d bce / dp; zero where the clamp is active.
pub fn bce_grad(p: f64, target: f64) -> f64 {
    if p <= BCE_CLAMP || p >= 1.0 - BCE_CLAMP {
        return 0.0;
    }
    (p - target) / (p * (1.0 - p))
}

/// Loss for one decoded grid, summed over anchors.
///
/// Responsible anchors pay squared error on `(x, y, w, h)`, cross-entropy on
/// confidence toward 1 and per-class cross-entropy toward the one-hot label.
/// Other anchors pay cross-entropy on confidence toward 0.
pub fn conventional_loss(
    grid: ArrayView4<f64>,
    targets: &[Option<GroundTruth>],
    mask: &ResponsibilityMask,
    cfg: &ConvLossConfig,
) -> Result<f64> {
    let flat = flat_view(&grid)?;
    conv_impl(flat, targets, mask, cfg, None)
}

/// Loss and gradient for a grid flattened to `anchors × channels`.
pub fn conventional_loss_grad_flat(
    flat: ArrayView2<f64>,
    targets: &[Option<GroundTruth>],
    mask: &ResponsibilityMask,
    cfg: &ConvLossConfig,
) -> Result<(f64, Array2<f64>)> {
    let mut g = Array2::zeros(flat.raw_dim());
    let v = conv_impl(flat, targets, mask, cfg, Some(&mut g))?;
    Ok((v, g))
}

fn flat_view<'a>(grid: &'a ArrayView4<f64>) -> Result<ArrayView2<'a, f64>> {
    let (s0, s1, b, c) = grid.dim();
    grid.view()
        .into_shape_with_order((s0 * s1 * b, c))
        .map_err(|_| BeaError::InvalidArgument("grid must be in standard layout".into()))
}

fn conv_impl(
    flat: ArrayView2<f64>,
    targets: &[Option<GroundTruth>],
    mask: &ResponsibilityMask,
    cfg: &ConvLossConfig,
    mut grad: Option<&mut Array2<f64>>,
) -> Result<f64> {
    let n = flat.nrows();
    if targets.len() != n || mask.len() != n {
        return Err(BeaError::shape(
            format!("{n} anchors"),
            format!("{} targets, mask of {}", targets.len(), mask.len()),
        ));
    }
    let k = flat.ncols() - channel::CLASS0;
    let mut total = 0.0;
    for i in 0..n {
        let row = flat.row(i);
        if mask.obj[i] {
            let gt = targets[i].ok_or_else(|| {
                BeaError::InvalidArgument(format!("responsible anchor {i} has no target"))
            })?;
            let t = [gt.bbox.cx, gt.bbox.cy, gt.bbox.w, gt.bbox.h];
            for (c, &tv) in [channel::CX, channel::CY, channel::W, channel::H]
                .iter()
                .zip(&t)
            {
                let d = row[*c] - tv;
                total += cfg.box_weight * d * d;
                if let Some(g) = grad.as_mut() {
                    g[[i, *c]] += 2.0 * cfg.box_weight * d;
                }
            }
            total += bce(row[channel::CONF], 1.0);
            if let Some(g) = grad.as_mut() {
                g[[i, channel::CONF]] += bce_grad(row[channel::CONF], 1.0);
            }
            for j in 0..k {
                let c = channel::CLASS0 + j;
                let target = if j == gt.class_id { 1.0 } else { 0.0 };
                total += bce(row[c], target);
                if let Some(g) = grad.as_mut() {
                    g[[i, c]] += bce_grad(row[c], target);
                }
            }
        } else if mask.noobj[i] {
            total += cfg.noobj_weight * bce(row[channel::CONF], 0.0);
            if let Some(g) = grad.as_mut() {
                g[[i, channel::CONF]] += cfg.noobj_weight * bce_grad(row[channel::CONF], 0.0);
            }
        }
    }
    Ok(total)
}
