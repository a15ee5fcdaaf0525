//! Tandem losses between the α and β detector heads.
//!
//! Both losses operate on decoded predictions (post-activation), one channel
//! at a time. The quelling term acts on anchors that are not responsible for
//! any object and pushes the heads apart; the aiding term acts on responsible
//! anchors and pulls them together.

use ndarray::{Array2, Array4, ArrayView2, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{BeaError, Result};
use crate::geometry::{channel, ResponsibilityMask};

/// How per-anchor terms are combined within a channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    /// Mean over the masked anchors.
    #[default]
    Mean,
    /// Plain sum over the masked anchors.
    Sum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub w_conv: f64,
    pub w_tandem: f64,
    pub w_diversity: f64,
    pub enable_ta: bool,
    pub enable_tq: bool,
    /// Added to the squared difference under the square root of the quelling
    /// term so it stays bounded when the heads agree exactly.
    pub eps_tq: f64,
    pub reduction: Reduction,
    /// Also apply the tandem terms to the per-class probability channels.
    pub include_class_channels: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_conv: 1.0,
            w_tandem: 1.0,
            w_diversity: 0.0,
            enable_ta: true,
            enable_tq: true,
            eps_tq: 1e-3,
            reduction: Reduction::Mean,
            include_class_channels: false,
        }
    }
}

/// Decoded α/β prediction grids for one image, each `S×S×B×(5+K)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TandemOutput {
    pub alpha: Array4<f64>,
    pub beta: Array4<f64>,
}

impl TandemOutput {
    pub fn new(alpha: Array4<f64>, beta: Array4<f64>) -> Result<Self> {
        if alpha.shape() != beta.shape() {
            return Err(BeaError::shape(
                format!("{:?}", alpha.shape()),
                format!("{:?}", beta.shape()),
            ));
        }
        Ok(Self {
            alpha: alpha.as_standard_layout().into_owned(),
            beta: beta.as_standard_layout().into_owned(),
        })
    }

    pub fn channels(&self) -> usize {
        self.alpha.shape()[3]
    }

    /// Both grids flattened to `anchors × channels`.
    pub fn flat(&self) -> (ArrayView2<'_, f64>, ArrayView2<'_, f64>) {
        (flatten(&self.alpha), flatten(&self.beta))
    }
}

pub(crate) fn flatten(grid: &Array4<f64>) -> ArrayView2<'_, f64> {
    let c = grid.shape()[3];
    let n = grid.len() / c.max(1);
    grid.view()
        .into_shape_with_order((n, c))
        .expect("standard-layout grid")
}

/// Per-anchor quelling term.
pub fn tq_term(diff: f64, eps: f64) -> f64 {
    2.0 / (diff * diff + eps).sqrt()
}

fn tq_term_grad(diff: f64, eps: f64) -> f64 {
    let d2 = diff * diff + eps;
    -2.0 * diff / (d2 * d2.sqrt())
}

/// Per-anchor aiding term.
pub fn ta_term(diff: f64) -> f64 {
    (diff * diff).sqrt() / 2.0
}

fn ta_term_grad(diff: f64) -> f64 {
    if diff > 0.0 {
        0.5
    } else if diff < 0.0 {
        -0.5
    } else {
        0.0
    }
}

fn reduce(sum: f64, count: usize, reduction: Reduction) -> f64 {
    match reduction {
        _ if count == 0 => 0.0,
        Reduction::Mean => sum / count as f64,
        Reduction::Sum => sum,
    }
}

fn reduction_scale(count: usize, reduction: Reduction) -> f64 {
    match reduction {
        _ if count == 0 => 0.0,
        Reduction::Mean => 1.0 / count as f64,
        Reduction::Sum => 1.0,
    }
}

/// Mean quelling term over the non-responsible anchors of one channel.
pub fn channel_tq(
    alpha: ArrayView3<f64>,
    beta: ArrayView3<f64>,
    mask: &ResponsibilityMask,
    eps: f64,
) -> f64 {
    let (sum, n) = alpha
        .iter()
        .zip(beta.iter())
        .zip(&mask.noobj)
        .filter(|(_, &m)| m)
        .fold((0.0, 0usize), |(s, n), ((a, b), _)| {
            (s + tq_term(a - b, eps), n + 1)
        });
    reduce(sum, n, Reduction::Mean)
}

/// Mean aiding term over the responsible anchors of one channel.
pub fn channel_ta(alpha: ArrayView3<f64>, beta: ArrayView3<f64>, mask: &ResponsibilityMask) -> f64 {
    let (sum, n) = alpha
        .iter()
        .zip(beta.iter())
        .zip(&mask.obj)
        .filter(|(_, &m)| m)
        .fold((0.0, 0usize), |(s, n), ((a, b), _)| {
            (s + ta_term(a - b), n + 1)
        });
    reduce(sum, n, Reduction::Mean)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChannelTerms {
    pub channel: usize,
    pub ta: f64,
    pub tq: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TandemLoss {
    /// Sum of the enabled terms.
    pub total: f64,
    /// Aiding term summed over channels, regardless of the switch.
    pub ta: f64,
    /// Quelling term summed over channels, regardless of the switch.
    pub tq: f64,
    pub channels: Vec<ChannelTerms>,
}

/// Channels that carry tandem terms for a grid with `channels` entries.
pub fn tandem_channels(channels: usize, weights: &LossWeights) -> Vec<usize> {
    let mut out = channel::TANDEM.to_vec();
    if weights.include_class_channels {
        out.extend(channel::CLASS0..channels);
    }
    out
}

pub fn tandem_loss(
    out: &TandemOutput,
    mask: &ResponsibilityMask,
    weights: &LossWeights,
) -> Result<TandemLoss> {
    let (a, b) = out.flat();
    tandem_loss_flat(a, b, mask, weights)
}

/// Tandem loss over grids flattened to `anchors × channels`. A batch is just a
/// taller matrix with the masks concatenated.
pub fn tandem_loss_flat(
    alpha: ArrayView2<f64>,
    beta: ArrayView2<f64>,
    mask: &ResponsibilityMask,
    weights: &LossWeights,
) -> Result<TandemLoss> {
    tandem_impl(alpha, beta, mask, weights, None)
}

/// Tandem loss and its gradient with respect to both flattened grids. Terms
/// whose switch is off contribute nothing to the gradient.
pub fn tandem_loss_grad_flat(
    alpha: ArrayView2<f64>,
    beta: ArrayView2<f64>,
    mask: &ResponsibilityMask,
    weights: &LossWeights,
) -> Result<(TandemLoss, Array2<f64>, Array2<f64>)> {
    let mut ga = Array2::zeros(alpha.raw_dim());
    let mut gb = Array2::zeros(beta.raw_dim());
    let loss = tandem_impl(alpha, beta, mask, weights, Some((&mut ga, &mut gb)))?;
    Ok((loss, ga, gb))
}

fn tandem_impl(
    alpha: ArrayView2<f64>,
    beta: ArrayView2<f64>,
    mask: &ResponsibilityMask,
    weights: &LossWeights,
    mut grads: Option<(&mut Array2<f64>, &mut Array2<f64>)>,
) -> Result<TandemLoss> {
    if alpha.shape() != beta.shape() {
        return Err(BeaError::shape(
            format!("{:?}", alpha.shape()),
            format!("{:?}", beta.shape()),
        ));
    }
    if mask.len() != alpha.nrows() {
        return Err(BeaError::shape(
            format!("mask of {} anchors", alpha.nrows()),
            mask.len(),
        ));
    }
    let n_obj = mask.num_obj();
    let n_noobj = mask.num_noobj();
    let ta_scale = reduction_scale(n_obj, weights.reduction);
    let tq_scale = reduction_scale(n_noobj, weights.reduction);

    let mut channels = Vec::new();
    for c in tandem_channels(alpha.ncols(), weights) {
        let (mut ta, mut tq) = (0.0, 0.0);
        for i in 0..alpha.nrows() {
            let d = alpha[[i, c]] - beta[[i, c]];
            if mask.obj[i] {
                ta += ta_term(d);
                if weights.enable_ta {
                    if let Some((ga, gb)) = grads.as_mut() {
                        let g = ta_scale * ta_term_grad(d);
                        ga[[i, c]] += g;
                        gb[[i, c]] -= g;
                    }
                }
            } else if mask.noobj[i] {
                tq += tq_term(d, weights.eps_tq);
                if weights.enable_tq {
                    if let Some((ga, gb)) = grads.as_mut() {
                        let g = tq_scale * tq_term_grad(d, weights.eps_tq);
                        ga[[i, c]] += g;
                        gb[[i, c]] -= g;
                    }
                }
            }
        }
        channels.push(ChannelTerms {
            channel: c,
            ta: reduce(ta, n_obj, weights.reduction),
            tq: reduce(tq, n_noobj, weights.reduction),
        });
    }
    let ta: f64 = channels.iter().map(|c| c.ta).sum();
    let tq: f64 = channels.iter().map(|c| c.tq).sum();
    let total = if weights.enable_ta { ta } else { 0.0 } + if weights.enable_tq { tq } else { 0.0 };
    Ok(TandemLoss {
        total,
        ta,
        tq,
        channels,
    })
}

/// Weighted composition of conventional, tandem and diversity losses.
pub fn bea_loss(conv: f64, tandem: f64, div: f64, weights: &LossWeights) -> f64 {
    weights.w_conv * conv + weights.w_tandem * tandem + weights.w_diversity * div
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TandemMonitor {
    /// Aiding term on the confidence channel only.
    pub ta_conf: f64,
    /// Quelling term on the confidence channel only.
    pub tq_conf: f64,
    /// Mean squared difference between the full α and β grids.
    pub mse_alpha_beta: f64,
}

pub fn tandem_monitor(
    out: &TandemOutput,
    mask: &ResponsibilityMask,
    eps: f64,
) -> Result<TandemMonitor> {
    let (a, b) = out.flat();
    tandem_monitor_flat(a, b, mask, eps)
}

pub fn tandem_monitor_flat(
    alpha: ArrayView2<f64>,
    beta: ArrayView2<f64>,
    mask: &ResponsibilityMask,
    eps: f64,
) -> Result<TandemMonitor> {
    if alpha.shape() != beta.shape() || mask.len() != alpha.nrows() {
        return Err(BeaError::shape(
            format!("{:?}", alpha.shape()),
            format!("{:?} with mask {}", beta.shape(), mask.len()),
        ));
    }
    let conf_a = alpha.index_axis(Axis(1), channel::CONF);
    let conf_b = beta.index_axis(Axis(1), channel::CONF);
    let (mut ta, mut tq) = (0.0, 0.0);
    for i in 0..alpha.nrows() {
        let d = conf_a[i] - conf_b[i];
        if mask.obj[i] {
            ta += ta_term(d);
        } else if mask.noobj[i] {
            tq += tq_term(d, eps);
        }
    }
    let sq: f64 = alpha
        .iter()
        .zip(beta.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(TandemMonitor {
        ta_conf: reduce(ta, mask.num_obj(), Reduction::Mean),
        tq_conf: reduce(tq, mask.num_noobj(), Reduction::Mean),
        mse_alpha_beta: if alpha.is_empty() {
            0.0
        } else {
            sq / alpha.len() as f64
        },
    })
}
