//! Box algebra, grid decoding, anchor responsibility assignment and NMS.
//!
//! All coordinates are fractions of the image size. Pixel coordinates only
//! appear at I/O boundaries through [`BBox::from_pixel_corners`] and
//! [`BBox::to_pixel_corners`].

use ndarray::{Array4, ArrayView4};
use serde::{Deserialize, Serialize};

use crate::error::{BeaError, Result};

/// Smallest width/height a decoded box may take.
pub const MIN_EXTENT: f64 = 1e-9;

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Axis-aligned box in center form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    pub fn from_corners(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self {
            cx: 0.5 * (x0 + x1),
            cy: 0.5 * (y0 + y1),
            w: x1 - x0,
            h: y1 - y0,
        }
    }

    /// `(x0, y0, x1, y1)`.
    pub fn corners(&self) -> (f64, f64, f64, f64) {
        let hw = 0.5 * self.w;
        let hh = 0.5 * self.h;
        (self.cx - hw, self.cy - hh, self.cx + hw, self.cy + hh)
    }

    pub fn from_pixel_corners(x0: f64, y0: f64, x1: f64, y1: f64, image_size: f64) -> Self {
        Self::from_corners(
            x0 / image_size,
            y0 / image_size,
            x1 / image_size,
            y1 / image_size,
        )
    }

    pub fn to_pixel_corners(&self, image_size: f64) -> (f64, f64, f64, f64) {
        let (x0, y0, x1, y1) = self.corners();
        (
            x0 * image_size,
            y0 * image_size,
            x1 * image_size,
            y1 * image_size,
        )
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn is_valid(&self) -> bool {
        (0.0..=1.0).contains(&self.cx)
            && (0.0..=1.0).contains(&self.cy)
            && self.w > 0.0
            && self.h > 0.0
            && self.w.is_finite()
            && self.h.is_finite()
    }
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let (ax0, ay0, ax1, ay1) = a.corners();
    let (bx0, by0, bx1, by1) = b.corners();
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// IoU of two box shapes with their centers aligned.
pub fn shape_iou(w0: f64, h0: f64, w1: f64, h1: f64) -> f64 {
    let inter = w0.min(w1) * h0.min(h1);
    inter / (w0 * h0 + w1 * h1 - inter)
}

/// Mean of two boxes in center form.
pub fn average_boxes(a: &BBox, b: &BBox) -> BBox {
    BBox {
        cx: 0.5 * (a.cx + b.cx),
        cy: 0.5 * (a.cy + b.cy),
        w: 0.5 * (a.w + b.w),
        h: 0.5 * (a.h + b.h),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    /// Cells per side.
    pub s: usize,
    /// Anchor priors `(w, h)` per cell, as image fractions.
    pub anchors: Vec<(f64, f64)>,
    /// Number of classes.
    pub k: usize,
}

impl GridSpec {
    pub fn new(s: usize, anchors: Vec<(f64, f64)>, k: usize) -> Result<Self> {
        let g = Self { s, anchors, k };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.s == 0 {
            return Err(BeaError::InvalidArgument("grid size must be >= 1".into()));
        }
        if self.anchors.is_empty() {
            return Err(BeaError::InvalidArgument("need at least one anchor".into()));
        }
        if self.anchors.iter().any(|&(w, h)| !(w > 0.0 && h > 0.0)) {
            return Err(BeaError::InvalidArgument(
                "anchor priors must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn b(&self) -> usize {
        self.anchors.len()
    }

    /// Channels per anchor: box (4) + confidence (1) + classes.
    pub fn channels(&self) -> usize {
        5 + self.k
    }

    pub fn num_anchors(&self) -> usize {
        self.s * self.s * self.b()
    }

    pub fn flat_index(&self, row: usize, col: usize, anchor: usize) -> usize {
        (row * self.s + col) * self.b() + anchor
    }

    pub fn grid_shape(&self) -> (usize, usize, usize, usize) {
        (self.s, self.s, self.b(), self.channels())
    }

    pub(crate) fn check_grid(&self, dim: &[usize]) -> Result<()> {
        let (s, _, b, c) = self.grid_shape();
        if dim != [s, s, b, c] {
            return Err(BeaError::shape(
                format!("{:?}", [s, s, b, c]),
                format!("{:?}", dim),
            ));
        }
        Ok(())
    }
}

/// Channel layout of a decoded prediction grid.
pub mod channel {
    pub const CX: usize = 0;
    pub const CY: usize = 1;
    pub const W: usize = 2;
    pub const H: usize = 3;
    pub const CONF: usize = 4;
    pub const CLASS0: usize = 5;
    /// The channels the tandem losses and box disagreement operate on.
    pub const TANDEM: [usize; 5] = [CX, CY, W, H, CONF];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub confidence: f64,
    pub class_probs: Vec<f64>,
    pub class_id: usize,
}

impl Detection {
    pub fn new(bbox: BBox, confidence: f64, class_probs: Vec<f64>) -> Self {
        let class_id = argmax(&class_probs);
        Self {
            bbox,
            confidence,
            class_probs,
            class_id,
        }
    }

    /// Ranking score.
    pub fn score(&self) -> f64 {
        self.confidence
    }
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Applies the output activations to a raw `S×S×B×(5+K)` grid.
///
/// Box centers become image fractions, sizes are anchor-scaled exponentials
/// clipped to `(0, 1]`, and confidence/class channels go through a sigmoid.
pub fn activate_grid(raw: ArrayView4<f64>, grid: &GridSpec) -> Result<Array4<f64>> {
    grid.check_grid(raw.shape())?;
    let s = grid.s as f64;
    let mut out = Array4::zeros(raw.raw_dim());
    for row in 0..grid.s {
        for col in 0..grid.s {
            for (a, &(aw, ah)) in grid.anchors.iter().enumerate() {
                let r = raw.slice(ndarray::s![row, col, a, ..]);
                let mut o = out.slice_mut(ndarray::s![row, col, a, ..]);
                o[channel::CX] = (sigmoid(r[channel::CX]) + col as f64) / s;
                o[channel::CY] = (sigmoid(r[channel::CY]) + row as f64) / s;
                o[channel::W] = clip_extent(aw * r[channel::W].exp());
                o[channel::H] = clip_extent(ah * r[channel::H].exp());
                for c in channel::CONF..grid.channels() {
                    o[c] = sigmoid(r[c]);
                }
            }
        }
    }
    Ok(out)
}

fn clip_extent(v: f64) -> f64 {
    if v.is_nan() {
        return MIN_EXTENT;
    }
    v.clamp(MIN_EXTENT, 1.0)
}

/// Back-propagates a gradient on the activated grid to the raw grid.
pub fn activate_grid_backward(
    raw: ArrayView4<f64>,
    activated: ArrayView4<f64>,
    grad_activated: ArrayView4<f64>,
    grid: &GridSpec,
) -> Array4<f64> {
    let s = grid.s as f64;
    let mut g = Array4::zeros(raw.raw_dim());
    ndarray::Zip::from(g.lanes_mut(ndarray::Axis(3)))
        .and(raw.lanes(ndarray::Axis(3)))
        .and(activated.lanes(ndarray::Axis(3)))
        .and(grad_activated.lanes(ndarray::Axis(3)))
        .for_each(|mut g, r, o, go| {
            for c in [channel::CX, channel::CY] {
                let p = sigmoid(r[c]);
                g[c] = go[c] * p * (1.0 - p) / s;
            }
            for c in [channel::W, channel::H] {
                // d(anchor * exp(t))/dt is the value itself, zero once clipped
                let v = o[c];
                g[c] = if v > MIN_EXTENT && v < 1.0 {
                    go[c] * v
                } else {
                    0.0
                };
            }
            for c in channel::CONF..r.len() {
                let p = o[c];
                g[c] = go[c] * p * (1.0 - p);
            }
        });
    g
}

/// Converts an activated grid into one detection per anchor, in
/// `(row, col, anchor)` order.
pub fn grid_detections(activated: ArrayView4<f64>, grid: &GridSpec) -> Vec<Detection> {
    let mut dets = Vec::with_capacity(grid.num_anchors());
    for row in 0..grid.s {
        for col in 0..grid.s {
            for a in 0..grid.b() {
                let o = activated.slice(ndarray::s![row, col, a, ..]);
                dets.push(Detection::new(
                    BBox::new(o[channel::CX], o[channel::CY], o[channel::W], o[channel::H]),
                    o[channel::CONF],
                    o.slice(ndarray::s![channel::CLASS0..]).to_vec(),
                ));
            }
        }
    }
    dets
}

/// Decodes raw head activations into one detection per anchor.
pub fn decode_grid(raw: ArrayView4<f64>, grid: &GridSpec) -> Result<Vec<Detection>> {
    let activated = activate_grid(raw, grid)?;
    Ok(grid_detections(activated.view(), grid))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub bbox: BBox,
    pub class_id: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResponsibilityMask {
    pub obj: Vec<bool>,
    pub noobj: Vec<bool>,
}

impl ResponsibilityMask {
    pub fn all_noobj(n: usize) -> Self {
        Self {
            obj: vec![false; n],
            noobj: vec![true; n],
        }
    }

    pub fn len(&self) -> usize {
        self.obj.len()
    }

    pub fn is_empty(&self) -> bool {
        self.obj.is_empty()
    }

    pub fn num_obj(&self) -> usize {
        self.obj.iter().filter(|&&o| o).count()
    }

    pub fn num_noobj(&self) -> usize {
        self.noobj.iter().filter(|&&o| o).count()
    }
}

#[derive(Debug, Clone)]
pub struct Assignment {
    pub mask: ResponsibilityMask,
    /// Regression/classification target for each responsible anchor, indexed
    /// by [`GridSpec::flat_index`].
    pub targets: Vec<Option<GroundTruth>>,
    /// Ground truths that found no free anchor in their cell.
    pub dropped: usize,
}

/// Assigns each ground truth to the cell holding its center and the free
/// anchor prior in that cell with the best shape IoU.
pub fn assign_responsibility(gts: &[GroundTruth], grid: &GridSpec) -> Assignment {
    let n = grid.num_anchors();
    let mut targets: Vec<Option<GroundTruth>> = vec![None; n];
    let mut dropped = 0;
    let cell = |v: f64| ((v * grid.s as f64).floor().max(0.0) as usize).min(grid.s - 1);

    for gt in gts {
        let (row, col) = (cell(gt.bbox.cy), cell(gt.bbox.cx));
        let mut ranked: Vec<(usize, f64)> = grid
            .anchors
            .iter()
            .enumerate()
            .map(|(a, &(aw, ah))| (a, shape_iou(gt.bbox.w, gt.bbox.h, aw, ah)))
            .collect();
        // stable: equal IoU keeps the lower anchor index first
        ranked.sort_by(|x, y| y.1.total_cmp(&x.1));
        match ranked
            .iter()
            .map(|&(a, _)| grid.flat_index(row, col, a))
            .find(|&idx| targets[idx].is_none())
        {
            Some(idx) => targets[idx] = Some(*gt),
            None => dropped += 1,
        }
    }

    let obj: Vec<bool> = targets.iter().map(Option::is_some).collect();
    let noobj = obj.iter().map(|o| !o).collect();
    Assignment {
        mask: ResponsibilityMask { obj, noobj },
        targets,
        dropped,
    }
}

/// Greedy per-class non-maximum suppression. Survivors are returned in
/// descending score order.
pub fn nms(dets: &[Detection], iou_thresh: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score().total_cmp(&dets[a].score()));
    let mut kept: Vec<usize> = Vec::new();
    for &i in &order {
        let suppressed = kept.iter().any(|&k| {
            dets[k].class_id == dets[i].class_id && iou(&dets[k].bbox, &dets[i].bbox) > iou_thresh
        });
        if !suppressed {
            kept.push(i);
        }
    }
    kept.into_iter().map(|i| dets[i].clone()).collect()
}
