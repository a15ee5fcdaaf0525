//! Convolution layers with hand-written backward passes.
//!
//! Activations are stored channel-major as `[C, N, H, W]` so that the
//! im2col product `W · cols` lands directly in the next layer's layout.

use ndarray::{Array1, Array2, Array4, ArrayView4, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub const LEAKY_SLOPE: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conv2d {
    /// `[out, in * k * k]`, input index `(c * k + ki) * k + kj`.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrad {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl ConvGrad {
    pub fn zeros_like(layer: &Conv2d) -> Self {
        Self {
            weight: Array2::zeros(layer.weight.raw_dim()),
            bias: Array1::zeros(layer.bias.len()),
        }
    }
}

/// What the backward pass needs from the forward pass.
#[derive(Debug, Clone)]
pub struct ConvCache {
    cols: Array2<f64>,
    input_dim: (usize, usize, usize, usize),
}

impl Conv2d {
    /// He-normal weights, zero bias.
    pub fn new<R: Rng>(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        Self::with_std(
            in_ch,
            out_ch,
            kernel,
            stride,
            (2.0 / fan_in as f64).sqrt(),
            rng,
        )
    }

    pub fn with_std<R: Rng>(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        std: f64,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        let normal = Normal::new(0.0, std).expect("finite std");
        Self {
            weight: Array2::from_shape_fn((out_ch, fan_in), |_| normal.sample(rng)),
            bias: Array1::zeros(out_ch),
            in_ch,
            out_ch,
            kernel,
            stride,
            pad: kernel / 2,
        }
    }

    pub fn num_params(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn output_size(&self, h: usize) -> usize {
        (h + 2 * self.pad - self.kernel) / self.stride + 1
    }

    fn im2col(&self, x: ArrayView4<f64>) -> Array2<f64> {
        let (c, n, h, w) = x.dim();
        let (ho, wo) = (self.output_size(h), self.output_size(w));
        let k = self.kernel;
        let mut cols = Array2::zeros((c * k * k, n * ho * wo));
        for ci in 0..c {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (ci * k + ki) * k + kj;
                    let mut dst = cols.row_mut(row);
                    let dst = dst.as_slice_mut().expect("standard layout");
                    for ni in 0..n {
                        for oh in 0..ho {
                            let ih = (oh * self.stride + ki) as isize - self.pad as isize;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            let base = (ni * ho + oh) * wo;
                            for ow in 0..wo {
                                let iw = (ow * self.stride + kj) as isize - self.pad as isize;
                                if iw >= 0 && iw < w as isize {
                                    dst[base + ow] = x[[ci, ni, ih as usize, iw as usize]];
                                }
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &Array2<f64>, dim: (usize, usize, usize, usize)) -> Array4<f64> {
        let (c, n, h, w) = dim;
        let (ho, wo) = (self.output_size(h), self.output_size(w));
        let k = self.kernel;
        let mut x = Array4::zeros(dim);
        for ci in 0..c {
            for ki in 0..k {
                for kj in 0..k {
                    let src = cols.row((ci * k + ki) * k + kj);
                    for ni in 0..n {
                        for oh in 0..ho {
                            let ih = (oh * self.stride + ki) as isize - self.pad as isize;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            let base = (ni * ho + oh) * wo;
                            for ow in 0..wo {
                                let iw = (ow * self.stride + kj) as isize - self.pad as isize;
                                if iw >= 0 && iw < w as isize {
                                    x[[ci, ni, ih as usize, iw as usize]] += src[base + ow];
                                }
                            }
                        }
                    }
                }
            }
        }
        x
    }

    /// `x: [in, N, H, W]` to `[out, N, H', W']`.
    pub fn forward(&self, x: ArrayView4<f64>) -> (Array4<f64>, ConvCache) {
        let (_, n, h, w) = x.dim();
        let (ho, wo) = (self.output_size(h), self.output_size(w));
        let cols = self.im2col(x);
        let mut y = self.weight.dot(&cols);
        y += &self.bias.view().insert_axis(Axis(1));
        let y = y
            .into_shape_with_order((self.out_ch, n, ho, wo))
            .expect("output shape");
        (
            y,
            ConvCache {
                cols,
                input_dim: x.dim(),
            },
        )
    }

    /// Returns the input gradient and accumulates parameter gradients.
    pub fn backward(
        &self,
        cache: &ConvCache,
        grad_out: &Array4<f64>,
        grad: &mut ConvGrad,
    ) -> Array4<f64> {
        let g = grad_out
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((self.out_ch, cache.cols.ncols()))
            .expect("grad shape");
        grad.weight += &g.dot(&cache.cols.t());
        grad.bias += &g.sum_axis(Axis(1));
        let dcols = self.weight.t().dot(&g);
        self.col2im(&dcols, cache.input_dim)
    }
}

pub fn leaky_relu(x: &Array4<f64>) -> Array4<f64> {
    x.mapv(|v| if v > 0.0 { v } else { LEAKY_SLOPE * v })
}

pub fn leaky_relu_backward(pre: &Array4<f64>, grad: &Array4<f64>) -> Array4<f64> {
    let mut out = grad.clone();
    ndarray::Zip::from(&mut out).and(pre).for_each(|g, &p| {
        if p <= 0.0 {
            *g *= LEAKY_SLOPE;
        }
    });
    out
}

/// `[C, N, S, S]` to `(N * S * S) × C`, rows ordered image, row, column.
pub fn to_rows(x: &Array4<f64>) -> Array2<f64> {
    let (c, n, h, w) = x.dim();
    x.view()
        .permuted_axes([1, 2, 3, 0])
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((n * h * w, c))
        .expect("row layout")
}

pub fn from_rows(rows: &Array2<f64>, dim: (usize, usize, usize, usize)) -> Array4<f64> {
    let (c, n, h, w) = dim;
    rows.clone()
        .into_shape_with_order((n, h, w, c))
        .expect("row layout")
        .permuted_axes([3, 0, 1, 2])
        .as_standard_layout()
        .into_owned()
}
