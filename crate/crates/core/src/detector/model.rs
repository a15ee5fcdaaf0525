//! Tiny single-scale detector: a strided conv backbone shared by one (base)
//! or two (α, β) detector heads.

use ndarray::{s, Array4, Array5, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::nn::{leaky_relu, leaky_relu_backward, Conv2d, ConvCache, ConvGrad};
use crate::error::{BeaError, Result};
use crate::geometry::{activate_grid, activate_grid_backward, channel, GridSpec};
use crate::tandem::TandemOutput;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub grid: GridSpec,
    pub image_size: usize,
    /// Output channels of each stride-2 backbone convolution.
    pub backbone_channels: Vec<usize>,
    pub head_channels: usize,
    /// Kernel of the first head layer; the output layer is always 1×1.
    pub head_kernel: usize,
    /// Two duplicated heads when true, a single base head otherwise.
    pub bea: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            grid: GridSpec {
                s: 8,
                anchors: vec![(0.2, 0.2), (0.35, 0.35)],
                k: 3,
            },
            image_size: 64,
            backbone_channels: vec![16, 32, 64],
            head_channels: 64,
            head_kernel: 3,
            bea: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        if self.backbone_channels.is_empty() || self.head_channels == 0 {
            return Err(BeaError::InvalidArgument("empty backbone or head".into()));
        }
        if self.head_kernel.is_multiple_of(2) {
            return Err(BeaError::InvalidArgument("head kernel must be odd".into()));
        }
        let stride = 1usize << self.backbone_channels.len();
        if self.image_size != self.grid.s * stride {
            return Err(BeaError::InvalidArgument(format!(
                "image size {} does not reduce to a {}×{} grid through {} stride-2 layers",
                self.image_size,
                self.grid.s,
                self.grid.s,
                self.backbone_channels.len()
            )));
        }
        Ok(())
    }

    pub fn num_heads(&self) -> usize {
        if self.bea {
            2
        } else {
            1
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    pub hidden: Conv2d,
    pub out: Conv2d,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detector {
    pub config: ModelConfig,
    pub backbone: Vec<Conv2d>,
    /// `heads[0]` is α, `heads[1]` (if present) is β.
    pub heads: Vec<Head>,
}

/// Initial bias of the confidence logits; most anchors hold no object.
const CONF_PRIOR_LOGIT: f64 = -3.0;

/// Decoded per-head predictions for a batch, each `N×S×S×B×(5+K)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictions {
    pub heads: Vec<Array5<f64>>,
}

impl Predictions {
    pub fn batch_size(&self) -> usize {
        self.heads[0].shape()[0]
    }

    /// Decoded grid of head `h` for image `n`.
    pub fn grid(&self, h: usize, n: usize) -> Array4<f64> {
        self.heads[h].index_axis(Axis(0), n).to_owned()
    }

    /// α/β pair for image `n`; errors on a single-head model.
    pub fn tandem(&self, n: usize) -> Result<TandemOutput> {
        if self.heads.len() != 2 {
            return Err(BeaError::InvalidArgument("model has a single head".into()));
        }
        TandemOutput::new(self.grid(0, n), self.grid(1, n))
    }
}

#[derive(Debug, Clone)]
pub(crate) struct HeadTrace {
    hidden_cache: ConvCache,
    hidden_pre: Array4<f64>,
    /// Post-activation hidden map `[head_channels, N, S, S]`.
    pub(crate) hidden: Array4<f64>,
    out_cache: ConvCache,
    raw: Array5<f64>,
}

#[derive(Debug, Clone)]
pub(crate) struct Trace {
    backbone: Vec<(ConvCache, Array4<f64>)>,
    pub(crate) heads: Vec<HeadTrace>,
    pub(crate) predictions: Predictions,
}

/// Per-layer parameter gradients, in [`Detector::layers`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub Vec<ConvGrad>);

impl Gradients {
    pub fn norm(&self) -> f64 {
        self.0
            .iter()
            .map(|g| {
                g.weight
                    .iter()
                    .chain(g.bias.iter())
                    .map(|v| v * v)
                    .sum::<f64>()
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, k: f64) {
        for g in &mut self.0 {
            g.weight *= k;
            g.bias *= k;
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        self.0
            .iter()
            .flat_map(|g| g.weight.iter().chain(g.bias.iter()).copied())
            .collect()
    }
}

impl Detector {
    /// Fresh model. Each layer draws from its own random stream, so the α
    /// head is initialized identically with and without a β head, and β
    /// never starts as a copy of α.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let stream = |i: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i);
            rng
        };
        let mut backbone = Vec::new();
        let mut in_ch = 1;
        for (i, &c) in config.backbone_channels.iter().enumerate() {
            backbone.push(Conv2d::new(in_ch, c, 3, 2, &mut stream(i as u64)));
            in_ch = c;
        }
        let out_ch = config.grid.b() * config.grid.channels();
        let heads = (0..config.num_heads())
            .map(|h| {
                let base = 100 + 10 * h as u64;
                let hidden = Conv2d::new(
                    in_ch,
                    config.head_channels,
                    config.head_kernel,
                    1,
                    &mut stream(base),
                );
                let mut out = Conv2d::with_std(
                    config.head_channels,
                    out_ch,
                    1,
                    1,
                    0.01,
                    &mut stream(base + 1),
                );
                for b in 0..config.grid.b() {
                    out.bias[b * config.grid.channels() + channel::CONF] = CONF_PRIOR_LOGIT;
                }
                Head { hidden, out }
            })
            .collect();
        Ok(Self {
            config,
            backbone,
            heads,
        })
    }

    pub fn grid(&self) -> &GridSpec {
        &self.config.grid
    }

    pub fn layers(&self) -> Vec<&Conv2d> {
        let mut v: Vec<&Conv2d> = self.backbone.iter().collect();
        for h in &self.heads {
            v.push(&h.hidden);
            v.push(&h.out);
        }
        v
    }

    pub fn layers_mut(&mut self) -> Vec<&mut Conv2d> {
        let mut v: Vec<&mut Conv2d> = self.backbone.iter_mut().collect();
        for h in &mut self.heads {
            v.push(&mut h.hidden);
            v.push(&mut h.out);
        }
        v
    }

    pub fn num_params(&self) -> usize {
        self.layers().iter().map(|l| l.num_params()).sum()
    }

    pub fn params(&self) -> Vec<f64> {
        self.layers()
            .iter()
            .flat_map(|l| l.weight.iter().chain(l.bias.iter()).copied())
            .collect()
    }

    pub fn set_params(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.num_params() {
            return Err(BeaError::shape(self.num_params(), values.len()));
        }
        let mut it = values.iter();
        for l in self.layers_mut() {
            for w in l.weight.iter_mut().chain(l.bias.iter_mut()) {
                *w = *it.next().expect("length checked");
            }
        }
        Ok(())
    }

    pub fn zero_grads(&self) -> Gradients {
        Gradients(
            self.layers()
                .iter()
                .map(|l| ConvGrad::zeros_like(l))
                .collect(),
        )
    }

    /// Stacks grayscale images into the `[1, N, H, W]` input layout.
    pub fn input(&self, images: &[ArrayView2<f64>]) -> Result<Array4<f64>> {
        let n = self.config.image_size;
        let mut x = Array4::zeros((1, images.len(), n, n));
        for (i, img) in images.iter().enumerate() {
            if img.dim() != (n, n) {
                return Err(BeaError::shape(
                    format!("{n}×{n} image"),
                    format!("{:?}", img.dim()),
                ));
            }
            x.slice_mut(s![0, i, .., ..]).assign(img);
        }
        Ok(x)
    }

    /// Decoded predictions of every head.
    pub fn forward(&self, images: &[ArrayView2<f64>]) -> Result<Predictions> {
        Ok(self.forward_trace(&self.input(images)?)?.predictions)
    }

    pub(crate) fn forward_trace(&self, input: &Array4<f64>) -> Result<Trace> {
        let mut x = input.clone();
        let mut backbone = Vec::with_capacity(self.backbone.len());
        for layer in &self.backbone {
            let (pre, cache) = layer.forward(x.view());
            x = leaky_relu(&pre);
            backbone.push((cache, pre));
        }
        let grid = &self.config.grid;
        let n = input.shape()[1];
        let (sz, b, c) = (grid.s, grid.b(), grid.channels());
        let mut heads = Vec::with_capacity(self.heads.len());
        let mut decoded = Vec::with_capacity(self.heads.len());
        for head in &self.heads {
            let (hidden_pre, hidden_cache) = head.hidden.forward(x.view());
            let hidden = leaky_relu(&hidden_pre);
            let (out, out_cache) = head.out.forward(hidden.view());
            // [B*C, N, S, S] -> [N, S, S, B, C]
            let raw = out
                .into_shape_with_order((b, c, n, sz, sz))
                .expect("head output shape")
                .permuted_axes([2, 3, 4, 0, 1])
                .as_standard_layout()
                .into_owned();
            let mut dec = Array5::zeros(raw.raw_dim());
            for i in 0..n {
                dec.index_axis_mut(Axis(0), i)
                    .assign(&activate_grid(raw.index_axis(Axis(0), i), grid)?);
            }
            decoded.push(dec);
            heads.push(HeadTrace {
                hidden_cache,
                hidden_pre,
                hidden,
                out_cache,
                raw,
            });
        }
        Ok(Trace {
            backbone,
            heads,
            predictions: Predictions { heads: decoded },
        })
    }

    /// Back-propagates gradients on the decoded outputs (and optionally on
    /// each head's hidden map) to every parameter.
    pub(crate) fn backward(
        &self,
        trace: &Trace,
        grad_decoded: &[Array5<f64>],
        grad_hidden: &[Option<Array4<f64>>],
    ) -> Gradients {
        let grid = &self.config.grid;
        let mut grads = self.zero_grads();
        let nb = self.backbone.len();
        let mut grad_features: Option<Array4<f64>> = None;
        for (h, (head, ht)) in self.heads.iter().zip(&trace.heads).enumerate() {
            let (n, sz, _, b, c) = ht.raw.dim();
            let dec = &trace.predictions.heads[h];
            // the backward activation only works lane-wise, so the batch can
            // be folded into the row axis
            let fold = |a: &Array5<f64>| {
                a.view()
                    .into_shape_with_order((n * sz, sz, b, c))
                    .expect("standard layout")
                    .to_owned()
            };
            let graw = activate_grid_backward(
                fold(&ht.raw).view(),
                fold(dec).view(),
                fold(&grad_decoded[h]).view(),
                grid,
            );
            // [N, S, S, B, C] -> [B*C, N, S, S]
            let gout = graw
                .into_shape_with_order((n, sz, sz, b, c))
                .expect("grid shape")
                .permuted_axes([3, 4, 0, 1, 2])
                .as_standard_layout()
                .into_owned()
                .into_shape_with_order((b * c, n, sz, sz))
                .expect("head output shape");
            let (gi_hidden, gi_out) = (nb + 2 * h, nb + 2 * h + 1);
            let mut gh = head
                .out
                .backward(&ht.out_cache, &gout, &mut grads.0[gi_out]);
            if let Some(Some(extra)) = grad_hidden.get(h) {
                gh += extra;
            }
            let gh = leaky_relu_backward(&ht.hidden_pre, &gh);
            let gf = head
                .hidden
                .backward(&ht.hidden_cache, &gh, &mut grads.0[gi_hidden]);
            grad_features = Some(match grad_features {
                Some(acc) => acc + gf,
                None => gf,
            });
        }
        let mut g = grad_features.expect("at least one head");
        for (i, layer) in self.backbone.iter().enumerate().rev() {
            let (cache, pre) = &trace.backbone[i];
            let gpre = leaky_relu_backward(pre, &g);
            g = layer.backward(cache, &gpre, &mut grads.0[i]);
        }
        grads
    }
}

/// Runs every head on `images`; a BEA model yields α and β grids from the
/// same backbone features.
pub fn forward_bea(model: &Detector, images: &[ArrayView2<f64>]) -> Result<Predictions> {
    model.forward(images)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::Rng;

    fn images(n: usize, size: usize, seed: u64) -> Vec<Array2<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| Array2::from_shape_fn((size, size), |_| rng.gen_range(0.0..1.0)))
            .collect()
    }

    fn views(v: &[Array2<f64>]) -> Vec<ArrayView2<'_, f64>> {
        v.iter().map(|a| a.view()).collect()
    }

    #[test]
    fn output_shapes() {
        let m = Detector::new(ModelConfig::default(), 0).unwrap();
        let imgs = images(4, 64, 1);
        let p = forward_bea(&m, &views(&imgs)).unwrap();
        assert_eq!(p.heads.len(), 2);
        assert_eq!(p.heads[0].shape(), &[4, 8, 8, 2, 8]);
        assert_eq!(p.heads[1].shape(), &[4, 8, 8, 2, 8]);
        assert!(p.tandem(3).is_ok());

        let base = Detector::new(
            ModelConfig {
                bea: false,
                ..Default::default()
            },
            0,
        )
        .unwrap();
        let p = base.forward(&views(&imgs)).unwrap();
        assert_eq!(p.heads.len(), 1);
        assert!(p.tandem(0).is_err());
        // α of the BEA model starts from the same weights as the base head
        assert_eq!(base.heads[0], m.heads[0]);
        assert_ne!(m.heads[0], m.heads[1]);
    }

    #[test]
    fn deterministic_forward() {
        let m = Detector::new(ModelConfig::default(), 3).unwrap();
        let imgs = images(2, 64, 2);
        assert_eq!(
            m.forward(&views(&imgs)).unwrap(),
            m.forward(&views(&imgs)).unwrap()
        );
    }

    #[test]
    fn wrong_image_size_is_an_error() {
        let m = Detector::new(ModelConfig::default(), 3).unwrap();
        let imgs = images(1, 32, 2);
        assert!(m.forward(&views(&imgs)).is_err());
        let bad = ModelConfig {
            image_size: 60,
            ..Default::default()
        };
        assert!(Detector::new(bad, 0).is_err());
    }

    #[test]
    fn batch_and_single_image_agree() {
        let m = Detector::new(ModelConfig::default(), 5).unwrap();
        let imgs = images(3, 64, 4);
        let batch = m.forward(&views(&imgs)).unwrap();
        let one = m.forward(&views(&imgs[1..2])).unwrap();
        for h in 0..2 {
            let d = (&batch.grid(h, 1) - &one.grid(h, 0)).mapv(f64::abs);
            assert!(d.iter().all(|&v| v < 1e-12));
        }
    }

    #[test]
    fn param_round_trip() {
        let mut m = Detector::new(ModelConfig::default(), 1).unwrap();
        let p = m.params();
        assert_eq!(p.len(), m.num_params());
        let shifted: Vec<f64> = p.iter().map(|v| v + 1.0).collect();
        m.set_params(&shifted).unwrap();
        assert_eq!(m.params(), shifted);
        assert!(m.set_params(&p[1..]).is_err());
    }
}
