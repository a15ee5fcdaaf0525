//! Objective evaluation and the SGD training loop.

use std::path::PathBuf;

use ndarray::{s, Array2, Array4, Array5, ArrayView2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{conventional_loss_grad_flat, ConvLossConfig};
use super::model::{Detector, Gradients};
use super::nn::{from_rows, to_rows, ConvGrad};
use super::scene::Sample;
use crate::diversity::{diversity_loss_grad, DiversityKind};
use crate::error::{BeaError, Result};
use crate::geometry::{assign_responsibility, Assignment, ResponsibilityMask};
use crate::tandem::{
    bea_loss, tandem_loss_flat, tandem_loss_grad_flat, tandem_monitor_flat, LossWeights,
    TandemLoss, TandemMonitor,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Fraction of the epochs after which the learning rate drops 10×.
    pub lr_decay_at: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub seed: u64,
    pub weights: LossWeights,
    pub diversity_kind: Option<DiversityKind>,
    pub conv: ConvLossConfig,
    /// Compute the tandem monitors even when neither tandem term trains.
    pub monitor: bool,
    /// Where to write a diagnostic dump if the loss becomes non-finite.
    #[serde(skip)]
    pub diagnostics_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 16,
            learning_rate: 1e-2,
            momentum: 0.9,
            lr_decay_at: 0.8,
            grad_clip: Some(10.0),
            seed: 0,
            weights: LossWeights::default(),
            diversity_kind: None,
            conv: ConvLossConfig::default(),
            monitor: true,
            diagnostics_dir: None,
        }
    }
}

/// Model-ready inputs and anchor targets for a group of images.
#[derive(Debug, Clone)]
pub struct Batch {
    pub input: Array4<f64>,
    pub assignments: Vec<Assignment>,
    pub image_ids: Vec<String>,
}

impl Batch {
    pub fn new(model: &Detector, samples: &[&Sample]) -> Result<Self> {
        let views: Vec<ArrayView2<f64>> = samples.iter().map(|s| s.image.view()).collect();
        Ok(Self {
            input: model.input(&views)?,
            assignments: samples
                .iter()
                .map(|s| assign_responsibility(&s.objects, model.grid()))
                .collect(),
            image_ids: samples.iter().map(|s| s.image_id.clone()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.assignments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignments.is_empty()
    }

    fn joint_mask(&self) -> ResponsibilityMask {
        ResponsibilityMask {
            obj: self
                .assignments
                .iter()
                .flat_map(|a| a.mask.obj.iter().copied())
                .collect(),
            noobj: self
                .assignments
                .iter()
                .flat_map(|a| a.mask.noobj.iter().copied())
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BatchLoss {
    /// Conventional loss, summed over heads and averaged over images.
    pub conv: f64,
    /// Full tandem value, present whenever it was computed.
    pub tandem: Option<TandemLoss>,
    pub diversity: f64,
    pub total: f64,
    pub monitor: Option<TandemMonitor>,
    pub dropped_gt: usize,
}

/// Value of the training objective on `batch`.
pub fn objective(model: &Detector, batch: &Batch, cfg: &TrainConfig) -> Result<BatchLoss> {
    Ok(evaluate(model, batch, cfg, false)?.0)
}

/// Objective value and its gradient with respect to every parameter.
pub fn objective_grad(
    model: &Detector,
    batch: &Batch,
    cfg: &TrainConfig,
) -> Result<(BatchLoss, Gradients)> {
    let (loss, g) = evaluate(model, batch, cfg, true)?;
    Ok((loss, g.expect("gradient requested")))
}

fn evaluate(
    model: &Detector,
    batch: &Batch,
    cfg: &TrainConfig,
    want_grad: bool,
) -> Result<(BatchLoss, Option<Gradients>)> {
    let w = &cfg.weights;
    let trace = model.forward_trace(&batch.input)?;
    let grid = model.grid();
    let (n, a, c) = (batch.len(), grid.num_anchors(), grid.channels());
    let nh = trace.predictions.heads.len();
    fn flat(arr: &Array5<f64>, rows: usize, cols: usize) -> ArrayView2<'_, f64> {
        arr.view()
            .into_shape_with_order((rows, cols))
            .expect("standard layout")
    }
    let mut gdec: Vec<Array2<f64>> = (0..nh).map(|_| Array2::zeros((n * a, c))).collect();

    let mut conv = 0.0;
    for (h, g) in gdec.iter_mut().enumerate() {
        let f = flat(&trace.predictions.heads[h], n * a, c);
        for (i, asg) in batch.assignments.iter().enumerate() {
            let rows = s![i * a..(i + 1) * a, ..];
            let (v, gi) =
                conventional_loss_grad_flat(f.slice(rows), &asg.targets, &asg.mask, &cfg.conv)?;
            conv += v / n as f64;
            g.slice_mut(rows).scaled_add(w.w_conv / n as f64, &gi);
        }
    }

    let bea = nh == 2;
    let trains_tandem = w.enable_ta || w.enable_tq;
    let (mut tandem, mut monitor) = (None, None);
    if bea && (trains_tandem || cfg.monitor) {
        let (fa, fb) = (
            flat(&trace.predictions.heads[0], n * a, c),
            flat(&trace.predictions.heads[1], n * a, c),
        );
        let mask = batch.joint_mask();
        if trains_tandem {
            let (loss, ga, gb) = tandem_loss_grad_flat(fa, fb, &mask, w)?;
            gdec[0].scaled_add(w.w_tandem, &ga);
            gdec[1].scaled_add(w.w_tandem, &gb);
            tandem = Some(loss);
        } else {
            tandem = Some(tandem_loss_flat(fa, fb, &mask, w)?);
        }
        if cfg.monitor {
            monitor = Some(tandem_monitor_flat(fa, fb, &mask, w.eps_tq)?);
        }
    }

    let mut diversity = 0.0;
    let mut ghidden: Vec<Option<Array4<f64>>> = vec![None; nh];
    if let (true, Some(kind), true) = (bea, cfg.diversity_kind, w.w_diversity > 0.0) {
        let (ha, hb) = (&trace.heads[0].hidden, &trace.heads[1].hidden);
        let (v, gx, gy) = diversity_loss_grad(to_rows(ha).view(), to_rows(hb).view(), kind)?;
        diversity = v;
        ghidden[0] = Some(from_rows(&(gx * w.w_diversity), ha.dim()));
        ghidden[1] = Some(from_rows(&(gy * w.w_diversity), hb.dim()));
    }

    let total = bea_loss(conv, tandem.as_ref().map_or(0.0, |t| t.total), diversity, w);
    let loss = BatchLoss {
        conv,
        tandem,
        diversity,
        total,
        monitor,
        dropped_gt: batch.assignments.iter().map(|a| a.dropped).sum(),
    };
    if !want_grad {
        return Ok((loss, None));
    }
    let (sz, b) = (grid.s, grid.b());
    let gdec: Vec<Array5<f64>> = gdec
        .into_iter()
        .map(|g| {
            g.into_shape_with_order((n, sz, sz, b, c))
                .expect("grid shape")
        })
        .collect();
    let grads = model.backward(&trace, &gdec, &ghidden);
    Ok((loss, Some(grads)))
}

/// Per-epoch averages of the batch losses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    #[serde(rename = "L_ta_conf")]
    pub l_ta_conf: Option<f64>,
    #[serde(rename = "L_tq_conf")]
    pub l_tq_conf: Option<f64>,
    pub mse_alpha_beta: Option<f64>,
    #[serde(rename = "L_conv")]
    pub l_conv: f64,
    /// `L_ta + L_tq` whether or not either term is trained.
    #[serde(rename = "L_tandem")]
    pub l_tandem: Option<f64>,
    #[serde(rename = "L_div")]
    pub l_div: f64,
    #[serde(rename = "L_total")]
    pub l_total: f64,
    pub dropped_gt: usize,
    pub learning_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub model: Detector,
    pub history: History,
}

#[derive(Default)]
struct Running {
    n: usize,
    ta_conf: f64,
    tq_conf: f64,
    mse: f64,
    conv: f64,
    tandem: f64,
    div: f64,
    total: f64,
    dropped: usize,
    has_monitor: bool,
    has_tandem: bool,
}

impl Running {
    fn add(&mut self, l: &BatchLoss) {
        self.n += 1;
        self.conv += l.conv;
        self.div += l.diversity;
        self.total += l.total;
        self.dropped += l.dropped_gt;
        if let Some(t) = &l.tandem {
            self.has_tandem = true;
            self.tandem += t.ta + t.tq;
        }
        if let Some(m) = &l.monitor {
            self.has_monitor = true;
            self.ta_conf += m.ta_conf;
            self.tq_conf += m.tq_conf;
            self.mse += m.mse_alpha_beta;
        }
    }

    fn record(&self, epoch: usize, learning_rate: f64) -> EpochRecord {
        let k = self.n.max(1) as f64;
        let mon = |v: f64| self.has_monitor.then_some(v / k);
        EpochRecord {
            epoch,
            l_ta_conf: mon(self.ta_conf),
            l_tq_conf: mon(self.tq_conf),
            mse_alpha_beta: mon(self.mse),
            l_conv: self.conv / k,
            l_tandem: self.has_tandem.then_some(self.tandem / k),
            l_div: self.div / k,
            l_total: self.total / k,
            dropped_gt: self.dropped,
            learning_rate,
        }
    }
}

fn sgd_step(
    model: &mut Detector,
    velocity: &mut [ConvGrad],
    grads: &Gradients,
    lr: f64,
    momentum: f64,
) {
    for ((layer, v), g) in model
        .layers_mut()
        .into_iter()
        .zip(velocity.iter_mut())
        .zip(&grads.0)
    {
        v.weight *= momentum;
        v.weight += &g.weight;
        v.bias *= momentum;
        v.bias += &g.bias;
        layer.weight.scaled_add(-lr, &v.weight);
        layer.bias.scaled_add(-lr, &v.bias);
    }
}

#[derive(Serialize)]
struct Diagnostic<'a> {
    epoch: usize,
    batch: usize,
    image_ids: &'a [String],
    loss: &'a BatchLoss,
    grad_norm: f64,
    learning_rate: f64,
}

fn non_finite(
    cfg: &TrainConfig,
    epoch: usize,
    batch_index: usize,
    batch: &Batch,
    loss: &BatchLoss,
    grad_norm: f64,
    learning_rate: f64,
) -> BeaError {
    let diag = Diagnostic {
        epoch,
        batch: batch_index,
        image_ids: &batch.image_ids,
        loss,
        grad_norm,
        learning_rate,
    };
    // serde_json writes non-finite floats as null
    let json = serde_json::to_string_pretty(&diag).unwrap_or_default();
    let mut detail = format!(
        "conv={} tandem={:?} div={} grad_norm={grad_norm}; images {:?}",
        loss.conv,
        loss.tandem.as_ref().map(|t| (t.ta, t.tq)),
        loss.diversity,
        batch.image_ids
    );
    if let Some(dir) = &cfg.diagnostics_dir {
        let path = dir.join(format!("nonfinite_e{epoch}_b{batch_index}.json"));
        match std::fs::create_dir_all(dir).and_then(|_| std::fs::write(&path, json)) {
            Ok(()) => detail.push_str(&format!("; dump at {}", path.display())),
            Err(e) => detail.push_str(&format!("; dump failed: {e}")),
        }
    }
    BeaError::NonFiniteLoss {
        epoch,
        batch: batch_index,
        detail,
    }
}

/// Minimizes the combined loss with momentum SGD.
pub fn train(mut model: Detector, data: &[Sample], cfg: &TrainConfig) -> Result<TrainedModel> {
    if data.is_empty() {
        return Err(BeaError::InvalidArgument("empty training set".into()));
    }
    if cfg.batch_size == 0 {
        return Err(BeaError::InvalidArgument("batch size must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(7);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut velocity: Vec<ConvGrad> = model
        .layers()
        .iter()
        .map(|l| ConvGrad::zeros_like(l))
        .collect();
    let decay_epoch = (cfg.lr_decay_at * cfg.epochs as f64).floor() as usize;
    let mut history = History::default();

    for epoch in 0..cfg.epochs {
        let lr = if epoch >= decay_epoch {
            cfg.learning_rate * 0.1
        } else {
            cfg.learning_rate
        };
        order.shuffle(&mut rng);
        let mut running = Running::default();
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let samples: Vec<&Sample> = chunk.iter().map(|&i| &data[i]).collect();
            let batch = Batch::new(&model, &samples)?;
            let (loss, mut grads) = objective_grad(&model, &batch, cfg)?;
            let norm = grads.norm();
            if !loss.total.is_finite() || !norm.is_finite() {
                return Err(non_finite(cfg, epoch, bi, &batch, &loss, norm, lr));
            }
            if let Some(clip) = cfg.grad_clip {
                if norm > clip {
                    grads.scale(clip / norm);
                }
            }
            sgd_step(&mut model, &mut velocity, &grads, lr, cfg.momentum);
            running.add(&loss);
        }
        let rec = running.record(epoch, lr);
        log::info!(
            "epoch {epoch}: total {:.4} conv {:.4} tandem {:?}",
            rec.l_total,
            rec.l_conv,
            rec.l_tandem
        );
        history.epochs.push(rec);
    }
    Ok(TrainedModel { model, history })
}
