//! Mini-batch SGD training and top-k evaluation.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Sgd};
use crate::data::{DataSplit, Dataset};
use crate::error::{CsaError, Result};
use crate::model::{Model, ModelSpec};
use crate::tensor::Tensor;

const SHIFT_STREAM: u64 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Epochs (0-based) at whose start the learning rate drops by 10×.
    pub milestones: Vec<usize>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub nesterov: bool,
    /// Shuffle and augmentation seed.
    pub seed: u64,
    /// Random horizontal shift of up to ±2 pixels (zero fill).
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 64,
            lr: 0.05,
            milestones: vec![10, 15],
            momentum: 0.9,
            weight_decay: 1e-4,
            nesterov: true,
            seed: 0,
            augment: false,
        }
    }
}

impl TrainConfig {
    /// Default configuration for a given epoch budget, with milestones at
    /// half and three quarters of it.
    pub fn for_epochs(epochs: usize) -> Self {
        TrainConfig {
            epochs,
            milestones: default_milestones(epochs),
            ..Self::default()
        }
    }

    /// Preset for the synthetic task. Its 512 training images give only a
    /// handful of steps per epoch at the general defaults, and without
    /// normalisation layers `lr = 0.05` diverges there, so this preset uses
    /// smaller batches and a smaller step.
    pub fn synthetic(epochs: usize) -> Self {
        TrainConfig {
            batch_size: 16,
            lr: 0.01,
            ..Self::for_epochs(epochs)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(CsaError::InvalidConfig(format!("train: {m}")));
        if self.epochs == 0 {
            return fail("epochs must be positive".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive".into());
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return fail(format!("lr must be finite and >= 0, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return fail(format!("weight_decay must be finite and >= 0, got {}", self.weight_decay));
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return fail(format!("milestones must be strictly increasing, got {:?}", self.milestones));
        }
        if let Some(&m) = self.milestones.iter().find(|&&m| m >= self.epochs) {
            return fail(format!("milestone {m} is not below epochs = {}", self.epochs));
        }
        Ok(())
    }

    /// Learning rate in effect during `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = self.milestones.iter().filter(|&&m| m <= epoch).count();
        self.lr * 0.1f64.powi(drops as i32)
    }
}

/// `[epochs/2, 3·epochs/4]` with duplicates and zero dropped.
pub fn default_milestones(epochs: usize) -> Vec<usize> {
    let mut m: Vec<usize> = [epochs / 2, 3 * epochs / 4].into_iter().filter(|&e| e > 0 && e < epochs).collect();
    m.dedup();
    m
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub loss: f64,
    pub top1_error: f64,
    /// Only reported for more than five classes.
    pub top5_error: Option<f64>,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Mean loss over the epoch's mini-batches, before each update.
    pub train_loss: f64,
    /// Running top-1 error over the epoch's mini-batches.
    pub train_error: f64,
    pub test_error: f64,
}

/// Everything except timings, so two identical runs serialise to
/// identical bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub model: ModelSpec,
    pub train: TrainConfig,
    pub param_count: usize,
    pub attention_param_count: usize,
    pub epochs: Vec<EpochRecord>,
    pub final_train: Metrics,
    pub final_test: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub metrics: RunMetrics,
    /// Wall-clock seconds per epoch, evaluation included.
    pub epoch_seconds: Vec<f64>,
}

fn top_k_hits(logits: &[f64], label: usize, k: usize) -> bool {
    let target = logits[label];
    // Ties are broken towards the lower class index.
    let better = logits
        .iter()
        .enumerate()
        .filter(|&(i, &v)| v > target || (v == target && i < label))
        .count();
    better < k
}

fn log_softmax_loss(logits: &[f64], label: usize) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    lse - logits[label]
}

/// Single-crop evaluation. Top-5 error is reported when there are more
/// than five classes.
pub fn evaluate(model: &Model, data: &Dataset) -> Result<Metrics> {
    let mut loss = 0.0;
    let (mut top1, mut top5) = (0usize, 0usize);
    for (img, &label) in data.images.iter().zip(&data.labels) {
        let logits = model.logits(img)?;
        let l = logits.data();
        if label >= l.len() {
            return Err(CsaError::LabelOutOfRange {
                label,
                classes: l.len(),
            });
        }
        loss += log_softmax_loss(l, label);
        top1 += usize::from(!top_k_hits(l, label, 1));
        top5 += usize::from(!top_k_hits(l, label, 5));
    }
    let n = data.len() as f64;
    Ok(Metrics {
        loss: loss / n,
        top1_error: top1 as f64 / n,
        top5_error: (data.num_classes > 5).then(|| top5 as f64 / n),
        samples: data.len(),
    })
}

fn shift_horizontal(img: &Tensor, dx: isize) -> Tensor {
    if dx == 0 {
        return img.clone();
    }
    let (c, h, w) = (img.dim(0), img.dim(1), img.dim(2));
    let mut out = Tensor::zeros(vec![c, h, w]);
    let src = img.data();
    let dst = out.data_mut();
    for row in 0..c * h {
        for x in 0..w {
            let sx = x as isize - dx;
            if sx >= 0 && (sx as usize) < w {
                dst[row * w + x] = src[row * w + sx as usize];
            }
        }
    }
    out
}

/// Loss, logits and parameter gradients of one sample.
fn sample_step(model: &Model, image: &Tensor, label: usize) -> Result<(f64, Tensor, Vec<Tensor>)> {
    let mut g = Graph::new();
    let params = model.bind(&mut g, true);
    let x = g.constant(image.clone());
    let pass = model.forward(&mut g, &params, x)?;
    let loss = g.softmax_cross_entropy(pass.logits, label)?;
    let mut grads = g.backward(loss)?;
    let per_param = params
        .iter()
        .map(|&v| grads.take(v).unwrap_or_else(|| Tensor::zeros(g.value(v).shape().to_vec())))
        .collect();
    Ok((g.value(loss).item(), g.value(pass.logits).clone(), per_param))
}

/// Trains `model` in place. Each epoch visits the training set in a
/// seeded random order; the gradient of a mini-batch is the mean of its
/// per-sample gradients, summed in sample order. The test split is
/// evaluated after every epoch.
pub fn train(model: &mut Model, data: &DataSplit, cfg: &TrainConfig) -> Result<RunReport> {
    cfg.validate()?;
    if data.train.num_classes != model.spec.num_classes {
        return Err(CsaError::InvalidConfig(format!(
            "dataset has {} classes, model {}",
            data.train.num_classes, model.spec.num_classes
        )));
    }
    let mut opt = Sgd::new(cfg.lr, cfg.momentum, cfg.weight_decay, cfg.nesterov)?;
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut shift_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    shift_rng.set_stream(SHIFT_STREAM);
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut epoch_seconds = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let lr = cfg.lr_at(epoch);
        opt.lr = lr;
        order.shuffle(&mut order_rng);
        let (mut loss_sum, mut wrong) = (0.0, 0usize);
        for (batch, idx) in order.chunks(cfg.batch_size).enumerate() {
            let mut acc: Option<Vec<Tensor>> = None;
            let mut batch_loss = 0.0;
            for &i in idx {
                let image = if cfg.augment {
                    shift_horizontal(&data.train.images[i], shift_rng.gen_range(-2..=2))
                } else {
                    data.train.images[i].clone()
                };
                let label = data.train.labels[i];
                let (loss, logits, grads) = sample_step(model, &image, label)?;
                batch_loss += loss;
                wrong += usize::from(!top_k_hits(logits.data(), label, 1));
                match &mut acc {
                    None => acc = Some(grads),
                    Some(sum) => {
                        for (s, g) in sum.iter_mut().zip(&grads) {
                            s.add_assign(g);
                        }
                    }
                }
            }
            if !batch_loss.is_finite() {
                return Err(CsaError::NonFiniteLoss { epoch, batch, lr });
            }
            loss_sum += batch_loss;
            let inv = 1.0 / idx.len() as f64;
            let grads: Vec<Tensor> = acc.unwrap_or_default().iter().map(|g| g.scale(inv)).collect();
            opt.step(model.params_mut(), &grads)?;
        }
        let test = evaluate(model, &data.test)?;
        let n = data.train.len() as f64;
        epochs.push(EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / n,
            train_error: wrong as f64 / n,
            test_error: test.top1_error,
        });
        epoch_seconds.push(start.elapsed().as_secs_f64());
    }

    Ok(RunReport {
        metrics: RunMetrics {
            model: model.spec.clone(),
            train: cfg.clone(),
            param_count: model.param_count(),
            attention_param_count: model.attention_param_count(),
            epochs,
            final_train: evaluate(model, &data.train)?,
            final_test: evaluate(model, &data.test)?,
        },
        epoch_seconds,
    })
}
