//! Mini-batch training loops.

use std::fmt::Write as _;

use rand::seq::SliceRandom;

use super::loss::{logit_gradient, output_loss};
use super::optim::Adam;
use super::oversample::oversample_benign;
use crate::annotations::{Label, SliceSample};
use crate::cascade::FusedSample;
use crate::error::{Error, Result};
use crate::nn::{ArchId, Mode, Model, ModelCheckpoint, Tensor, TrainingMeta};
use crate::rng::substream;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Total copies of each benign sample; classifier training only.
    pub oversample_factor: usize,
    /// Stop after this many optimizer steps even mid-epoch.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            epochs: 10,
            seed: 0,
            oversample_factor: 3,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.batch_size == 0 {
            return bad("batch size must be at least 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad(format!("decay rates must lie in [0, 1), got {} and {}", self.beta1, self.beta2));
        }
        if !(self.epsilon > 0.0) {
            return bad(format!("epsilon must be positive, got {}", self.epsilon));
        }
        if self.oversample_factor == 0 {
            return bad("oversampling factor must be at least 1".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub val_accuracy: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|v| format!("{v:.8}")).unwrap_or_default();
        let mut s = String::from("epoch,train_loss,val_loss,val_accuracy\n");
        for e in &self.epochs {
            let _ = writeln!(
                s,
                "{},{:.8},{},{}",
                e.epoch,
                e.train_loss,
                opt(e.val_loss),
                opt(e.val_accuracy)
            );
        }
        s
    }
}

/// One training pair: a `[C][H][W]` input and an output-shaped target.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub input: Vec<f32>,
    pub target: Vec<f32>,
}

impl Example {
    /// Slice image against its binary mask.
    pub fn segmentation(s: &SliceSample) -> Result<Self> {
        let mask = s
            .mask
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument(format!("slice {} of {} has no mask", s.slice_index, s.series_uid)))?;
        Ok(Example {
            input: s.image.clone(),
            target: mask.iter().map(|&m| f32::from(m.min(1))).collect(),
        })
    }

    /// Fused input against the one-hot `(benign, malignant)` target.
    pub fn classification(s: &FusedSample) -> Self {
        let m = f32::from(s.label == Label::Malignant);
        Example {
            input: s.input.data.clone(),
            target: vec![1.0 - m, m],
        }
    }
}

/// Stack examples into input and target tensors.
pub fn collate(model: &Model<f32>, batch: &[&Example]) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let ins = model.input_shape();
    let outs = model.net.graph.output_shape();
    let b = batch.len();
    let mut x = Vec::with_capacity(b * ins.numel());
    let mut t = Vec::with_capacity(b * outs.numel());
    for e in batch {
        if e.input.len() != ins.numel() {
            return Err(Error::shape(format!("{ins:?} input"), format!("{} values", e.input.len())));
        }
        if e.target.len() != outs.numel() {
            return Err(Error::shape(format!("{outs:?} target"), format!("{} values", e.target.len())));
        }
        x.extend_from_slice(&e.input);
        t.extend_from_slice(&e.target);
    }
    Ok((
        Tensor::from_nchw(b, ins.c, ins.h, ins.w, &x)?,
        Tensor::from_nchw(b, outs.c, outs.h, outs.w, &t)?,
    ))
}

/// Mean loss and, for classifiers, argmax accuracy over a held-out set.
pub fn evaluate(model: &Model<f32>, data: &[Example], batch_size: usize) -> Result<(f64, Option<f64>)> {
    if data.is_empty() {
        return Err(Error::Empty("evaluation set".into()));
    }
    let mut loss = 0.0;
    let mut correct = 0usize;
    for chunk in data.chunks(batch_size.max(1)) {
        let refs: Vec<&Example> = chunk.iter().collect();
        let (x, t) = collate(model, &refs)?;
        let y = model.forward(&x, Mode::Inference)?;
        loss += output_loss(model.arch(), &y, &t)? * chunk.len() as f64;
        if model.arch().is_classifier() {
            let b = y.b;
            correct += (0..b).filter(|&i| (y.data[b + i] > y.data[i]) == (t.data[b + i] > 0.5)).count();
        }
    }
    let n = data.len() as f64;
    let acc = model.arch().is_classifier().then(|| correct as f64 / n);
    Ok((loss / n, acc))
}

/// Minimize the mean cross-entropy of `model` over `train` with Adam.
///
/// The model is left holding the weights of the epoch with the lowest
/// validation loss, or of the last epoch when `val` is empty.
pub fn fit(
    model: &mut Model<f32>,
    train: &[Example],
    val: &[Example],
    cfg: &TrainConfig,
) -> Result<(ModelCheckpoint, TrainHistory)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Empty("training set".into()));
    }
    let mut opt = Adam::new(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.epsilon);
    let mut history = TrainHistory::default();
    let mut best: Option<(f64, usize, Vec<Vec<f32>>)> = None;
    let mut step = 0usize;
    let budget = cfg.max_steps.unwrap_or(usize::MAX);
    for epoch in 0..cfg.epochs {
        if step >= budget {
            break;
        }
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut substream(cfg.seed, "batch-order", epoch as u64));
        let mut total = 0.0;
        let mut seen = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            if step >= budget {
                break;
            }
            let refs: Vec<&Example> = chunk.iter().map(|&i| &train[i]).collect();
            let (x, t) = collate(model, &refs)?;
            let mut rng = substream(cfg.seed, "dropout", step as u64);
            let trace = model.trace(&x, Mode::Train(&mut rng))?;
            let loss = output_loss(model.arch(), trace.output(), &t)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, step, loss });
            }
            let seed = logit_gradient(model.arch(), trace.output(), &t);
            let mut grads = model.net.zero_grads();
            model.net.backward(&trace, model.logits_node(), seed, &mut grads);
            drop(trace);
            if grads.iter().flatten().any(|g| !g.is_finite()) {
                return Err(Error::Diverged { epoch, step, loss: f64::NAN });
            }
            opt.update(&mut model.net.params, &grads);
            total += loss * chunk.len() as f64;
            seen += chunk.len();
            step += 1;
        }
        let train_loss = total / seen as f64;
        let (val_loss, val_accuracy) = if val.is_empty() {
            (None, None)
        } else {
            let (l, a) = evaluate(model, val, cfg.batch_size)?;
            if !l.is_finite() {
                return Err(Error::Diverged { epoch, step, loss: l });
            }
            (Some(l), a)
        };
        history.epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            val_accuracy,
        });
        let score = val_loss.unwrap_or(f64::NEG_INFINITY);
        let improved = match &best {
            None => true,
            // without validation data the latest epoch wins
            Some((b, _, _)) => val_loss.is_none() || score < *b,
        };
        if improved {
            best = Some((score, epoch, model.net.params.clone()));
        }
    }
    let mut meta = TrainingMeta {
        epochs: history.epochs.len(),
        final_train_loss: history.epochs.last().map(|e| e.train_loss),
        final_val_loss: history.epochs.last().and_then(|e| e.val_loss),
        best_epoch: None,
        seed: cfg.seed,
        notes: Default::default(),
    };
    meta.notes.insert("steps".into(), step.to_string());
    if let Some((_, epoch, params)) = best {
        meta.best_epoch = Some(epoch);
        model.net.params = params;
    }
    Ok((ModelCheckpoint::from_model(model, meta), history))
}

/// Train the segmentation network on slices with masks.
pub fn train_segmentation(
    train: &[SliceSample],
    val: &[SliceSample],
    model: &mut Model<f32>,
    cfg: &TrainConfig,
) -> Result<(ModelCheckpoint, TrainHistory)> {
    if model.arch() != ArchId::Segmentation {
        return Err(Error::InvalidArgument(format!(
            "segmentation training needs a {} model, got {}",
            ArchId::Segmentation.as_str(),
            model.arch().as_str()
        )));
    }
    let tr = train.iter().map(Example::segmentation).collect::<Result<Vec<_>>>()?;
    let va = val.iter().map(Example::segmentation).collect::<Result<Vec<_>>>()?;
    fit(model, &tr, &va, cfg)
}

/// Train a classifier on fused inputs screened by `seg_ckpt`.
///
/// Benign training samples are oversampled by `cfg.oversample_factor`. The
/// segmentation weights are only read, to record their digest.
pub fn train_classifier(
    train: &[FusedSample],
    val: &[FusedSample],
    seg_ckpt: &ModelCheckpoint,
    model: &mut Model<f32>,
    cfg: &TrainConfig,
) -> Result<(ModelCheckpoint, TrainHistory)> {
    if seg_ckpt.arch.arch != ArchId::Segmentation {
        return Err(Error::Checkpoint(format!(
            "screening checkpoint is `{}`, expected `{}`",
            seg_ckpt.arch.arch.as_str(),
            ArchId::Segmentation.as_str()
        )));
    }
    if !model.arch().is_classifier() {
        return Err(Error::InvalidArgument(format!("`{}` is not a classifier", model.arch().as_str())));
    }
    if let Some(s) = train.iter().chain(val).find(|s| s.input.channels() != 2) {
        return Err(Error::shape("2 input channels", s.input.channels()));
    }
    cfg.validate()?;
    let tr: Vec<Example> = oversample_benign(train, cfg.oversample_factor, cfg.seed)
        .iter()
        .map(Example::classification)
        .collect();
    let va: Vec<Example> = val.iter().map(Example::classification).collect();
    let (mut ckpt, history) = fit(model, &tr, &va, cfg)?;
    ckpt.meta.notes.insert("seg_checkpoint".into(), seg_ckpt.digest());
    Ok((ckpt, history))
}
