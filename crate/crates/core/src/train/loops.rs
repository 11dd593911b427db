//! Pretraining and fine-tuning epoch loops.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::adamw::TrainState;
use super::checkpoint::{BestRecord, MetricRecord};
use super::schedule::{lr_at, warmup_steps};
use crate::autograd::Graph;
use crate::data::SubjectSample;
use crate::error::{Error, Result};
use crate::eval::dice::dice_score;
use crate::mae::{forward_pretrain, sample_plans};
use crate::params::{Bound, Params};
use crate::scalar::Scalar;
use crate::seed::{mix, rng};
use crate::seg::{dice_loss, SegModel, SegmentationMask};
use crate::vit::VitConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: u64,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_fraction: f64,
    pub batch_size: usize,
    pub mask_ratio: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 100,
            lr: 1e-3,
            weight_decay: 0.05,
            warmup_fraction: 0.05,
            batch_size: 4,
            mask_ratio: 0.7,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub epochs: u64,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_fraction: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig { epochs: 60, lr: 1e-3, weight_decay: 0.05, warmup_fraction: 0.05, batch_size: 4, seed: 0 }
    }
}

fn check_common(batch: usize, lr: f64, wd: f64, warmup: f64) -> Result<()> {
    if batch == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    if !(lr >= 0.0 && lr.is_finite()) || !(wd >= 0.0 && wd.is_finite()) {
        return Err(Error::Config(format!("learning rate {lr} / weight decay {wd} must be finite and non-negative")));
    }
    if !(0.0..1.0).contains(&warmup) {
        return Err(Error::Config(format!("warmup_fraction {warmup} outside [0, 1)")));
    }
    Ok(())
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        check_common(self.batch_size, self.lr, self.weight_decay, self.warmup_fraction)?;
        if !(0.0..=1.0).contains(&self.mask_ratio) {
            return Err(Error::Config(format!("mask_ratio {} outside [0, 1]", self.mask_ratio)));
        }
        Ok(())
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        check_common(self.batch_size, self.lr, self.weight_decay, self.warmup_fraction)
    }
}

/// Subject visiting order for one epoch.
pub fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng(mix(&[seed, epoch, 0x0de7])));
    order
}

fn steps_per_epoch(n: usize, batch: usize) -> u64 {
    n.div_ceil(batch) as u64
}

fn finite(loss: f64, context: impl FnOnce() -> String) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence { context: context(), what: "loss".into() })
    }
}

/// Masked reconstruction loss and parameter gradients for one subject.
pub fn pretrain_grads<S: Scalar>(
    params: &Params<S>,
    vit: &VitConfig,
    subject: &SubjectSample,
    mask_ratio: f64,
    seed: u64,
    epoch: u64,
) -> Result<(f64, Params<S>)> {
    let plans = sample_plans(subject, vit.patches(), mask_ratio, seed, epoch)?;
    let mut g = Graph::new();
    let b = Bound::bind(&mut g, params, true);
    let fwd = forward_pretrain(&mut g, &b, vit, subject, &plans)?;
    let loss = g.value(fwd.loss).item()?.as_f64();
    finite(loss, || format!("epoch {epoch}, subject {}", subject.id))?;
    g.backward(fwd.loss)?;
    Ok((loss, b.grads(&g)))
}

/// Dice loss and gradients of a segmentation model on one labelled subject.
pub fn finetune_grads<S: Scalar>(model: &SegModel<S>, subject: &SubjectSample) -> Result<(f64, Params<S>)> {
    let mask = subject
        .mask
        .as_ref()
        .ok_or_else(|| Error::contract(format!("subject {} has no lesion mask", subject.id)))?;
    let mut g = Graph::new();
    let b = Bound::bind(&mut g, &model.params, true);
    let logits = model.forward(&mut g, &b, subject)?;
    let loss_v = dice_loss(&mut g, logits, &mask.to_binary(), model.head.dice_smooth)?;
    let loss = g.value(loss_v).item()?.as_f64();
    finite(loss, || format!("subject {}", subject.id))?;
    g.backward(loss_v)?;
    Ok((loss, b.grads(&g)))
}

/// Sums per-subject gradients over a batch, averages, and takes one AdamW step.
fn batch_step<S: Scalar>(
    state: &mut TrainState<S>,
    lr: f64,
    batch: &[&SubjectSample],
    mut grads_of: impl FnMut(&Params<S>, &SubjectSample) -> Result<(f64, Params<S>)>,
) -> Result<f64> {
    let mut acc = state.params.zeros_like();
    let mut total = 0.0;
    for s in batch {
        let (loss, g) = grads_of(&state.params, s)?;
        acc.add_scaled(&g, S::one());
        total += loss;
    }
    acc.scale(S::lit(1.0 / batch.len() as f64));
    state.adamw_step(&acc, lr).map_err(|e| match e {
        Error::Divergence { context, what } => {
            Error::Divergence { context: format!("epoch {}, {context}", state.counters.epoch), what }
        }
        other => other,
    })?;
    Ok(total)
}

/// Callback invoked with every metrics record as it is produced.
pub type Observer<'a> = &'a mut dyn FnMut(&MetricRecord);

/// Outcome of a pretraining run.
#[derive(Clone, Debug, PartialEq)]
pub struct PretrainRun<S> {
    pub state: TrainState<S>,
    pub metrics: Vec<MetricRecord>,
}

/// Runs pretraining from `start` (fresh or resumed) until `cfg.epochs`, or
/// until `stop_after` further epochs when given.
pub fn run_pretrain<S: Scalar>(
    subjects: &[SubjectSample],
    vit: &VitConfig,
    cfg: &PretrainConfig,
    start: PretrainRun<S>,
    stop_after: Option<u64>,
    observer: Observer,
) -> Result<PretrainRun<S>> {
    cfg.validate()?;
    if subjects.is_empty() {
        return Err(Error::EmptyInput("no pretraining subjects".into()));
    }
    let PretrainRun { mut state, mut metrics } = start;
    let per_epoch = steps_per_epoch(subjects.len(), cfg.batch_size);
    let total = per_epoch * cfg.epochs;
    let warmup = warmup_steps(total, cfg.warmup_fraction);
    let end = match stop_after {
        Some(n) => (state.counters.epoch + n).min(cfg.epochs),
        None => cfg.epochs,
    };
    while state.counters.epoch < end {
        let epoch = state.counters.epoch;
        let order = epoch_order(subjects.len(), cfg.seed, epoch);
        let mut loss_sum = 0.0;
        let mut lr = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&SubjectSample> = chunk.iter().map(|i| &subjects[*i]).collect();
            lr = lr_at(state.counters.step, total, cfg.lr, warmup);
            loss_sum += batch_step(&mut state, lr, &batch, |p, s| {
                pretrain_grads(p, vit, s, cfg.mask_ratio, cfg.seed, epoch)
            })?;
        }
        let rec = MetricRecord {
            epoch,
            split: "pretrain".into(),
            loss: loss_sum / subjects.len() as f64,
            dice: None,
            lr,
        };
        observer(&rec);
        metrics.push(rec);
        state.counters.epoch += 1;
    }
    Ok(PretrainRun { state, metrics })
}

/// Mean Dice loss and mean hard Dice over labelled subjects.
pub fn validate<S: Scalar>(model: &SegModel<S>, subjects: &[SubjectSample]) -> Result<(f64, f64)> {
    let mut loss = 0.0;
    let mut dice = 0.0;
    for s in subjects {
        let mask = s.mask.as_ref().ok_or_else(|| Error::contract(format!("subject {} has no lesion mask", s.id)))?;
        let mut g = Graph::new();
        let b = Bound::bind(&mut g, &model.params, false);
        let logits = model.forward(&mut g, &b, s)?;
        let gt = mask.to_binary();
        let l = dice_loss(&mut g, logits, &gt, model.head.dice_smooth)?;
        loss += g.value(l).item()?.as_f64();
        let pred = SegmentationMask::from_logits(model.vit.volume, g.value(logits).data());
        dice += dice_score(&pred.binary, &gt)?;
    }
    let n = subjects.len().max(1) as f64;
    Ok((loss / n, dice / n))
}

/// Outcome of fine-tuning: the final state, the best-validation parameters
/// and the full metrics history.
#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneRun<S> {
    pub state: TrainState<S>,
    pub best_params: Params<S>,
    pub best: Option<BestRecord>,
    pub metrics: Vec<MetricRecord>,
}

pub fn run_finetune<S: Scalar>(
    train: &[SubjectSample],
    val: &[SubjectSample],
    model: &SegModel<S>,
    cfg: &FinetuneConfig,
    observer: Observer,
) -> Result<FinetuneRun<S>> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::EmptyInput("fine-tuning needs training and validation subjects".into()));
    }
    let mut state = TrainState::new(model.params.clone(), cfg.lr, cfg.weight_decay, cfg.seed);
    let mut work = model.clone();
    let mut best_params = model.params.clone();
    let mut best: Option<BestRecord> = None;
    let mut metrics = Vec::new();
    let per_epoch = steps_per_epoch(train.len(), cfg.batch_size);
    let total = per_epoch * cfg.epochs;
    let warmup = warmup_steps(total, cfg.warmup_fraction);
    for epoch in 0..cfg.epochs {
        let order = epoch_order(train.len(), cfg.seed, epoch);
        let mut loss_sum = 0.0;
        let mut lr = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&SubjectSample> = chunk.iter().map(|i| &train[*i]).collect();
            lr = lr_at(state.counters.step, total, cfg.lr, warmup);
            loss_sum += batch_step(&mut state, lr, &batch, |p, s| {
                work.params = p.clone();
                finetune_grads(&work, s)
            })?;
        }
        let rec = MetricRecord { epoch, split: "train".into(), loss: loss_sum / train.len() as f64, dice: None, lr };
        observer(&rec);
        metrics.push(rec);

        work.params = state.params.clone();
        let (val_loss, val_dice) = validate(&work, val)?;
        let rec = MetricRecord { epoch, split: "val".into(), loss: val_loss, dice: Some(val_dice), lr };
        observer(&rec);
        metrics.push(rec);
        if best.is_none_or(|b| val_dice > b.val_dice) {
            best = Some(BestRecord { epoch, val_dice });
            best_params = state.params.clone();
        }
        state.counters.epoch = epoch + 1;
    }
    Ok(FinetuneRun { state, best_params, best, metrics })
}
