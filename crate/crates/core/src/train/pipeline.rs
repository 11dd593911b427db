//! Whole-run helpers shared by the command-line tool and the tests.

use serde::Serialize;

use super::adamw::TrainState;
use super::checkpoint::{Checkpoint, CheckpointKind};
use super::loops::{run_finetune, run_pretrain, FinetuneConfig, FinetuneRun, Observer, PretrainConfig, PretrainRun};
use super::transfer::{transfer_encoder, TransferReport};
use crate::data::{Catalog, SubjectSample};
use crate::error::{Error, Result};
use crate::mae::init_params;
use crate::seg::{HeadConfig, SegModel};
use crate::vit::VitConfig;

/// Fresh pretraining state for `cfg`.
pub fn pretrain_start(vit: &VitConfig, cfg: &PretrainConfig) -> Result<PretrainRun<f64>> {
    let params = init_params(vit, cfg.seed)?;
    Ok(PretrainRun { state: TrainState::new(params, cfg.lr, cfg.weight_decay, cfg.seed), metrics: Vec::new() })
}

pub fn pretrain_checkpoint(run: PretrainRun<f64>, vit: &VitConfig, catalog: &Catalog, config: &impl Serialize) -> Result<Checkpoint> {
    Ok(Checkpoint {
        kind: CheckpointKind::Pretrain,
        config: serde_json::to_value(config)?,
        vit: vit.clone(),
        head: None,
        catalog: catalog.clone(),
        state: run.state,
        metrics: run.metrics,
        best: None,
    })
}

/// Resumes a pretraining checkpoint as a run.
pub fn resume_pretrain(ckpt: Checkpoint) -> Result<PretrainRun<f64>> {
    if ckpt.kind != CheckpointKind::Pretrain {
        return Err(Error::contract("cannot resume pretraining from a fine-tuning checkpoint"));
    }
    Ok(PretrainRun { state: ckpt.state, metrics: ckpt.metrics })
}

/// Pretrains from scratch for `cfg.epochs`.
pub fn pretrain(
    subjects: &[SubjectSample],
    vit: &VitConfig,
    catalog: &Catalog,
    cfg: &PretrainConfig,
    observer: Observer,
) -> Result<Checkpoint> {
    let run = run_pretrain(subjects, vit, cfg, pretrain_start(vit, cfg)?, None, observer)?;
    pretrain_checkpoint(run, vit, catalog, cfg)
}

/// Builds a segmentation model, optionally initialised from a pretrained encoder.
pub fn init_seg_model(
    vit: &VitConfig,
    head: &HeadConfig,
    seed: u64,
    init: Option<&Checkpoint>,
) -> Result<(SegModel<f64>, Option<TransferReport>)> {
    let mut model = SegModel::init(vit.clone(), head.clone(), seed)?;
    let report = match init {
        Some(ckpt) => {
            if ckpt.kind != CheckpointKind::Pretrain {
                return Err(Error::Transfer { field: "kind".into(), detail: "checkpoint is not a pretraining run".into() });
            }
            Some(transfer_encoder(&ckpt.state.params, &ckpt.vit, &mut model)?)
        }
        None => None,
    };
    Ok((model, report))
}

/// Fine-tunes and returns the best-validation model with its checkpoint.
#[allow(clippy::too_many_arguments)]
pub fn finetune(
    train: &[SubjectSample],
    val: &[SubjectSample],
    model: SegModel<f64>,
    catalog: &Catalog,
    cfg: &FinetuneConfig,
    config: &impl Serialize,
    observer: Observer,
) -> Result<(SegModel<f64>, Checkpoint)> {
    let FinetuneRun { mut state, best_params, best, metrics } = run_finetune(train, val, &model, cfg, observer)?;
    state.params = best_params;
    let ckpt = Checkpoint {
        kind: CheckpointKind::Finetune,
        config: serde_json::to_value(config)?,
        vit: model.vit.clone(),
        head: Some(model.head.clone()),
        catalog: catalog.clone(),
        state,
        metrics,
        best,
    };
    let best_model = SegModel { params: ckpt.state.params.clone(), ..model };
    Ok((best_model, ckpt))
}

/// Rebuilds a segmentation model from a fine-tuning checkpoint.
pub fn seg_model_from(ckpt: &Checkpoint) -> Result<SegModel<f64>> {
    let head = match (&ckpt.kind, &ckpt.head) {
        (CheckpointKind::Finetune, Some(h)) => h.clone(),
        _ => return Err(Error::contract("checkpoint does not hold a segmentation model")),
    };
    let model = SegModel::<f64>::init(ckpt.vit.clone(), head, 0)?;
    ckpt.state.params.check_shapes(&model.params)?;
    Ok(SegModel { params: ckpt.state.params.clone(), ..model })
}
