//! Test-set evaluation of several models, optionally with one modality removed.

use std::fmt::Write;

use serde::{Deserialize, Serialize};

use super::dice::dice_score;
use crate::data::{ModalityId, SubjectSample};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::seg::SegModel;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectScore {
    pub subject_id: u32,
    pub dice: f64,
}

/// Per-subject Dice of one model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelResult {
    pub model: String,
    pub drop_modality: Option<ModalityId>,
    pub mean_dice: f64,
    pub subjects: Vec<SubjectScore>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteResult {
    pub drop_modality: Option<ModalityId>,
    pub models: Vec<ModelResult>,
}

/// Removes `drop` from every subject; absent modalities are left alone.
pub fn apply_drop(subjects: &[SubjectSample], drop: Option<ModalityId>) -> Result<Vec<SubjectSample>> {
    match drop {
        None => Ok(subjects.to_vec()),
        Some(m) => subjects.iter().map(|s| s.without(m)).collect(),
    }
}

pub fn evaluate_model<S: Scalar>(
    name: &str,
    model: &SegModel<S>,
    subjects: &[SubjectSample],
    drop: Option<ModalityId>,
) -> Result<ModelResult> {
    if subjects.is_empty() {
        return Err(Error::EmptyInput("no test subjects".into()));
    }
    let subjects = apply_drop(subjects, drop)?;
    let mut scores = Vec::with_capacity(subjects.len());
    for s in &subjects {
        let gt = s.mask.as_ref().ok_or_else(|| Error::contract(format!("subject {} has no lesion mask", s.id)))?;
        let pred = model.predict(s)?;
        scores.push(SubjectScore { subject_id: s.id, dice: dice_score(&pred.binary, &gt.to_binary())? });
    }
    let mean_dice = scores.iter().map(|s| s.dice).sum::<f64>() / scores.len() as f64;
    Ok(ModelResult { model: name.to_string(), drop_modality: drop, mean_dice, subjects: scores })
}

pub fn evaluate_suite<S: Scalar>(
    models: &[(String, SegModel<S>)],
    subjects: &[SubjectSample],
    drop: Option<ModalityId>,
) -> Result<SuiteResult> {
    if let Some(first) = models.first() {
        for (name, m) in models {
            if m.vit.num_modalities != first.1.vit.num_modalities {
                return Err(Error::contract(format!("model `{name}` uses a different modality catalog")));
            }
        }
    }
    let models = models
        .iter()
        .map(|(name, m)| evaluate_model(name, m, subjects, drop))
        .collect::<Result<_>>()?;
    Ok(SuiteResult { drop_modality: drop, models })
}

/// Aligned plain-text table: one row per model, one column per subject.
pub fn render_table(suite: &SuiteResult) -> String {
    let mut out = String::new();
    let name_w = suite.models.iter().map(|m| m.model.len()).max().unwrap_or(5).max(5);
    match suite.drop_modality {
        Some(m) => writeln!(out, "modality {m} removed for all subjects").unwrap(),
        None => writeln!(out, "all available modalities").unwrap(),
    }
    write!(out, "{:<name_w$}  {:>9}", "model", "mean dice").unwrap();
    if let Some(first) = suite.models.first() {
        for s in &first.subjects {
            write!(out, "  {:>6}", format!("s{}", s.subject_id)).unwrap();
        }
    }
    out.push('\n');
    for m in &suite.models {
        write!(out, "{:<name_w$}  {:>9.4}", m.model, m.mean_dice).unwrap();
        for s in &m.subjects {
            write!(out, "  {:>6.3}", s.dice).unwrap();
        }
        out.push('\n');
    }
    out
}
