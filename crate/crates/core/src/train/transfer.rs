//! Copying a pretrained encoder into a segmentation model.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::Params;
use crate::scalar::Scalar;
use crate::seg::SegModel;
use crate::vit::VitConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Disposition {
    /// Copied from the checkpoint.
    Transferred,
    /// Kept at its fresh initialisation.
    Fresh,
    /// Present in the checkpoint, absent from the target.
    Dropped,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TransferReport {
    pub params: BTreeMap<String, Disposition>,
}

impl TransferReport {
    pub fn with(&self, d: Disposition) -> Vec<&str> {
        self.params.iter().filter(|(_, v)| **v == d).map(|(k, _)| k.as_str()).collect()
    }
}

fn compare<T: std::fmt::Debug + PartialEq>(field: &str, a: T, b: T) -> Result<()> {
    if a != b {
        return Err(Error::Transfer { field: field.into(), detail: format!("checkpoint {a:?} vs target {b:?}") });
    }
    Ok(())
}

/// Checks that the encoder-side shapes agree.
pub fn check_compatible(src: &VitConfig, dst: &VitConfig) -> Result<()> {
    compare("embed_dim", src.embed_dim, dst.embed_dim)?;
    compare("depth", src.depth, dst.depth)?;
    compare("heads", src.heads, dst.heads)?;
    compare("mlp_ratio", src.mlp_ratio, dst.mlp_ratio)?;
    compare("patch", src.patch, dst.patch)?;
    compare("volume", src.volume, dst.volume)?;
    compare("modality_dim", src.modality_dim, dst.modality_dim)?;
    compare("num_modalities", src.num_modalities, dst.num_modalities)?;
    compare("pos_scheme", src.pos_scheme, dst.pos_scheme)
}

/// Copies every checkpoint tensor whose name and shape exist in the target.
/// Validates everything before writing, so a failed transfer leaves `target`
/// untouched.
pub fn transfer_encoder<S: Scalar>(
    src: &Params<f64>,
    src_vit: &VitConfig,
    target: &mut SegModel<S>,
) -> Result<TransferReport> {
    check_compatible(src_vit, &target.vit)?;
    let mut report = TransferReport::default();
    for (name, t) in target.params.iter() {
        let d = match src.get(name) {
            Ok(s) if s.shape() == t.shape() => Disposition::Transferred,
            Ok(s) => {
                return Err(Error::Transfer {
                    field: name.to_string(),
                    detail: format!("shape {:?} vs {:?}", s.shape(), t.shape()),
                })
            }
            Err(_) => Disposition::Fresh,
        };
        report.params.insert(name.to_string(), d);
    }
    for name in src.names() {
        if !target.params.contains(name) {
            report.params.insert(name.to_string(), Disposition::Dropped);
        }
    }
    for (name, t) in target.params.iter_mut() {
        if report.params.get(name) == Some(&Disposition::Transferred) {
            *t = src.get(name)?.cast();
        }
    }
    Ok(report)
}
