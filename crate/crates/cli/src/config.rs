use std::fs;
use std::path::Path;

use amae_core::data::manifest::DatasetConfig;
use amae_core::seg::HeadConfig;
use amae_core::train::{FinetuneConfig, PretrainConfig};
use amae_core::vit::VitConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Every tunable of the pipeline. Each command reads the sections it needs
/// and echoes the whole resolved record.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DatasetConfig,
    pub model: VitConfig,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub head: HeadConfig,
    pub eval: EvalConfig,
    pub reconstruct: ReconConfig,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub drop_modality: Option<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReconConfig {
    pub mask_ratio: f64,
    pub seed: u64,
}

impl Default for ReconConfig {
    fn default() -> Self {
        ReconConfig { mask_ratio: 0.7, seed: 0 }
    }
}

pub fn load(path: Option<&Path>) -> Result<RunConfig, CliError> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => {
            let bytes = fs::read(p).map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", p.display())))?;
            serde_json::from_slice(&bytes).map_err(|e| CliError::Usage(format!("invalid config {}: {e}", p.display())))
        }
    }
}

pub fn echo(dir: &Path, cfg: &RunConfig) -> Result<(), CliError> {
    fs::create_dir_all(dir)?;
    let mut bytes = serde_json::to_vec_pretty(cfg).map_err(amae_core::Error::from)?;
    bytes.push(b'\n');
    fs::write(dir.join("config.json"), bytes)?;
    Ok(())
}
