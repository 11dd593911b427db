//! Dataset directories: RVOL files, `manifest.json` and `catalog.json`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::rvol::{read_subject, write_subject};
use super::synth::{generate_subject, make_splits, GeneratorConfig};
use super::{Catalog, SubjectSample};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CATALOG_FILE: &str = "catalog.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Pretrain,
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub subject_id: u32,
    pub files: Vec<String>,
    pub split: Split,
    pub has_mask: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub generator: GeneratorConfig,
    pub n_pretrain: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            generator: GeneratorConfig::default(),
            n_pretrain: 64,
            n_train: 32,
            n_val: 8,
            n_test: 8,
        }
    }
}

/// An in-memory dataset grouped by split.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub catalog: Catalog,
    pub subjects: Vec<(Split, SubjectSample)>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> Vec<SubjectSample> {
        self.subjects.iter().filter(|(s, _)| *s == split).map(|(_, x)| x.clone()).collect()
    }
}

/// Generates every subject of a dataset. Fine-tuning subjects take ids
/// `0..n_train + n_val + n_test`; pretraining subjects follow and carry no mask.
pub fn build_dataset(cfg: &DatasetConfig) -> Result<Dataset> {
    let splits = make_splits(&cfg.generator, cfg.n_train, cfg.n_val, cfg.n_test)?;
    let mut subjects = Vec::new();
    let n_ft = (cfg.n_train + cfg.n_val + cfg.n_test) as u32;
    for id in 0..n_ft + cfg.n_pretrain as u32 {
        let split = if id >= n_ft {
            Split::Pretrain
        } else if splits.train.contains(&id) {
            Split::Train
        } else if splits.val.contains(&id) {
            Split::Val
        } else {
            Split::Test
        };
        let mut s = generate_subject(&cfg.generator, id)?;
        if split == Split::Pretrain {
            s.mask = None;
        }
        subjects.push((split, s));
    }
    Ok(Dataset { catalog: cfg.generator.catalog(), subjects })
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes)?;
    Ok(())
}

pub fn write_dataset(dir: &Path, dataset: &Dataset) -> Result<Vec<ManifestEntry>> {
    fs::create_dir_all(dir)?;
    let mut entries = Vec::new();
    for (split, s) in &dataset.subjects {
        let files = write_subject(dir, s)?;
        entries.push(ManifestEntry { subject_id: s.id, files, split: *split, has_mask: s.mask.is_some() });
    }
    write_json(&dir.join(MANIFEST_FILE), &entries)?;
    write_json(&dir.join(CATALOG_FILE), &dataset.catalog)?;
    Ok(entries)
}

/// Loads a dataset directory, checking every manifest entry against its files.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let entries: Vec<ManifestEntry> = serde_json::from_slice(&fs::read(dir.join(MANIFEST_FILE))?)?;
    let catalog: Catalog = serde_json::from_slice(&fs::read(dir.join(CATALOG_FILE))?)?;
    let catalog = Catalog::new(catalog.modalities)?;
    let mut subjects = Vec::with_capacity(entries.len());
    for e in &entries {
        let s = read_subject(dir, &e.files, catalog.len())?;
        if s.id != e.subject_id || s.mask.is_some() != e.has_mask {
            return Err(Error::contract(format!(
                "manifest entry for subject {} does not match its files",
                e.subject_id
            )));
        }
        subjects.push((e.split, s));
    }
    Ok(Dataset { catalog, subjects })
}
