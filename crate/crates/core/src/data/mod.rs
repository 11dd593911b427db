//! Subjects, modality catalogs, the synthetic generator and on-disk formats.

pub mod manifest;
pub mod rvol;
pub mod synth;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Stable small integer naming one contrast.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ModalityId(pub u32);

impl ModalityId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for ModalityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModalityInfo {
    pub id: ModalityId,
    pub name: String,
    pub required: bool,
}

/// Ordered set of known modalities; ids are `0..len` in order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Catalog {
    pub modalities: Vec<ModalityInfo>,
}

impl Catalog {
    pub fn new(modalities: Vec<ModalityInfo>) -> Result<Self> {
        for (i, m) in modalities.iter().enumerate() {
            if m.id.index() != i {
                return Err(Error::Config(format!(
                    "modality ids must be contiguous from 0; position {i} holds id {}",
                    m.id
                )));
            }
        }
        Ok(Catalog { modalities })
    }

    pub fn len(&self) -> usize {
        self.modalities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modalities.is_empty()
    }

    pub fn contains(&self, id: ModalityId) -> bool {
        id.index() < self.modalities.len()
    }

    pub fn ids(&self) -> impl Iterator<Item = ModalityId> + '_ {
        self.modalities.iter().map(|m| m.id)
    }

    pub fn name(&self, id: ModalityId) -> Option<&str> {
        self.modalities.get(id.index()).map(|m| m.name.as_str())
    }
}

/// A single-channel 3D image in `[H, W, D]` row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub dims: [usize; 3],
    pub data: Vec<f32>,
}

impl Volume {
    pub fn new(dims: [usize; 3], data: Vec<f32>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::dim("volume", format!("{dims:?} needs {n} voxels, got {}", data.len())));
        }
        Ok(Volume { dims, data })
    }

    pub fn zeros(dims: [usize; 3]) -> Self {
        Volume { dims, data: vec![0.0; dims.iter().product()] }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, h: usize, w: usize, d: usize) -> usize {
        (h * self.dims[1] + w) * self.dims[2] + d
    }

    /// `[1, H, W, D]` tensor.
    pub fn to_tensor<S: Scalar>(&self) -> Tensor<S> {
        let [h, w, d] = self.dims;
        Tensor::new(vec![1, h, w, d], self.data.iter().map(|x| S::lit(f64::from(*x))).collect())
            .expect("dims match data")
    }

    /// Voxels with value above one half.
    pub fn to_binary(&self) -> Vec<bool> {
        self.data.iter().map(|x| *x > 0.5).collect()
    }
}

/// One subject: a non-empty set of co-registered volumes keyed by modality.
#[derive(Clone, Debug, PartialEq)]
pub struct SubjectSample {
    pub id: u32,
    pub volumes: BTreeMap<ModalityId, Volume>,
    pub mask: Option<Volume>,
}

impl SubjectSample {
    /// Builds a subject from a list of volumes in any order.
    pub fn from_list(id: u32, list: Vec<(ModalityId, Volume)>, mask: Option<Volume>) -> Result<Self> {
        let mut volumes = BTreeMap::new();
        for (m, v) in list {
            if volumes.insert(m, v).is_some() {
                return Err(Error::contract(format!("modality {m} listed twice for subject {id}")));
            }
        }
        let s = SubjectSample { id, volumes, mask };
        s.dims()?;
        Ok(s)
    }

    pub fn modalities(&self) -> Vec<ModalityId> {
        self.volumes.keys().copied().collect()
    }

    pub fn num_modalities(&self) -> usize {
        self.volumes.len()
    }

    /// Shared extents of every volume (and the mask, when present).
    pub fn dims(&self) -> Result<[usize; 3]> {
        let first = self
            .volumes
            .values()
            .next()
            .ok_or_else(|| Error::EmptyInput(format!("subject {} has no modalities", self.id)))?
            .dims;
        for (m, v) in &self.volumes {
            if v.dims != first {
                return Err(Error::dim(
                    format!("modality {m}"),
                    format!("extent {:?} differs from {first:?}", v.dims),
                ));
            }
        }
        if let Some(mask) = &self.mask {
            if mask.dims != first {
                return Err(Error::dim("mask", format!("extent {:?} differs from {first:?}", mask.dims)));
            }
        }
        Ok(first)
    }

    /// Copy with one modality removed; dropping an absent modality is a no-op.
    pub fn without(&self, m: ModalityId) -> Result<Self> {
        let mut out = self.clone();
        out.volumes.remove(&m);
        if out.volumes.is_empty() {
            return Err(Error::contract(format!(
                "dropping modality {m} leaves subject {} with no input",
                self.id
            )));
        }
        Ok(out)
    }
}
