//! RVOL single-volume container.
//!
//! ```text
//! b"RVOL1"
//! u32 LE   header length N
//! N bytes  UTF-8 JSON {"subject_id", "modality_id", "dims": [H, W, D], "dtype": "f32le"}
//! H*W*D    little-endian f32 voxels
//! u32 LE   CRC32 of the voxel bytes
//! ```
//!
//! A `null` modality id marks the lesion label volume of a subject.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModalityId, SubjectSample, Volume};
use crate::error::{Error, ParseError, Result};

pub const MAGIC: &[u8; 5] = b"RVOL1";
const DTYPE: &str = "f32le";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    subject_id: u32,
    modality_id: Option<u32>,
    dims: [usize; 3],
    dtype: String,
}

/// One decoded file.
#[derive(Clone, Debug, PartialEq)]
pub struct VolumeRecord {
    pub subject_id: u32,
    /// `None` for a label volume.
    pub modality: Option<ModalityId>,
    pub volume: Volume,
}

pub fn encode(rec: &VolumeRecord) -> Vec<u8> {
    let header = Header {
        subject_id: rec.subject_id,
        modality_id: rec.modality.map(|m| m.0),
        dims: rec.volume.dims,
        dtype: DTYPE.to_string(),
    };
    let json = serde_json::to_vec(&header).expect("header serialises");
    let mut out = Vec::with_capacity(MAGIC.len() + 4 + json.len() + rec.volume.len() * 4 + 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    let start = out.len();
    for v in &rec.volume.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let crc = crc32fast::hash(&out[start..]);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

fn take(bytes: &[u8], at: usize, n: usize) -> Result<&[u8], ParseError> {
    bytes.get(at..at + n).ok_or(ParseError::Truncated {
        expected: at + n,
        found: bytes.len(),
    })
}

/// Decodes a file, rejecting modality ids `>= catalog_size`.
pub fn decode(bytes: &[u8], catalog_size: usize) -> Result<VolumeRecord, ParseError> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(ParseError::BadMagic);
    }
    let mut at = MAGIC.len();
    let len = u32::from_le_bytes(take(bytes, at, 4)?.try_into().expect("4 bytes")) as usize;
    at += 4;
    let header: Header = serde_json::from_slice(take(bytes, at, len)?)
        .map_err(|e| ParseError::Header(e.to_string()))?;
    at += len;
    if header.dtype != DTYPE {
        return Err(ParseError::Header(format!("unsupported dtype `{}`", header.dtype)));
    }
    if let Some(m) = header.modality_id {
        if m as usize >= catalog_size {
            return Err(ParseError::UnknownModality(m));
        }
    }
    let n = header
        .dims
        .iter()
        .try_fold(1usize, |acc, d| acc.checked_mul(*d))
        .filter(|n| *n > 0)
        .ok_or_else(|| ParseError::Header(format!("bad dims {:?}", header.dims)))?;
    let payload = take(bytes, at, n * 4)?;
    at += n * 4;
    let stored = u32::from_le_bytes(take(bytes, at, 4)?.try_into().expect("4 bytes"));
    at += 4;
    let computed = crc32fast::hash(payload);
    if stored != computed {
        return Err(ParseError::Checksum { stored, computed });
    }
    if at != bytes.len() {
        return Err(ParseError::TrailingBytes(bytes.len() - at));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok(VolumeRecord {
        subject_id: header.subject_id,
        modality: header.modality_id.map(ModalityId),
        volume: Volume { dims: header.dims, data },
    })
}

pub fn write_volume(path: &Path, rec: &VolumeRecord) -> Result<()> {
    fs::write(path, encode(rec))?;
    Ok(())
}

pub fn read_volume(path: &Path, catalog_size: usize) -> Result<VolumeRecord> {
    let bytes = fs::read(path)?;
    decode(&bytes, catalog_size).map_err(|source| Error::Parse { path: path.to_path_buf(), source })
}

pub fn volume_file_name(subject: u32, modality: Option<ModalityId>) -> String {
    match modality {
        Some(m) => format!("s{subject:05}_m{}.rvol", m.0),
        None => format!("s{subject:05}_mask.rvol"),
    }
}

/// Writes one file per modality plus the mask; returns the file names.
pub fn write_subject(dir: &Path, sample: &SubjectSample) -> Result<Vec<String>> {
    let mut files = Vec::new();
    let mut emit = |modality: Option<ModalityId>, volume: &Volume| -> Result<()> {
        let name = volume_file_name(sample.id, modality);
        let rec = VolumeRecord { subject_id: sample.id, modality, volume: volume.clone() };
        write_volume(&dir.join(&name), &rec)?;
        files.push(name);
        Ok(())
    };
    for (m, v) in &sample.volumes {
        emit(Some(*m), v)?;
    }
    if let Some(mask) = &sample.mask {
        emit(None, mask)?;
    }
    Ok(files)
}

/// Reassembles a subject from its files.
pub fn read_subject(dir: &Path, files: &[String], catalog_size: usize) -> Result<SubjectSample> {
    let mut list = Vec::new();
    let mut mask = None;
    let mut id = None;
    for f in files {
        let rec = read_volume(&dir.join(f), catalog_size)?;
        if *id.get_or_insert(rec.subject_id) != rec.subject_id {
            return Err(Error::contract(format!(
                "{f} belongs to subject {}, expected {}",
                rec.subject_id,
                id.unwrap_or_default()
            )));
        }
        match rec.modality {
            Some(m) => list.push((m, rec.volume)),
            None => mask = Some(rec.volume),
        }
    }
    let id = id.ok_or_else(|| Error::EmptyInput("subject with no files".into()))?;
    SubjectSample::from_list(id, list, mask)
}
