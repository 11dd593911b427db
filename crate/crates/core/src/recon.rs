//! Slice dumps of original, masked and reconstructed volumes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::data::{ModalityId, SubjectSample};
use crate::embed::MaskPlan;
use crate::error::{Error, Result};
use crate::mae::{forward_pretrain, unpatchify};
use crate::params::{Bound, Params};
use crate::tensor::Tensor;
use crate::vit::VitConfig;

/// One reconstructed modality as full volumes.
#[derive(Clone, Debug, PartialEq)]
pub struct ModalityRecon {
    pub modality: ModalityId,
    pub original: Vec<f64>,
    /// Original with masked patches set to zero.
    pub masked: Vec<f64>,
    /// Original where visible, prediction inside masked patches.
    pub reconstructed: Vec<f64>,
    /// Voxel-level mask (true inside masked patches).
    pub voxel_mask: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconStats {
    pub modality: ModalityId,
    pub masked_voxels: usize,
    pub mse: f64,
    /// Predicting the mean of the visible voxels everywhere in the masked region.
    pub mean_baseline_mse: f64,
}

/// Runs the autoencoder with the given plans and reassembles volumes.
pub fn reconstruct(
    params: &Params<f64>,
    vit: &VitConfig,
    subject: &SubjectSample,
    plans: &BTreeMap<ModalityId, MaskPlan>,
) -> Result<Vec<ModalityRecon>> {
    let mut g = Graph::new();
    let b = Bound::bind(&mut g, params, false);
    if plans.values().all(|p| p.masked_count() == 0) {
        // Nothing hidden: the reconstruction is the input itself.
        return Ok(subject
            .volumes
            .iter()
            .map(|(m, v)| {
                let o: Vec<f64> = v.data.iter().map(|x| f64::from(*x)).collect();
                ModalityRecon {
                    modality: *m,
                    original: o.clone(),
                    masked: o.clone(),
                    reconstructed: o,
                    voxel_mask: vec![false; v.len()],
                }
            })
            .collect());
    }
    let fwd = forward_pretrain(&mut g, &b, vit, subject, plans)?;
    let pred = g.value(fwd.output.pred).clone();
    let p = vit.patches();
    let k3 = vit.patch_voxels();
    let mut out = Vec::new();
    for (i, (m, vol)) in subject.volumes.iter().enumerate() {
        let rows = Tensor::new([p, k3], pred.data()[i * p * k3..(i + 1) * p * k3].to_vec())?;
        let pred_vol = unpatchify(vol.dims, &rows, vit.patch)?;
        let plan = &plans[m];
        let flags = Tensor::new([p, k3], plan.masked.iter().flat_map(|f| vec![if *f { 1.0 } else { 0.0 }; k3]).collect())?;
        let voxel_mask: Vec<bool> = unpatchify(vol.dims, &flags, vit.patch)?.into_iter().map(|x| x > 0.5).collect();
        let original: Vec<f64> = vol.data.iter().map(|x| f64::from(*x)).collect();
        let masked = original.iter().zip(&voxel_mask).map(|(x, m)| if *m { 0.0 } else { *x }).collect();
        let reconstructed =
            original.iter().zip(&voxel_mask).zip(&pred_vol).map(|((x, m), p)| if *m { *p } else { *x }).collect();
        out.push(ModalityRecon { modality: *m, original, masked, reconstructed, voxel_mask });
    }
    Ok(out)
}

pub fn stats(r: &ModalityRecon) -> ReconStats {
    let visible: Vec<f64> = r.original.iter().zip(&r.voxel_mask).filter(|(_, m)| !**m).map(|(x, _)| *x).collect();
    let mean = if visible.is_empty() { 0.0 } else { visible.iter().sum::<f64>() / visible.len() as f64 };
    let (mut n, mut mse, mut base) = (0usize, 0.0, 0.0);
    for ((o, p), m) in r.original.iter().zip(&r.reconstructed).zip(&r.voxel_mask) {
        if *m {
            n += 1;
            mse += (o - p).powi(2);
            base += (o - mean).powi(2);
        }
    }
    let d = n.max(1) as f64;
    ReconStats { modality: r.modality, masked_voxels: n, mse: mse / d, mean_baseline_mse: base / d }
}

/// 2D slice `[rows, cols]` of an `[H, W, D]` volume perpendicular to `axis`.
pub fn slice(dims: [usize; 3], data: &[f64], axis: usize, index: usize) -> Result<(usize, usize, Vec<f64>)> {
    if axis > 2 {
        return Err(Error::Bounds(format!("slice axis {axis} (expected 0, 1 or 2)")));
    }
    if index >= dims[axis] {
        return Err(Error::Bounds(format!("slice index {index} on axis {axis} of extent {}", dims[axis])));
    }
    let [h, w, d] = dims;
    let at = |i: usize, j: usize, k: usize| data[(i * w + j) * d + k];
    Ok(match axis {
        0 => (w, d, (0..w).flat_map(|j| (0..d).map(move |k| (j, k))).map(|(j, k)| at(index, j, k)).collect()),
        1 => (h, d, (0..h).flat_map(|i| (0..d).map(move |k| (i, k))).map(|(i, k)| at(i, index, k)).collect()),
        _ => (h, w, (0..h).flat_map(|i| (0..w).map(move |j| (i, j))).map(|(i, j)| at(i, j, index)).collect()),
    })
}

/// Binary PGM with per-image min-max scaling; `black` pixels are forced to 0.
pub fn pgm(rows: usize, cols: usize, values: &[f64], black: Option<&[bool]>) -> Vec<u8> {
    let keep = |i: usize| black.is_none_or(|b| !b[i]);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for (i, v) in values.iter().enumerate() {
        if keep(i) {
            lo = lo.min(*v);
            hi = hi.max(*v);
        }
    }
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut out = format!("P5\n{cols} {rows}\n255\n").into_bytes();
    for (i, v) in values.iter().enumerate() {
        let px = if keep(i) { (((v - lo) / span) * 255.0).round().clamp(0.0, 255.0) as u8 } else { 0 };
        out.push(px);
    }
    out
}

/// Writes `m{id}_original.pgm`, `m{id}_masked.pgm` and `m{id}_reconstructed.pgm`.
pub fn write_slices(dir: &Path, dims: [usize; 3], recon: &[ModalityRecon], axis: usize, index: usize) -> Result<Vec<String>> {
    fs::create_dir_all(dir)?;
    let mut files = Vec::new();
    for r in recon {
        let mask_vals: Vec<f64> = r.voxel_mask.iter().map(|m| f64::from(u8::from(*m))).collect();
        let (rows, cols, mask_slice) = slice(dims, &mask_vals, axis, index)?;
        let black: Vec<bool> = mask_slice.iter().map(|x| *x > 0.5).collect();
        for (tag, vol, blk) in [
            ("original", &r.original, None),
            ("masked", &r.original, Some(black.as_slice())),
            ("reconstructed", &r.reconstructed, None),
        ] {
            let (_, _, s) = slice(dims, vol, axis, index)?;
            let name = format!("m{}_{tag}.pgm", r.modality);
            fs::write(dir.join(&name), pgm(rows, cols, &s, blk))?;
            files.push(name);
        }
    }
    Ok(files)
}
