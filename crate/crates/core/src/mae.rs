//! Masked autoencoder over a variable set of modalities.

use std::collections::BTreeMap;

use crate::autograd::{Graph, Var};
use crate::data::{ModalityId, SubjectSample};
use crate::dct::{self, DctVars};
use crate::embed::{assemble_unmasked, mask_seed, sample_mask, sincos_3d, IndexMap, MaskPlan, PosScheme};
use crate::error::{Error, Result};
use crate::params::{Bound, Init, Params};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::vit::{self, init_block, init_linear, init_norm, Encoded, VitConfig};

pub const ENC_POS: &str = "enc.pos";
pub const DEC_POS: &str = "dec.pos";
pub const MASK_TOKEN: &str = "dec.mask_token";
pub const DEC_MODALITY: &str = "dec.modality";

/// Adds tokenizer, embedding and encoder parameters.
pub fn init_encoder_params<S: Scalar>(p: &mut Params<S>, init: &mut Init, cfg: &VitConfig) {
    dct::init_params(p, init, cfg.embed_dim, cfg.modality_dim, cfg.num_modalities, cfg.patch);
    if cfg.pos_scheme == PosScheme::Learnable {
        p.insert(ENC_POS, init.normal(&[cfg.patches(), cfg.embed_dim], 0.02));
    }
    vit::init_encoder(p, init, cfg);
}

/// Full pretraining parameter set: encoder side plus decoder.
pub fn init_params<S: Scalar>(cfg: &VitConfig, seed: u64) -> Result<Params<S>> {
    cfg.validate()?;
    let mut init = Init::new(seed);
    let mut p = Params::new();
    init_encoder_params(&mut p, &mut init, cfg);
    init_linear(&mut p, &mut init, "dec.embed", cfg.dec_dim, cfg.embed_dim);
    p.insert(MASK_TOKEN, init.normal(&[1, cfg.dec_dim], 0.02));
    p.insert(DEC_MODALITY, init.normal(&[cfg.num_modalities, cfg.dec_dim], 0.02));
    if cfg.pos_scheme == PosScheme::Learnable {
        p.insert(DEC_POS, init.normal(&[cfg.patches(), cfg.dec_dim], 0.02));
    }
    for i in 0..cfg.dec_depth {
        init_block(&mut p, &mut init, &format!("dec.blk{i}"), cfg.dec_dim, cfg.mlp_ratio);
    }
    init_norm(&mut p, "dec.norm", cfg.dec_dim);
    init_linear(&mut p, &mut init, "dec.pred", cfg.patch_voxels(), cfg.dec_dim);
    Ok(p)
}

/// Whether a parameter belongs to the pretraining decoder.
pub fn is_decoder_param(name: &str) -> bool {
    name.starts_with("dec.")
}

fn pos_var<S: Scalar>(g: &mut Graph<S>, b: &Bound, cfg: &VitConfig, name: &str, dim: usize) -> Result<Var> {
    match cfg.pos_scheme {
        PosScheme::Sinusoidal => Ok(g.constant(sincos_3d(cfg.grid(), dim))),
        PosScheme::Learnable => b.var(name),
    }
}

/// Encoder position table as a graph node.
pub fn encoder_pos<S: Scalar>(g: &mut Graph<S>, b: &Bound, cfg: &VitConfig) -> Result<Var> {
    pos_var(g, b, cfg, ENC_POS, cfg.embed_dim)
}

/// `[P, k^3]` patch matrix of a `[H, W, D]` volume, patches in `(h, w, d)`
/// order and voxels within a patch in `(i, j, l)` order.
pub fn patchify<S: Scalar>(dims: [usize; 3], data: &[S], patch: usize) -> Result<Tensor<S>> {
    let [h, w, d] = dims;
    for (axis, e) in ["H", "W", "D"].iter().zip(dims) {
        if patch == 0 || e % patch != 0 {
            return Err(Error::dim(*axis, format!("extent {e} not divisible by patch size {patch}")));
        }
    }
    if data.len() != h * w * d {
        return Err(Error::dim("volume", format!("{dims:?} needs {} voxels, got {}", h * w * d, data.len())));
    }
    let g = dims.map(|e| e / patch);
    let k3 = patch * patch * patch;
    let mut out = Vec::with_capacity(h * w * d);
    for ph in 0..g[0] {
        for pw in 0..g[1] {
            for pd in 0..g[2] {
                for i in 0..patch {
                    for j in 0..patch {
                        let base = ((ph * patch + i) * w + pw * patch + j) * d + pd * patch;
                        out.extend_from_slice(&data[base..base + patch]);
                    }
                }
            }
        }
    }
    Tensor::new([g.iter().product::<usize>(), k3], out)
}

/// Inverse of [`patchify`].
pub fn unpatchify<S: Scalar>(dims: [usize; 3], patches: &Tensor<S>, patch: usize) -> Result<Vec<S>> {
    let [h, w, d] = dims;
    let g = dims.map(|e| e / patch);
    let k3 = patch * patch * patch;
    if patches.shape() != [g.iter().product::<usize>(), k3] {
        return Err(Error::dim("patches", format!("{:?} does not tile {dims:?}", patches.shape())));
    }
    let mut out = vec![S::zero(); h * w * d];
    let src = patches.data();
    let mut at = 0;
    for ph in 0..g[0] {
        for pw in 0..g[1] {
            for pd in 0..g[2] {
                for i in 0..patch {
                    for j in 0..patch {
                        let base = ((ph * patch + i) * w + pw * patch + j) * d + pd * patch;
                        out[base..base + patch].copy_from_slice(&src[at..at + patch]);
                        at += patch;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Tokenizes every present modality in id order.
pub fn tokenize_subject<S: Scalar>(
    g: &mut Graph<S>,
    b: &Bound,
    cfg: &VitConfig,
    subject: &SubjectSample,
) -> Result<Vec<(ModalityId, Var)>> {
    let dims = subject.dims()?;
    if dims != cfg.volume {
        return Err(Error::dim("volume", format!("subject extent {dims:?}, model expects {:?}", cfg.volume)));
    }
    let dct = DctVars::from_bound(b)?;
    let vectors = b.var(dct::MODALITY_VECTORS)?;
    let mut out = Vec::with_capacity(subject.num_modalities());
    for (m, vol) in &subject.volumes {
        if m.index() >= cfg.num_modalities {
            return Err(Error::UnknownModality(m.0));
        }
        let x = g.constant(vol.to_tensor());
        let mv = dct::modality_vector(g, vectors, m.index())?;
        out.push((*m, dct::tokenize(g, x, mv, &dct, cfg.patch)?));
    }
    Ok(out)
}

/// Per-modality plans for one subject and epoch.
pub fn sample_plans(
    subject: &SubjectSample,
    patches: usize,
    ratio: f64,
    seed: u64,
    epoch: u64,
) -> Result<BTreeMap<ModalityId, MaskPlan>> {
    subject
        .modalities()
        .into_iter()
        .map(|m| Ok((m, sample_mask(patches, ratio, mask_seed(seed, epoch, subject.id, m))?)))
        .collect()
}

fn plans_for<'a>(
    tokens: &[(ModalityId, Var)],
    plans: &'a BTreeMap<ModalityId, MaskPlan>,
) -> Result<Vec<&'a MaskPlan>> {
    tokens
        .iter()
        .map(|(m, _)| plans.get(m).ok_or_else(|| Error::contract(format!("no mask plan for modality {m}"))))
        .collect()
}

/// Tokenizes, masks and encodes a subject.
pub fn encode_subject<S: Scalar>(
    g: &mut Graph<S>,
    b: &Bound,
    cfg: &VitConfig,
    subject: &SubjectSample,
    plans: &BTreeMap<ModalityId, MaskPlan>,
) -> Result<(Encoded, IndexMap)> {
    let tokens = tokenize_subject(g, b, cfg, subject)?;
    let pos = encoder_pos(g, b, cfg)?;
    let embed = b.var(dct::MODALITY_EMBED)?;
    let (seq, map) = assemble_unmasked(g, &tokens, &plans_for(&tokens, plans)?, pos, embed)?;
    Ok((vit::encode(g, b, cfg, seq)?, map))
}

/// Decoder predictions for every `(modality, patch)` slot with their targets.
pub struct ReconstructionOutput<S> {
    pub modalities: Vec<ModalityId>,
    /// `[N * P, k^3]`, modality-major.
    pub pred: Var,
    pub target: Tensor<S>,
    pub masked: Vec<bool>,
}

/// Runs the decoder over the full `N * P` sequence, filling masked slots with
/// the shared placeholder token.
pub fn decode<S: Scalar>(
    g: &mut Graph<S>,
    b: &Bound,
    cfg: &VitConfig,
    encoded: Var,
    map: &IndexMap,
    plans: &BTreeMap<ModalityId, MaskPlan>,
) -> Result<Var> {
    let p = cfg.patches();
    let u = g.shape(encoded)[0];
    if map.len() != u {
        return Err(Error::contract(format!("index map has {} slots for {u} encoded tokens", map.len())));
    }
    let mut lookup = BTreeMap::new();
    for (slot, key) in map.slots.iter().enumerate() {
        lookup.insert(*key, slot);
    }
    let mut rows = Vec::with_capacity(plans.len() * p);
    let mut pos_rows = Vec::with_capacity(plans.len() * p);
    let mut mod_rows = Vec::with_capacity(plans.len() * p);
    for (m, plan) in plans {
        if plan.len() != p {
            return Err(Error::dim(format!("modality {m}"), format!("mask plan of length {} for {p} patches", plan.len())));
        }
        for (i, masked) in plan.masked.iter().enumerate() {
            let row = match (lookup.get(&(*m, i)), masked) {
                (Some(slot), false) => *slot,
                (None, true) => u,
                _ => return Err(Error::contract(format!("index map disagrees with mask plan at ({m}, {i})"))),
            };
            rows.push(row);
            pos_rows.push(i);
            mod_rows.push(m.index());
        }
    }
    let x = vit::linear(g, b, "dec.embed", encoded)?;
    let token = b.var(MASK_TOKEN)?;
    let pool = g.concat(&[x, token])?;
    let x = g.gather_rows(pool, &rows)?;
    let pos = pos_var(g, b, cfg, DEC_POS, cfg.dec_dim)?;
    let pos = g.gather_rows(pos, &pos_rows)?;
    let x = g.add(x, pos)?;
    let mods = b.var(DEC_MODALITY)?;
    let mods = g.gather_rows(mods, &mod_rows)?;
    let mut x = g.add(x, mods)?;
    for i in 0..cfg.dec_depth {
        x = vit::block(g, b, &format!("dec.blk{i}"), x, cfg.dec_heads, cfg.ln_eps)?;
    }
    let x = vit::norm(g, b, "dec.norm", x, cfg.ln_eps)?;
    vit::linear(g, b, "dec.pred", x)
}

/// Stacked `[N * P, k^3]` raw-voxel targets in id order.
pub fn patch_targets<S: Scalar>(cfg: &VitConfig, subject: &SubjectSample) -> Result<Tensor<S>> {
    let mut data = Vec::new();
    for vol in subject.volumes.values() {
        let v: Vec<S> = vol.data.iter().map(|x| S::lit(f64::from(*x))).collect();
        data.extend(patchify(vol.dims, &v, cfg.patch)?.into_data());
    }
    Tensor::new([subject.num_modalities() * cfg.patches(), cfg.patch_voxels()], data)
}

/// Mean squared error over the voxels of masked patches only.
pub fn masked_l2<S: Scalar>(g: &mut Graph<S>, out: &ReconstructionOutput<S>) -> Result<Var> {
    let idx: Vec<usize> = (0..out.masked.len()).filter(|i| out.masked[*i]).collect();
    if idx.is_empty() {
        return Err(Error::contract("no masked patches to reconstruct"));
    }
    let k3 = out.target.row_len();
    let mut t = Vec::with_capacity(idx.len() * k3);
    for &i in &idx {
        t.extend_from_slice(&out.target.data()[i * k3..(i + 1) * k3]);
    }
    let target = Tensor::new([idx.len(), k3], t)?;
    let pred = g.gather_rows(out.pred, &idx)?;
    g.mse(pred, &target)
}

/// Graph nodes of one pretraining forward pass.
pub struct PretrainForward<S> {
    pub loss: Var,
    pub output: ReconstructionOutput<S>,
    pub encoded: Encoded,
    pub map: IndexMap,
}

pub fn forward_pretrain<S: Scalar>(
    g: &mut Graph<S>,
    b: &Bound,
    cfg: &VitConfig,
    subject: &SubjectSample,
    plans: &BTreeMap<ModalityId, MaskPlan>,
) -> Result<PretrainForward<S>> {
    let (encoded, map) = encode_subject(g, b, cfg, subject, plans)?;
    let pred = decode(g, b, cfg, encoded.out, &map, plans)?;
    let masked = plans.values().flat_map(|p| p.masked.iter().copied()).collect();
    let output = ReconstructionOutput {
        modalities: subject.modalities(),
        pred,
        target: patch_targets(cfg, subject)?,
        masked,
    };
    let loss = masked_l2(g, &output)?;
    Ok(PretrainForward { loss, output, encoded, map })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patchify_round_trip() {
        let dims = [4, 8, 4];
        let data: Vec<f64> = (0..128).map(f64::from).collect();
        let p = patchify(dims, &data, 2).unwrap();
        assert_eq!(p.shape(), &[16, 8]);
        assert_eq!(&p.data()[..8], &[0.0, 1.0, 4.0, 5.0, 32.0, 33.0, 36.0, 37.0]);
        assert_eq!(unpatchify(dims, &p, 2).unwrap(), data);
    }

    #[test]
    fn parameter_names_cover_decoder() {
        let p = init_params::<f64>(&VitConfig::default(), 0).unwrap();
        assert!(p.contains(MASK_TOKEN));
        assert_eq!(p.get(MASK_TOKEN).unwrap().shape(), &[1, 32]);
        assert!(p.names().filter(|n| is_decoder_param(n)).count() > 10);
        assert!(!p.contains(ENC_POS));
    }
}
