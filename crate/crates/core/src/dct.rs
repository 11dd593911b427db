//! Dynamic convolution tokenizer.
//!
//! A learnable projector maps each modality vector `m` to a per-channel weight
//! scale `w_conv` and bias scale `b_conv`. These rescale one shared patch
//! embedding convolution, so every contrast is tokenized by its own modulated
//! copy of the same kernel.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, Init, Params};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const W_BASE: &str = "dct.w_base";
pub const B_BASE: &str = "dct.b_base";
pub const PROJ_W: &str = "dct.proj.w";
pub const PROJ_B: &str = "dct.proj.b";
pub const MODALITY_VECTORS: &str = "modality.vectors";
pub const MODALITY_EMBED: &str = "modality.embed";

/// Graph handles of the shared tokenizer parameters.
#[derive(Clone, Copy, Debug)]
pub struct DctVars {
    pub w_base: Var,
    pub b_base: Var,
    pub proj_w: Var,
    pub proj_b: Var,
}

impl DctVars {
    pub fn from_bound(b: &Bound) -> Result<Self> {
        Ok(DctVars {
            w_base: b.var(W_BASE)?,
            b_base: b.var(B_BASE)?,
            proj_w: b.var(PROJ_W)?,
            proj_b: b.var(PROJ_B)?,
        })
    }
}

/// Adds tokenizer parameters and per-modality vectors/embeddings.
///
/// The projector starts at zero weights and unit bias, so every modality is
/// initially tokenized by the unmodulated shared kernel.
pub fn init_params<S: Scalar>(
    p: &mut Params<S>,
    init: &mut Init,
    embed_dim: usize,
    modality_dim: usize,
    num_modalities: usize,
    patch: usize,
) {
    let fan_in = patch * patch * patch;
    let bound = 1.0 / (fan_in as f64).sqrt();
    p.insert(W_BASE, init.uniform(&[embed_dim, 1, patch, patch, patch], bound));
    p.insert(B_BASE, init.uniform(&[embed_dim], bound));
    p.insert(PROJ_W, Tensor::zeros([2 * embed_dim, modality_dim]));
    p.insert(PROJ_B, Tensor::full([2 * embed_dim], S::one()));
    p.insert(MODALITY_VECTORS, init.normal(&[num_modalities, modality_dim], 0.02));
    p.insert(MODALITY_EMBED, init.normal(&[num_modalities, embed_dim], 0.02));
}

/// Projects a modality vector `[l]` and splits the result into
/// `(w_conv, b_conv)`, each of length `E`.
pub fn dynamic_params<S: Scalar>(g: &mut Graph<S>, m: Var, proj_w: Var, proj_b: Var) -> Result<(Var, Var)> {
    let l = g.value(m).numel();
    let pw = g.shape(proj_w).to_vec();
    if pw.len() != 2 || pw[1] != l {
        return Err(Error::dim("modality vector", format!("length {l} does not match projector {pw:?}")));
    }
    if !pw[0].is_multiple_of(2) {
        return Err(Error::dim("projector", format!("output length {} is not 2E", pw[0])));
    }
    let e = pw[0] / 2;
    let row = g.reshape(m, [1, l])?;
    let out = g.linear(row, proj_w, Some(proj_b))?;
    let flat = g.reshape(out, [2 * e])?;
    let w_conv = g.slice_rows(flat, 0, e)?;
    let b_conv = g.slice_rows(flat, e, e)?;
    Ok((w_conv, b_conv))
}

/// `W_updated[c, ...] = W_base[c, ...] * w_conv[c]`, `B_updated[c] = B_base[c] * b_conv[c]`.
pub fn modulate<S: Scalar>(g: &mut Graph<S>, w_base: Var, b_base: Var, w_conv: Var, b_conv: Var) -> Result<(Var, Var)> {
    let w = g.mul_rows(w_base, w_conv)?;
    let b = g.mul(b_base, b_conv)?;
    Ok((w, b))
}

/// Tokenizes a `[1, H, W, D]` volume into `[P, E]` with `P = HWD / k^3`,
/// patches in `(h, w, d)` lexicographic order.
pub fn tokenize<S: Scalar>(g: &mut Graph<S>, volume: Var, m: Var, dct: &DctVars, patch: usize) -> Result<Var> {
    let vs = g.shape(volume).to_vec();
    if vs.len() != 4 || vs[0] != 1 {
        return Err(Error::dim("volume", format!("expected [1, H, W, D], got {vs:?}")));
    }
    for (axis, extent) in ["H", "W", "D"].iter().zip(&vs[1..]) {
        if patch == 0 || extent % patch != 0 {
            return Err(Error::dim(*axis, format!("extent {extent} not divisible by patch size {patch}")));
        }
    }
    let (w_conv, b_conv) = dynamic_params(g, m, dct.proj_w, dct.proj_b)?;
    let (w, b) = modulate(g, dct.w_base, dct.b_base, w_conv, b_conv)?;
    let y = g.conv3d(volume, w, Some(b), patch, 0)?;
    let e = g.shape(y)[0];
    let p: usize = g.shape(y)[1..].iter().product();
    let flat = g.reshape(y, [e, p])?;
    g.transpose2d(flat)
}

/// Row `id` of the `[M, l]` modality-vector matrix as a `[l]` vector.
pub fn modality_vector<S: Scalar>(g: &mut Graph<S>, vectors: Var, id: usize) -> Result<Var> {
    let l = g.shape(vectors)[1];
    if id >= g.shape(vectors)[0] {
        return Err(Error::UnknownModality(id as u32));
    }
    let row = g.gather_rows(vectors, &[id])?;
    g.reshape(row, [l])
}
