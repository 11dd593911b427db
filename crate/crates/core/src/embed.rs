//! Positional tables shared by all modalities, mask sampling, and assembly of
//! the visible-token sequence.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::data::ModalityId;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::seed::{mix, rng};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PosScheme {
    #[default]
    Sinusoidal,
    Learnable,
}

/// Fixed 3D sin/cos table of shape `[P, dim]`, patches in `(h, w, d)`
/// lexicographic order.
///
/// The embedding splits into three equal axis blocks of `2 * (dim / 6)`
/// channels, each an interleaved `[sin, cos]` ladder with base 10000. Channels
/// left over when `dim` is not a multiple of 6 stay zero.
pub fn sincos_3d<S: Scalar>(grid: [usize; 3], dim: usize) -> Tensor<S> {
    let block = 2 * (dim / 6);
    let pairs = block / 2;
    let p: usize = grid.iter().product();
    let mut t = Tensor::zeros([p, dim]);
    let data = t.data_mut();
    for h in 0..grid[0] {
        for w in 0..grid[1] {
            for d in 0..grid[2] {
                let row = (h * grid[1] + w) * grid[2] + d;
                for (axis, pos) in [h, w, d].into_iter().enumerate() {
                    for j in 0..pairs {
                        let omega = 10000f64.powf(-(j as f64) / pairs as f64);
                        let angle = pos as f64 * omega;
                        let base = row * dim + axis * block + 2 * j;
                        data[base] = S::lit(angle.sin());
                        data[base + 1] = S::lit(angle.cos());
                    }
                }
            }
        }
    }
    t
}

/// One embedding row per patch location, independent of modality.
#[derive(Clone, Debug, PartialEq)]
pub struct PositionTable<S> {
    pub grid: [usize; 3],
    pub scheme: PosScheme,
    pub table: Tensor<S>,
}

impl<S: Scalar> PositionTable<S> {
    pub fn sinusoidal(grid: [usize; 3], dim: usize) -> Self {
        PositionTable { grid, scheme: PosScheme::Sinusoidal, table: sincos_3d(grid, dim) }
    }

    pub fn patch_index(&self, at: [usize; 3]) -> Result<usize> {
        for a in 0..3 {
            if at[a] >= self.grid[a] {
                return Err(Error::Bounds(format!("patch {at:?} outside grid {:?}", self.grid)));
            }
        }
        Ok((at[0] * self.grid[1] + at[1]) * self.grid[2] + at[2])
    }

    pub fn embedding(&self, at: [usize; 3]) -> Result<&[S]> {
        let i = self.patch_index(at)?;
        let dim = self.table.row_len();
        Ok(&self.table.data()[i * dim..(i + 1) * dim])
    }
}

/// Which patches of one modality are hidden.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPlan {
    pub masked: Vec<bool>,
    pub ratio: f64,
    pub seed: u64,
}

impl MaskPlan {
    /// Plan with nothing masked.
    pub fn visible(p: usize) -> Self {
        MaskPlan { masked: vec![false; p], ratio: 0.0, seed: 0 }
    }

    pub fn len(&self) -> usize {
        self.masked.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masked.is_empty()
    }

    pub fn masked_count(&self) -> usize {
        self.masked.iter().filter(|m| **m).count()
    }

    pub fn visible_indices(&self) -> Vec<usize> {
        (0..self.masked.len()).filter(|i| !self.masked[*i]).collect()
    }

    pub fn masked_indices(&self) -> Vec<usize> {
        (0..self.masked.len()).filter(|i| self.masked[*i]).collect()
    }
}

/// Number of masked patches for a ratio: `floor(ratio * p)`.
pub fn masked_count(p: usize, ratio: f64) -> usize {
    // Guard against 0.7 * 10 = 6.999... style representation error.
    (((ratio * p as f64) + 1e-9).floor() as usize).min(p)
}

/// Uniform subset of `floor(ratio * p)` patches via a seeded shuffle of `0..p`.
pub fn sample_mask(p: usize, ratio: f64, seed: u64) -> Result<MaskPlan> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::Config(format!("masking ratio {ratio} outside [0, 1]")));
    }
    let mut order: Vec<usize> = (0..p).collect();
    order.shuffle(&mut rng(seed));
    let mut masked = vec![false; p];
    for &i in &order[..masked_count(p, ratio)] {
        masked[i] = true;
    }
    Ok(MaskPlan { masked, ratio, seed })
}

/// Per-modality mask seed, fresh for every epoch.
pub fn mask_seed(seed: u64, epoch: u64, subject: u32, modality: ModalityId) -> u64 {
    mix(&[seed, epoch, u64::from(subject), u64::from(modality.0)])
}

/// `(modality, patch)` for every slot of an assembled sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IndexMap {
    pub slots: Vec<(ModalityId, usize)>,
}

impl IndexMap {
    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn position(&self, m: ModalityId, patch: usize) -> Option<usize> {
        self.slots.iter().position(|s| *s == (m, patch))
    }
}

/// Adds positional and modality embeddings to each modality's `[P, E]` tokens,
/// keeps the visible ones, and concatenates them modality-major in patch order.
///
/// `pos` is `[P, E]`; `modality_embed` is `[M, E]` indexed by modality id.
pub fn assemble_unmasked<S: Scalar>(
    g: &mut Graph<S>,
    tokens: &[(ModalityId, Var)],
    plans: &[&MaskPlan],
    pos: Var,
    modality_embed: Var,
) -> Result<(Var, IndexMap)> {
    if tokens.is_empty() {
        return Err(Error::EmptyInput("no modalities to assemble".into()));
    }
    if tokens.len() != plans.len() {
        return Err(Error::contract(format!("{} token sets but {} mask plans", tokens.len(), plans.len())));
    }
    let p = g.shape(tokens[0].1)[0];
    if g.shape(pos)[0] != p {
        return Err(Error::dim("patches", format!("position table has {} rows for {p} patches", g.shape(pos)[0])));
    }
    let mut parts = Vec::with_capacity(tokens.len());
    let mut slots = Vec::new();
    for ((m, t), plan) in tokens.iter().zip(plans) {
        let pm = g.shape(*t)[0];
        if pm != p || plan.len() != p {
            return Err(Error::dim(
                format!("modality {m}"),
                format!("{pm} tokens / {} mask entries, expected {p}", plan.len()),
            ));
        }
        if m.index() >= g.shape(modality_embed)[0] {
            return Err(Error::UnknownModality(m.0));
        }
        let with_pos = g.add(*t, pos)?;
        let row = g.gather_rows(modality_embed, &[m.index()])?;
        let embedded = g.add_row(with_pos, row)?;
        let keep = plan.visible_indices();
        slots.extend(keep.iter().map(|i| (*m, *i)));
        parts.push(g.gather_rows(embedded, &keep)?);
    }
    let seq = g.concat(&parts)?;
    Ok((seq, IndexMap { slots }))
}
