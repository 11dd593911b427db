//! Pre-norm transformer blocks and the encoder stack.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::embed::PosScheme;
use crate::error::{Error, Result};
use crate::params::{Bound, Init, Params};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Transformer and tokenizer dimensions shared by pretraining and fine-tuning.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VitConfig {
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub dec_dim: usize,
    pub dec_depth: usize,
    pub dec_heads: usize,
    pub patch: usize,
    pub volume: [usize; 3],
    pub modality_dim: usize,
    pub num_modalities: usize,
    pub pos_scheme: PosScheme,
    pub ln_eps: f64,
}

impl Default for VitConfig {
    fn default() -> Self {
        VitConfig {
            embed_dim: 64,
            depth: 4,
            heads: 4,
            mlp_ratio: 4,
            dec_dim: 32,
            dec_depth: 2,
            dec_heads: 4,
            patch: 4,
            volume: [16, 16, 16],
            modality_dim: 16,
            num_modalities: 3,
            pos_scheme: PosScheme::Sinusoidal,
            ln_eps: 1e-6,
        }
    }
}

impl VitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("embed_dim {} not divisible by heads {}", self.embed_dim, self.heads)));
        }
        if self.dec_dim == 0 || self.dec_heads == 0 || !self.dec_dim.is_multiple_of(self.dec_heads) {
            return Err(Error::Config(format!(
                "dec_dim {} not divisible by dec_heads {}",
                self.dec_dim, self.dec_heads
            )));
        }
        for (axis, e) in ["H", "W", "D"].iter().zip(self.volume) {
            if self.patch == 0 || e % self.patch != 0 {
                return Err(Error::dim(*axis, format!("extent {e} not divisible by patch size {}", self.patch)));
            }
        }
        if self.num_modalities == 0 || self.modality_dim == 0 {
            return Err(Error::Config("need at least one modality and a non-empty modality vector".into()));
        }
        Ok(())
    }

    pub fn grid(&self) -> [usize; 3] {
        self.volume.map(|e| e / self.patch)
    }

    pub fn patches(&self) -> usize {
        self.grid().iter().product()
    }

    pub fn patch_voxels(&self) -> usize {
        self.patch.pow(3)
    }
}

pub fn init_linear<S: Scalar>(p: &mut Params<S>, init: &mut Init, name: &str, fan_out: usize, fan_in: usize) {
    p.insert(format!("{name}.w"), init.xavier(fan_out, fan_in));
    p.insert(format!("{name}.b"), Tensor::zeros([fan_out]));
}

pub fn init_norm<S: Scalar>(p: &mut Params<S>, name: &str, dim: usize) {
    p.insert(format!("{name}.g"), Tensor::full([dim], S::one()));
    p.insert(format!("{name}.b"), Tensor::zeros([dim]));
}

pub fn init_block<S: Scalar>(p: &mut Params<S>, init: &mut Init, prefix: &str, dim: usize, mlp_ratio: usize) {
    init_norm(p, &format!("{prefix}.ln1"), dim);
    for name in ["q", "k", "v", "proj"] {
        init_linear(p, init, &format!("{prefix}.attn.{name}"), dim, dim);
    }
    init_norm(p, &format!("{prefix}.ln2"), dim);
    init_linear(p, init, &format!("{prefix}.mlp.fc1"), dim * mlp_ratio, dim);
    init_linear(p, init, &format!("{prefix}.mlp.fc2"), dim, dim * mlp_ratio);
}

pub fn linear<S: Scalar>(g: &mut Graph<S>, b: &Bound, name: &str, x: Var) -> Result<Var> {
    let w = b.var(&format!("{name}.w"))?;
    let bias = b.var(&format!("{name}.b"))?;
    g.linear(x, w, Some(bias))
}

pub fn norm<S: Scalar>(g: &mut Graph<S>, b: &Bound, name: &str, x: Var, eps: f64) -> Result<Var> {
    let gamma = b.var(&format!("{name}.g"))?;
    let beta = b.var(&format!("{name}.b"))?;
    g.layer_norm(x, gamma, beta, S::lit(eps))
}

/// `x + Attn(LN(x))`, then `x + MLP(LN(x))`.
pub fn block<S: Scalar>(g: &mut Graph<S>, b: &Bound, prefix: &str, x: Var, heads: usize, eps: f64) -> Result<Var> {
    let h = norm(g, b, &format!("{prefix}.ln1"), x, eps)?;
    let q = linear(g, b, &format!("{prefix}.attn.q"), h)?;
    let k = linear(g, b, &format!("{prefix}.attn.k"), h)?;
    let v = linear(g, b, &format!("{prefix}.attn.v"), h)?;
    let a = g.attention(q, k, v, heads)?;
    let a = linear(g, b, &format!("{prefix}.attn.proj"), a)?;
    let x = g.add(x, a)?;
    let h = norm(g, b, &format!("{prefix}.ln2"), x, eps)?;
    let h = linear(g, b, &format!("{prefix}.mlp.fc1"), h)?;
    let h = g.gelu(h);
    let h = linear(g, b, &format!("{prefix}.mlp.fc2"), h)?;
    g.add(x, h)
}

pub fn init_encoder<S: Scalar>(p: &mut Params<S>, init: &mut Init, cfg: &VitConfig) {
    for i in 0..cfg.depth {
        init_block(p, init, &format!("enc.blk{i}"), cfg.embed_dim, cfg.mlp_ratio);
    }
    init_norm(p, "enc.norm", cfg.embed_dim);
}

/// Encoder output after the final norm plus every block's raw output.
pub struct Encoded {
    pub out: Var,
    pub taps: Vec<Var>,
}

/// Runs the encoder blocks over a `[U, E]` sequence.
pub fn encode<S: Scalar>(g: &mut Graph<S>, b: &Bound, cfg: &VitConfig, x: Var) -> Result<Encoded> {
    if g.shape(x).first().copied().unwrap_or(0) == 0 {
        return Err(Error::EmptyInput("encoder received an empty token sequence".into()));
    }
    let mut h = x;
    let mut taps = Vec::with_capacity(cfg.depth);
    for i in 0..cfg.depth {
        h = block(g, b, &format!("enc.blk{i}"), h, cfg.heads, cfg.ln_eps)?;
        taps.push(h);
    }
    let out = norm(g, b, "enc.norm", h, cfg.ln_eps)?;
    Ok(Encoded { out, taps })
}
