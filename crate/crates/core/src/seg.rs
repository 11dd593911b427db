//! UNETR-style segmentation heads on top of the pretrained encoder.
//!
//! The adaptive head tokenizes each present modality with the dynamic
//! tokenizer, encodes the full sequence and max-pools every tapped encoder
//! state over the modality axis, so it accepts any non-empty modality subset.
//! Its full-resolution input skip filters each modality with that modality's
//! own kernel and pools the results the same way.
//! The concat head stacks the whole catalog as input channels, zero-filling
//! absent modalities, and embeds it with an ordinary patch convolution.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::data::{ModalityId, SubjectSample};
use crate::dct;
use crate::embed::{assemble_unmasked, MaskPlan, PosScheme};
use crate::error::{Error, Result};
use crate::mae::{self, encoder_pos};
use crate::params::{Bound, Init, Params};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::vit::{self, VitConfig};

pub const CPATCH_W: &str = "cpatch.w";
pub const CPATCH_B: &str = "cpatch.b";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Adaptive,
    Concat,
}

impl std::str::FromStr for HeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adaptive" => Ok(HeadKind::Adaptive),
            "concat" => Ok(HeadKind::Concat),
            other => Err(Error::Config(format!("unknown head `{other}` (expected adaptive or concat)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    pub kind: HeadKind,
    /// Channels at the half-resolution and full-resolution decoder levels.
    pub channels: [usize; 2],
    /// Channels of the full-resolution input skip.
    pub input_channels: usize,
    pub dice_smooth: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig { kind: HeadKind::Adaptive, channels: [16, 8], input_channels: 8, dice_smooth: 1e-5 }
    }
}

/// 1-based encoder blocks feeding the three skip paths; the bottleneck uses
/// the normalised final output.
pub fn tap_blocks(depth: usize) -> [usize; 3] {
    [1, 2, 3].map(|j| (j * depth / 4).max(1))
}

fn check(vit: &VitConfig, head: &HeadConfig) -> Result<()> {
    vit.validate()?;
    if vit.patch != 4 {
        return Err(Error::Config(format!("segmentation head needs patch size 4, got {}", vit.patch)));
    }
    if vit.depth == 0 {
        return Err(Error::Config("segmentation head needs at least one encoder block".into()));
    }
    if head.channels.contains(&0) || head.input_channels == 0 || head.dice_smooth <= 0.0 {
        return Err(Error::Config("head channels and dice smoothing must be positive".into()));
    }
    Ok(())
}

fn conv_init<S: Scalar>(p: &mut Params<S>, init: &mut Init, name: &str, shape: [usize; 5], fan_in: usize) {
    let bound = (3.0 / fan_in as f64).sqrt();
    p.insert(format!("{name}.w"), init.uniform(&shape, bound));
    p.insert(format!("{name}.b"), Tensor::zeros([shape[0]]));
}

fn deconv_init<S: Scalar>(p: &mut Params<S>, init: &mut Init, name: &str, ci: usize, co: usize) {
    let bound = (3.0 / ci as f64).sqrt();
    p.insert(format!("{name}.w"), init.uniform(&[ci, co, 2, 2, 2], bound));
    p.insert(format!("{name}.b"), Tensor::zeros([co]));
}

/// Name of the full-resolution input convolution. The adaptive head keeps one
/// per catalog modality so each contrast gets its own filters before pooling.
fn input_conv(kind: HeadKind, m: ModalityId) -> String {
    match kind {
        HeadKind::Adaptive => format!("seg.in{}", m.0),
        HeadKind::Concat => "seg.in".to_string(),
    }
}

/// Decoder head parameters (`seg.*`).
pub fn init_head<S: Scalar>(p: &mut Params<S>, init: &mut Init, vit: &VitConfig, head: &HeadConfig) {
    let e = vit.embed_dim;
    let [c0, c1] = head.channels;
    let ci = head.input_channels;
    deconv_init(p, init, "seg.up4", e, c0);
    deconv_init(p, init, "seg.skip3", e, c0);
    deconv_init(p, init, "seg.skip2", e, c0);
    conv_init(p, init, "seg.fuse1", [c0, 3 * c0, 3, 3, 3], 3 * c0 * 27);
    deconv_init(p, init, "seg.up1", c0, c1);
    deconv_init(p, init, "seg.skip1a", e, c0);
    deconv_init(p, init, "seg.skip1b", c0, c1);
    match head.kind {
        HeadKind::Adaptive => {
            for m in 0..vit.num_modalities {
                conv_init(p, init, &input_conv(head.kind, ModalityId(m as u32)), [ci, 1, 3, 3, 3], 27);
            }
        }
        HeadKind::Concat => {
            let c = vit.num_modalities;
            conv_init(p, init, "seg.in", [ci, c, 3, 3, 3], c * 27);
        }
    }
    conv_init(p, init, "seg.fuse2", [c1, 2 * c1 + ci, 3, 3, 3], (2 * c1 + ci) * 27);
    conv_init(p, init, "seg.out", [1, c1, 1, 1, 1], c1);
}

/// Binary lesion prediction.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationMask {
    pub dims: [usize; 3],
    pub prob: Vec<f64>,
    pub binary: Vec<bool>,
}

impl SegmentationMask {
    pub fn from_logits<S: Scalar>(dims: [usize; 3], logits: &[S]) -> Self {
        let prob: Vec<f64> = logits.iter().map(|z| 1.0 / (1.0 + (-z.as_f64()).exp())).collect();
        let binary = prob.iter().map(|p| *p > 0.5).collect();
        SegmentationMask { dims, prob, binary }
    }
}

/// A fine-tuning model: encoder side plus one segmentation head.
#[derive(Clone, Debug, PartialEq)]
pub struct SegModel<S> {
    pub vit: VitConfig,
    pub head: HeadConfig,
    pub params: Params<S>,
}

impl<S: Scalar> SegModel<S> {
    pub fn init(vit: VitConfig, head: HeadConfig, seed: u64) -> Result<Self> {
        check(&vit, &head)?;
        let mut init = Init::new(seed);
        let mut p = Params::new();
        match head.kind {
            HeadKind::Adaptive => mae::init_encoder_params(&mut p, &mut init, &vit),
            HeadKind::Concat => {
                let k = vit.patch;
                let c = vit.num_modalities;
                let bound = 1.0 / ((c * k * k * k) as f64).sqrt();
                p.insert(CPATCH_W, init.uniform(&[vit.embed_dim, c, k, k, k], bound));
                p.insert(CPATCH_B, init.uniform(&[vit.embed_dim], bound));
                if vit.pos_scheme == PosScheme::Learnable {
                    p.insert(mae::ENC_POS, init.normal(&[vit.patches(), vit.embed_dim], 0.02));
                }
                vit::init_encoder(&mut p, &mut init, &vit);
            }
        }
        init_head(&mut p, &mut init, &vit, &head);
        Ok(SegModel { vit, head, params: p })
    }

    /// Per-voxel logits `[1, H, W, D]`.
    pub fn forward(&self, g: &mut Graph<S>, b: &Bound, subject: &SubjectSample) -> Result<Var> {
        match self.head.kind {
            HeadKind::Adaptive => adaptive_forward(g, b, &self.vit, subject),
            HeadKind::Concat => concat_forward(g, b, &self.vit, subject),
        }
    }

    pub fn predict(&self, subject: &SubjectSample) -> Result<SegmentationMask> {
        let mut g = Graph::new();
        let b = Bound::bind(&mut g, &self.params, false);
        let logits = self.forward(&mut g, &b, subject)?;
        Ok(SegmentationMask::from_logits(self.vit.volume, g.value(logits).data()))
    }
}

/// Elementwise maximum over the leading modality axis of `[N, P, E]`.
pub fn modality_pool<S: Scalar>(g: &mut Graph<S>, x: Var) -> Result<Var> {
    g.max_pool_axis(x, 0)
}

/// `[P, E]` tokens to an `[E, g, g, g]` feature volume.
fn to_grid<S: Scalar>(g: &mut Graph<S>, x: Var, grid: [usize; 3]) -> Result<Var> {
    let t = g.transpose2d(x)?;
    let e = g.shape(t)[0];
    g.reshape(t, [e, grid[0], grid[1], grid[2]])
}

fn deconv<S: Scalar>(g: &mut Graph<S>, b: &Bound, name: &str, x: Var) -> Result<Var> {
    let w = b.var(&format!("{name}.w"))?;
    let bias = b.var(&format!("{name}.b"))?;
    g.conv_transpose3d(x, w, Some(bias), 2)
}

fn conv<S: Scalar>(g: &mut Graph<S>, b: &Bound, name: &str, x: Var, pad: usize) -> Result<Var> {
    let w = b.var(&format!("{name}.w"))?;
    let bias = b.var(&format!("{name}.b"))?;
    g.conv3d(x, w, Some(bias), 1, pad)
}

/// Shared decoder: three `[P, E]` skips, the `[P, E]` bottleneck and the
/// full-resolution input features `[C_in_skip, H, W, D]`.
fn decode_head<S: Scalar>(
    g: &mut Graph<S>,
    b: &Bound,
    vit: &VitConfig,
    skips: [Var; 3],
    bottleneck: Var,
    input: Var,
) -> Result<Var> {
    let grid = vit.grid();
    let z4 = to_grid(g, bottleneck, grid)?;
    let z3 = to_grid(g, skips[2], grid)?;
    let z2 = to_grid(g, skips[1], grid)?;
    let z1 = to_grid(g, skips[0], grid)?;

    let up4 = deconv(g, b, "seg.up4", z4)?;
    let s3 = deconv(g, b, "seg.skip3", z3)?;
    let s2 = deconv(g, b, "seg.skip2", z2)?;
    let h = g.concat(&[up4, s3, s2])?;
    let h = conv(g, b, "seg.fuse1", h, 1)?;
    let h = g.gelu(h);

    let up = deconv(g, b, "seg.up1", h)?;
    let s1 = deconv(g, b, "seg.skip1a", z1)?;
    let s1 = g.gelu(s1);
    let s1 = deconv(g, b, "seg.skip1b", s1)?;
    let h = g.concat(&[up, s1, input])?;
    let h = conv(g, b, "seg.fuse2", h, 1)?;
    let h = g.gelu(h);
    conv(g, b, "seg.out", h, 0)
}

fn taps(enc: &vit::Encoded, depth: usize) -> [Var; 3] {
    tap_blocks(depth).map(|i| enc.taps[i - 1])
}

/// Adaptive head forward pass; no masking, any non-empty modality subset.
pub fn adaptive_forward<S: Scalar>(g: &mut Graph<S>, b: &Bound, vit: &VitConfig, subject: &SubjectSample) -> Result<Var> {
    let tokens = mae::tokenize_subject(g, b, vit, subject)?;
    let n = tokens.len();
    let p = vit.patches();
    let e = vit.embed_dim;
    let pos = encoder_pos(g, b, vit)?;
    let embed = b.var(dct::MODALITY_EMBED)?;
    let full = MaskPlan::visible(p);
    let plans = vec![&full; n];
    let (seq, _) = assemble_unmasked(g, &tokens, &plans, pos, embed)?;
    let enc = vit::encode(g, b, vit, seq)?;

    let pool = |g: &mut Graph<S>, x: Var| -> Result<Var> {
        let r = g.reshape(x, [n, p, e])?;
        modality_pool(g, r)
    };
    let [t1, t2, t3] = taps(&enc, vit.depth);
    let skips = [pool(g, t1)?, pool(g, t2)?, pool(g, t3)?];
    let bottleneck = pool(g, enc.out)?;

    let [h, w, d] = vit.volume;
    let mut feats = Vec::with_capacity(n);
    for (m, vol) in &subject.volumes {
        let x = g.constant(vol.to_tensor());
        if !b.has(&format!("{}.w", input_conv(HeadKind::Adaptive, *m))) {
            return Err(Error::UnknownModality(m.0));
        }
        let f = conv(g, b, &input_conv(HeadKind::Adaptive, *m), x, 1)?;
        feats.push(g.gelu(f));
    }
    let stacked = g.concat(&feats)?;
    let ci = g.shape(stacked)[0] / n;
    let stacked = g.reshape(stacked, [n, ci * h * w * d])?;
    let pooled = modality_pool(g, stacked)?;
    let input = g.reshape(pooled, [ci, h, w, d])?;
    decode_head(g, b, vit, skips, bottleneck, input)
}

/// `[C, H, W, D]` catalog-ordered stack with zeros for absent modalities.
pub fn concat_input<S: Scalar>(vit: &VitConfig, subject: &SubjectSample) -> Result<Tensor<S>> {
    let dims = subject.dims()?;
    if dims != vit.volume {
        return Err(Error::dim("volume", format!("subject extent {dims:?}, model expects {:?}", vit.volume)));
    }
    let c = vit.num_modalities;
    let v: usize = dims.iter().product();
    let mut data = vec![S::zero(); c * v];
    for (m, vol) in &subject.volumes {
        if m.index() >= c {
            return Err(Error::UnknownModality(m.0));
        }
        for (dst, src) in data[m.index() * v..(m.index() + 1) * v].iter_mut().zip(&vol.data) {
            *dst = S::lit(f64::from(*src));
        }
    }
    Tensor::new([c, dims[0], dims[1], dims[2]], data)
}

/// Concat head forward pass on an explicit `[C, H, W, D]` input.
pub fn concat_forward_tensor<S: Scalar>(g: &mut Graph<S>, b: &Bound, vit: &VitConfig, input: Tensor<S>) -> Result<Var> {
    let x = g.constant(input);
    let w = b.var(CPATCH_W)?;
    let bias = b.var(CPATCH_B)?;
    let y = g.conv3d(x, w, Some(bias), vit.patch, 0)?;
    let e = vit.embed_dim;
    let flat = g.reshape(y, [e, vit.patches()])?;
    let tokens = g.transpose2d(flat)?;
    let pos = encoder_pos(g, b, vit)?;
    let seq = g.add(tokens, pos)?;
    let enc = vit::encode(g, b, vit, seq)?;
    let skips = taps(&enc, vit.depth);
    let f = conv(g, b, "seg.in", x, 1)?;
    let input = g.gelu(f);
    decode_head(g, b, vit, skips, enc.out, input)
}

pub fn concat_forward<S: Scalar>(g: &mut Graph<S>, b: &Bound, vit: &VitConfig, subject: &SubjectSample) -> Result<Var> {
    concat_forward_tensor(g, b, vit, concat_input(vit, subject)?)
}

/// `1 - (2 sum(p t) + s) / (sum(p) + sum(t) + s)` with `p = sigmoid(logits)`.
pub fn dice_loss<S: Scalar>(g: &mut Graph<S>, logits: Var, target: &[bool], smooth: f64) -> Result<Var> {
    if g.value(logits).numel() != target.len() {
        return Err(Error::dim(
            "dice",
            format!("{} predictions vs {} target voxels", g.value(logits).numel(), target.len()),
        ));
    }
    let p = g.sigmoid(logits);
    let p = g.reshape(p, [target.len()])?;
    let t = g.constant(Tensor::new([target.len()], target.iter().map(|x| if *x { S::one() } else { S::zero() }).collect())?);
    let pt = g.mul(p, t)?;
    let inter = g.sum(pt);
    let num = g.scale(inter, S::lit(2.0));
    let num = g.add_scalar(num, S::lit(smooth));
    let sp = g.sum(p);
    let st = target.iter().filter(|x| **x).count() as f64;
    let den = g.add_scalar(sp, S::lit(st + smooth));
    let ratio = g.div(num, den)?;
    let neg = g.scale(ratio, -S::one());
    Ok(g.add_scalar(neg, S::one()))
}

/// Modalities a subject can feed to the concat head.
pub fn catalog_channels(vit: &VitConfig) -> Vec<ModalityId> {
    (0..vit.num_modalities as u32).map(ModalityId).collect()
}
