//! Finite-difference checks of every differentiable op and of both heads.

mod common;

use std::collections::BTreeMap;

use amae_core::autograd::{Graph, Var};
use amae_core::data::ModalityId;
use amae_core::embed::MaskPlan;
use amae_core::mae;
use amae_core::params::{Bound, Params};
use amae_core::seg::{dice_loss, HeadConfig, HeadKind, SegModel};
use amae_core::Result;
use common::*;

const H: f64 = 1e-5;
const TOL: f64 = 1e-6;

/// `sum(y * R)` for a fixed random `R`, so every output entry matters.
fn weighted(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let r = g.constant(tensor(g.shape(y), seed));
    let p = g.mul(y, r)?;
    Ok(g.sum(p))
}

fn params(entries: &[(&str, &[usize])]) -> Params<f64> {
    let mut p = Params::new();
    for (i, (name, shape)) in entries.iter().enumerate() {
        p.insert(*name, tensor(shape, 100 + i as u64));
    }
    p
}

fn assert_close(report: Vec<GradCheck>, tol: f64) {
    for r in &report {
        assert!(r.max_rel < tol, "{}: relative error {:e} over {} entries", r.tensor, r.max_rel, r.checked);
    }
}

fn check(p: &Params<f64>, f: impl Fn(&mut Graph<f64>, &Bound) -> Result<Var>) {
    assert_close(check_gradients(p, usize::MAX, H, 1e-8, 1, f), TOL);
}

#[test]
fn elementwise_ops() {
    let p = params(&[("a", &[3, 4]), ("b", &[3, 4])]);
    check(&p, |g, b| {
        let (x, y) = (b.var("a")?, b.var("b")?);
        let s = g.add(x, y)?;
        let d = g.sub(s, y)?;
        let m = g.mul(d, y)?;
        let den = g.sigmoid(y);
        let den = g.add_scalar(den, 0.5);
        let q = g.div(m, den)?;
        let q = g.scale(q, -1.5);
        let q = g.gelu(q);
        weighted(g, q, 1)
    });
}

#[test]
fn row_broadcasts() {
    let p = params(&[("x", &[4, 3]), ("row", &[3]), ("s", &[4])]);
    check(&p, |g, b| {
        let y = g.add_row(b.var("x")?, b.var("row")?)?;
        let y = g.mul_rows(y, b.var("s")?)?;
        weighted(g, y, 2)
    });
}

#[test]
fn reductions_and_mse() {
    let p = params(&[("x", &[2, 5])]);
    let target = tensor(&[2, 5], 9);
    check(&p, |g, b| {
        let x = b.var("x")?;
        let m = g.mse(x, &target)?;
        let mean = g.mean(x);
        let s = g.add(m, mean)?;
        let sq = g.mul(s, s)?;
        Ok(g.sum(sq))
    });
}

#[test]
fn linear_and_attention() {
    let p = params(&[("x", &[5, 8]), ("w", &[8, 8]), ("bias", &[8]), ("wk", &[8, 8])]);
    check(&p, |g, b| {
        let x = b.var("x")?;
        let q = g.linear(x, b.var("w")?, Some(b.var("bias")?))?;
        let k = g.linear(x, b.var("wk")?, None)?;
        let y = g.attention(q, k, x, 2)?;
        weighted(g, y, 3)
    });
}

#[test]
fn layer_norm() {
    let p = params(&[("x", &[3, 6]), ("gamma", &[6]), ("beta", &[6])]);
    check(&p, |g, b| {
        let y = g.layer_norm(b.var("x")?, b.var("gamma")?, b.var("beta")?, 1e-6)?;
        weighted(g, y, 4)
    });
}

#[test]
fn convolutions() {
    let p = params(&[("x", &[2, 4, 4, 4]), ("w", &[3, 2, 3, 3, 3]), ("b", &[3]), ("wt", &[3, 2, 2, 2, 2]), ("bt", &[2])]);
    check(&p, |g, b| {
        let y = g.conv3d(b.var("x")?, b.var("w")?, Some(b.var("b")?), 2, 1)?;
        let y = g.conv_transpose3d(y, b.var("wt")?, Some(b.var("bt")?), 2)?;
        weighted(g, y, 5)
    });
}

#[test]
fn shape_ops() {
    let p = params(&[("x", &[4, 6]), ("y", &[2, 6])]);
    check(&p, |g, b| {
        let (x, y) = (b.var("x")?, b.var("y")?);
        let c = g.concat(&[x, y])?;
        let c = g.gather_rows(c, &[5, 0, 0, 3, 4])?;
        let s = g.slice_rows(c, 1, 3)?;
        let t = g.transpose2d(s)?;
        let r = g.reshape(t, [3, 3, 2])?;
        let m = g.max_pool_axis(r, 0)?;
        weighted(g, m, 6)
    });
}

#[test]
fn dice_loss_gradient() {
    let p = params(&[("logits", &[1, 4, 4, 4])]);
    let target: Vec<bool> = (0..64).map(|i| i % 3 == 0).collect();
    check(&p, |g, b| dice_loss(g, b.var("logits")?, &target, 1e-5));
}

#[test]
fn masked_reconstruction_tiny_model() {
    let vit = tiny_vit();
    let p = perturb(&mae::init_params(&vit, 3).unwrap(), 0.05, 4);
    let s = subject_with([8, 8, 8], 2, &[0, 2]);
    let plans = mae::sample_plans(&s, vit.patches(), 0.5, 5, 0).unwrap();
    assert_close(
        check_gradients(&p, 24, H, TOL, 7, |g, b| Ok(mae::forward_pretrain(g, b, &vit, &s, &plans)?.loss)),
        1e-4,
    );
}

fn seg_check(kind: HeadKind, mods: &[u32]) {
    let vit = tiny_vit();
    let head = HeadConfig { kind, channels: [4, 3], input_channels: 2, ..HeadConfig::default() };
    let model = SegModel::<f64>::init(vit.clone(), head, 8).unwrap();
    let p = perturb(&model.params, 0.02, 9);
    let s = subject_with([8, 8, 8], 3, mods);
    let target = s.mask.as_ref().unwrap().to_binary();
    let model = SegModel { params: p.clone(), ..model };
    assert_close(
        check_gradients(&p, 16, H, TOL, 10, |g, b| {
            let logits = model.forward(g, b, &s)?;
            dice_loss(g, logits, &target, 1e-5)
        }),
        1e-4,
    );
}

#[test]
fn adaptive_head_gradient() {
    seg_check(HeadKind::Adaptive, &[0, 1, 2]);
}

#[test]
fn concat_head_gradient() {
    seg_check(HeadKind::Concat, &[0, 1]);
}

#[test]
fn unmasked_plan_reaches_no_mask_token() {
    let vit = tiny_vit();
    let p = mae::init_params::<f64>(&vit, 1).unwrap();
    let s = subject_with([8, 8, 8], 1, &[1]);
    let mut plans = BTreeMap::new();
    let mut plan = MaskPlan::visible(vit.patches());
    plan.masked[3] = true;
    plans.insert(ModalityId(1), plan);
    let grads = analytic(&p, &|g: &mut Graph<f64>, b: &Bound| Ok(mae::forward_pretrain(g, b, &vit, &s, &plans)?.loss));
    assert!(grads.get(mae::MASK_TOKEN).unwrap().data().iter().any(|x| *x != 0.0));
}
