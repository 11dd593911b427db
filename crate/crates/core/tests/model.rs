//! Model-level contracts: tokenizer, positional sharing, masking, decoder
//! slots, heads and encoder transfer.

mod common;

use std::collections::BTreeMap;

use amae_core::autograd::Graph;
use amae_core::data::{ModalityId, SubjectSample};
use amae_core::dct;
use amae_core::embed::{assemble_unmasked, sincos_3d, MaskPlan, PositionTable};
use amae_core::mae::{self, ReconstructionOutput};
use amae_core::params::Bound;
use amae_core::recon;
use amae_core::seg::{concat_forward_tensor, concat_input, HeadConfig, HeadKind, SegModel};
use amae_core::tensor::Tensor;
use amae_core::train::transfer::{transfer_encoder, Disposition};
use amae_core::vit::{self, VitConfig};
use amae_core::Error;
use common::*;

fn tokens_for(params: &amae_core::params::Params<f64>, vit: &VitConfig, vol: &amae_core::data::Volume, m: usize) -> Tensor<f64> {
    let mut g = Graph::new();
    let b = Bound::bind(&mut g, params, false);
    let d = dct::DctVars::from_bound(&b).unwrap();
    let x = g.constant(vol.to_tensor());
    let mv = dct::modality_vector(&mut g, b.var(dct::MODALITY_VECTORS).unwrap(), m).unwrap();
    let t = dct::tokenize(&mut g, x, mv, &d, vit.patch).unwrap();
    g.value(t).clone()
}

#[test]
fn unit_modulation_gives_modality_independent_tokens() {
    let vit = VitConfig::default();
    let p = mae::init_params::<f64>(&vit, 11).unwrap();
    assert_ne!(p.get(dct::MODALITY_VECTORS).unwrap().data()[..16], p.get(dct::MODALITY_VECTORS).unwrap().data()[16..32]);
    let vol = noise_volume([16, 16, 16], 1);
    let t0 = tokens_for(&p, &vit, &vol, 0);
    assert_eq!(t0.shape(), &[64, 64]);
    for m in 1..3 {
        assert_eq!(tokens_for(&p, &vit, &vol, m), t0);
    }
}

#[test]
fn tokenizer_matches_per_patch_dot_product() {
    let vit = VitConfig::default();
    let p = perturb(&mae::init_params::<f64>(&vit, 2).unwrap(), 0.1, 3);
    let vol = noise_volume([16, 16, 16], 4);
    let m = 1;
    let t = tokens_for(&p, &vit, &vol, m);
    let (pw, pb) = (p.get(dct::PROJ_W).unwrap(), p.get(dct::PROJ_B).unwrap());
    let mv = &p.get(dct::MODALITY_VECTORS).unwrap().data()[m * 16..(m + 1) * 16];
    let proj: Vec<f64> = (0..128).map(|o| pb.data()[o] + (0..16).map(|i| pw.data()[o * 16 + i] * mv[i]).sum::<f64>()).collect();
    let (wb, bb) = (p.get(dct::W_BASE).unwrap(), p.get(dct::B_BASE).unwrap());
    for patch in [0, 5, 21, 63] {
        let (ph, pw_, pd) = (patch / 16, (patch / 4) % 4, patch % 4);
        for c in [0, 17, 63] {
            let mut acc = 0.0;
            for (a, b2, d) in (0..4).flat_map(|a| (0..4).flat_map(move |b2| (0..4).map(move |d| (a, b2, d)))) {
                let x = f64::from(vol.data[vol.index(ph * 4 + a, pw_ * 4 + b2, pd * 4 + d)]);
                acc += x * wb.data()[c * 64 + (a * 4 + b2) * 4 + d] * proj[c];
            }
            acc += bb.data()[c] * proj[64 + c];
            assert!((t.data()[patch * 64 + c] - acc).abs() < 1e-12);
        }
    }
}

#[test]
fn tokenizer_rejects_indivisible_extent() {
    let vit = VitConfig::default();
    let p = mae::init_params::<f64>(&vit, 0).unwrap();
    let mut g = Graph::new();
    let b = Bound::bind(&mut g, &p, false);
    let d = dct::DctVars::from_bound(&b).unwrap();
    let x = g.constant(Tensor::zeros([1, 16, 15, 16]));
    let mv = dct::modality_vector(&mut g, b.var(dct::MODALITY_VECTORS).unwrap(), 0).unwrap();
    match dct::tokenize(&mut g, x, mv, &d, 4) {
        Err(Error::Dimension { axis, .. }) => assert_eq!(axis, "W"),
        other => panic!("{other:?}"),
    }
}

/// Every `(modality, h, w, d)` row of an assembled sequence carries the
/// positional row of `(h, w, d)` alone.
#[test]
fn positional_embedding_is_shared_across_modalities() {
    let grid = [4, 4, 4];
    let e = 64;
    let table = PositionTable::<f64>::sinusoidal(grid, e);
    let mut g = Graph::new();
    let tokens: Vec<(ModalityId, _)> = (0..3).map(|m| (ModalityId(m), g.constant(Tensor::zeros([64, e])))).collect();
    let plan = MaskPlan::visible(64);
    let pos = g.constant(table.table.clone());
    let embed = g.constant(Tensor::zeros([3, e]));
    let (seq, map) = assemble_unmasked(&mut g, &tokens, &[&plan, &plan, &plan], pos, embed).unwrap();
    let rows = g.value(seq).data();
    for m in 0..3u32 {
        for h in 0..4 {
            for w in 0..4 {
                for d in 0..4 {
                    let patch = table.patch_index([h, w, d]).unwrap();
                    let slot = map.position(ModalityId(m), patch).unwrap();
                    assert_eq!(&rows[slot * e..(slot + 1) * e], table.embedding([h, w, d]).unwrap());
                }
            }
        }
    }
}

#[test]
fn assembly_adds_modality_row_and_drops_masked() {
    let mut g = Graph::new();
    let t = g.constant(Tensor::from_fn([8, 6], |i| i as f64));
    let pos = g.constant(Tensor::zeros([8, 6]));
    let embed = g.constant(Tensor::from_fn([3, 6], |i| (i / 6) as f64 * 100.0));
    let mut plan = MaskPlan::visible(8);
    plan.masked[2] = true;
    plan.masked[7] = true;
    let (seq, map) = assemble_unmasked(&mut g, &[(ModalityId(2), t)], &[&plan], pos, embed).unwrap();
    assert_eq!(g.shape(seq), &[6, 6]);
    assert_eq!(map.slots.iter().map(|s| s.1).collect::<Vec<_>>(), vec![0, 1, 3, 4, 5, 6]);
    assert_eq!(g.value(seq).data()[2 * 6], 3.0 * 6.0 + 200.0);

    let bad = g.constant(Tensor::zeros([8, 6]));
    assert!(matches!(
        assemble_unmasked(&mut g, &[(ModalityId(3), bad)], &[&plan], pos, embed),
        Err(Error::UnknownModality(3))
    ));
}

#[test]
fn masks_are_resampled_per_modality_and_epoch() {
    let s = subject_with([16, 16, 16], 4, &[0, 1, 2]);
    let a = mae::sample_plans(&s, 64, 0.7, 3, 0).unwrap();
    let b = mae::sample_plans(&s, 64, 0.7, 3, 1).unwrap();
    assert!(a.values().all(|p| p.masked_count() == 44));
    assert_ne!(a[&ModalityId(0)].masked, a[&ModalityId(1)].masked);
    assert_ne!(a[&ModalityId(0)].masked, b[&ModalityId(0)].masked);
    assert_eq!(a, mae::sample_plans(&s, 64, 0.7, 3, 0).unwrap());
}

/// With no decoder blocks every output row depends on its own slot only,
/// so each row can be rebuilt from the parameters by hand.
#[test]
fn decoder_slots_hold_mask_token_or_encoded_row() {
    let vit = VitConfig { dec_depth: 0, ..small_vit() };
    let p = perturb(&mae::init_params::<f64>(&vit, 5).unwrap(), 0.05, 6);
    let s = subject_with([8, 8, 8], 6, &[0, 2]);
    let plans = mae::sample_plans(&s, vit.patches(), 0.5, 1, 0).unwrap();
    let mut g = Graph::new();
    let b = Bound::bind(&mut g, &p, false);
    let fwd = mae::forward_pretrain(&mut g, &b, &vit, &s, &plans).unwrap();
    let pred = g.value(fwd.output.pred).clone();
    let enc = g.value(fwd.encoded.out).clone();

    let dec_pos = sincos_3d::<f64>(vit.grid(), vit.dec_dim);
    let dd = vit.dec_dim;
    let mut row = 0;
    for (m, plan) in &plans {
        for (i, masked) in plan.masked.iter().enumerate() {
            let mut h = Graph::new();
            let hb = Bound::bind(&mut h, &p, false);
            let x = if *masked {
                hb.var(mae::MASK_TOKEN).unwrap()
            } else {
                let slot = fwd.map.position(*m, i).unwrap();
                let e = h.constant(Tensor::new([1, vit.embed_dim], enc.data()[slot * vit.embed_dim..(slot + 1) * vit.embed_dim].to_vec()).unwrap());
                vit::linear(&mut h, &hb, "dec.embed", e).unwrap()
            };
            let pos = h.constant(Tensor::new([1, dd], dec_pos.data()[i * dd..(i + 1) * dd].to_vec()).unwrap());
            let x = h.add(x, pos).unwrap();
            let mods = h.gather_rows(hb.var(mae::DEC_MODALITY).unwrap(), &[m.index()]).unwrap();
            let x = h.add(x, mods).unwrap();
            let x = vit::norm(&mut h, &hb, "dec.norm", x, vit.ln_eps).unwrap();
            let y = vit::linear(&mut h, &hb, "dec.pred", x).unwrap();
            let k3 = vit.patch_voxels();
            let got = &pred.data()[row * k3..(row + 1) * k3];
            for (a, b) in got.iter().zip(h.value(y).data()) {
                assert!((a - b).abs() < 1e-12, "slot ({m}, {i})");
            }
            row += 1;
        }
    }
    assert_eq!(row, 2 * vit.patches());
}

#[test]
fn decoder_rejects_inconsistent_map() {
    let vit = tiny_vit();
    let p = mae::init_params::<f64>(&vit, 5).unwrap();
    let s = subject_with([8, 8, 8], 6, &[1]);
    let plans = mae::sample_plans(&s, vit.patches(), 0.5, 1, 0).unwrap();
    let mut g = Graph::new();
    let b = Bound::bind(&mut g, &p, false);
    let (enc, map) = mae::encode_subject(&mut g, &b, &vit, &s, &plans).unwrap();
    let other = mae::sample_plans(&s, vit.patches(), 0.5, 2, 0).unwrap();
    assert_ne!(other, plans);
    assert!(matches!(mae::decode(&mut g, &b, &vit, enc.out, &map, &other), Err(Error::Contract(_))));
}

#[test]
fn loss_ignores_unmasked_predictions() {
    let mut masked = vec![false; 16];
    for i in [1, 4, 9, 15] {
        masked[i] = true;
    }
    let target = tensor(&[16, 8], 1);
    let base = tensor(&[16, 8], 2);
    let loss = |pred: &Tensor<f64>| {
        let mut g = Graph::new();
        let v = g.param(pred.clone());
        let out = ReconstructionOutput { modalities: vec![ModalityId(0)], pred: v, target: target.clone(), masked: masked.clone() };
        let l = mae::masked_l2(&mut g, &out).unwrap();
        g.backward(l).unwrap();
        (g.value(l).item().unwrap(), g.grad_tensor(v))
    };
    let (l0, grad) = loss(&base);
    for (i, m) in masked.iter().enumerate() {
        let row = &grad.data()[i * 8..(i + 1) * 8];
        assert_eq!(row.iter().all(|x| *x == 0.0), !m);
    }
    let mut moved = base.clone();
    for i in (0..16).filter(|i| !masked[*i]) {
        for x in &mut moved.data_mut()[i * 8..(i + 1) * 8] {
            *x += 37.0;
        }
    }
    assert_eq!(loss(&moved).0.to_bits(), l0.to_bits());

    let mut g = Graph::new();
    let pred = g.constant(base.clone());
    let out = ReconstructionOutput { modalities: vec![ModalityId(0)], pred, target: target.clone(), masked: vec![false; 16] };
    assert!(matches!(mae::masked_l2(&mut g, &out), Err(Error::Contract(_))));
}

fn adaptive_logits(model: &SegModel<f64>, s: &SubjectSample) -> Vec<f64> {
    let mut g = Graph::new();
    let b = Bound::bind(&mut g, &model.params, false);
    let y = model.forward(&mut g, &b, s).unwrap();
    assert_eq!(g.shape(y), &[1, 8, 8, 8]);
    g.value(y).data().to_vec()
}

#[test]
fn adaptive_head_accepts_any_subset() {
    let model = SegModel::<f64>::init(small_vit(), HeadConfig::default(), 3).unwrap();
    let p = mae::init_params::<f64>(&small_vit(), 3).unwrap();
    for mods in [&[0u32][..], &[2], &[0, 1], &[1, 2], &[0, 1, 2]] {
        let s = subject_with([8, 8, 8], 9, mods);
        let logits = adaptive_logits(&model, &s);
        assert!(logits.iter().all(|x| x.is_finite()));
        let plans = mae::sample_plans(&s, 8, 0.7, 0, 0).unwrap();
        let mut g = Graph::new();
        let b = Bound::bind(&mut g, &p, true);
        let fwd = mae::forward_pretrain(&mut g, &b, &small_vit(), &s, &plans).unwrap();
        g.backward(fwd.loss).unwrap();
        assert_eq!(g.shape(fwd.output.pred), &[mods.len() * 8, 64]);
    }
}

#[test]
fn adaptive_head_ignores_input_order() {
    let model = SegModel::<f64>::init(small_vit(), HeadConfig::default(), 4).unwrap();
    let full = subject_with([8, 8, 8], 10, &[0, 1, 2]);
    let vols: Vec<_> = full.volumes.iter().map(|(m, v)| (*m, v.clone())).collect();
    let reference = adaptive_logits(&model, &full);
    for perm in [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]] {
        let list = perm.iter().map(|i| vols[*i].clone()).collect();
        let s = SubjectSample::from_list(10, list, full.mask.clone()).unwrap();
        let logits = adaptive_logits(&model, &s);
        assert!(logits.iter().zip(&reference).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}

#[test]
fn concat_head_zero_fills_missing_modalities() {
    let vit = small_vit();
    let model = SegModel::<f64>::init(vit.clone(), HeadConfig { kind: HeadKind::Concat, ..HeadConfig::default() }, 5).unwrap();
    let partial = subject_with([8, 8, 8], 11, &[0, 1]);
    let input = concat_input::<f64>(&vit, &partial).unwrap();
    assert_eq!(input.shape(), &[3, 8, 8, 8]);
    assert!(input.data()[2 * 512..].iter().all(|x| *x == 0.0));

    let mut zeros = partial.clone();
    zeros.volumes.insert(ModalityId(2), amae_core::data::Volume::zeros([8, 8, 8]));
    let run = |s: &SubjectSample| {
        let mut g = Graph::new();
        let b = Bound::bind(&mut g, &model.params, false);
        let y = model.forward(&mut g, &b, s).unwrap();
        g.value(y).clone()
    };
    assert_eq!(run(&partial), run(&zeros));
    let full = subject_with([8, 8, 8], 11, &[0, 1, 2]);
    assert_ne!(run(&partial), run(&full));

    let mut g = Graph::new();
    let b = Bound::bind(&mut g, &model.params, false);
    let y = concat_forward_tensor(&mut g, &b, &vit, input).unwrap();
    assert_eq!(g.value(y), &run(&partial));
}

#[test]
fn transfer_reproduces_encoder_activations() {
    let vit = small_vit();
    let pre = perturb(&mae::init_params::<f64>(&vit, 7).unwrap(), 0.05, 8);
    let mut model = SegModel::<f64>::init(vit.clone(), HeadConfig::default(), 9).unwrap();
    let report = transfer_encoder(&pre, &vit, &mut model).unwrap();

    assert!(report.with(Disposition::Fresh).iter().all(|n| n.starts_with("seg.")));
    assert!(!report.with(Disposition::Fresh).is_empty());
    let dropped = report.with(Disposition::Dropped);
    assert!(dropped.contains(&mae::MASK_TOKEN) && dropped.contains(&"dec.pred.w"));
    assert!(dropped.iter().all(|n| mae::is_decoder_param(n)));
    assert!(report.with(Disposition::Transferred).contains(&dct::PROJ_W));

    let s = subject_with([8, 8, 8], 12, &[0, 2]);
    let plans: BTreeMap<_, _> = s.modalities().into_iter().map(|m| (m, MaskPlan::visible(8))).collect();
    let encode = |params| {
        let mut g = Graph::new();
        let b = Bound::bind(&mut g, params, false);
        let (enc, _) = mae::encode_subject(&mut g, &b, &vit, &s, &plans).unwrap();
        g.value(enc.out).clone()
    };
    assert_eq!(encode(&pre), encode(&model.params));
}

#[test]
fn mismatched_transfer_leaves_target_untouched() {
    let src_vit = VitConfig { embed_dim: 32, ..small_vit() };
    let pre = mae::init_params::<f64>(&src_vit, 1).unwrap();
    let mut model = SegModel::<f64>::init(small_vit(), HeadConfig::default(), 2).unwrap();
    let before = model.params.clone();
    match transfer_encoder(&pre, &src_vit, &mut model) {
        Err(Error::Transfer { field, .. }) => assert_eq!(field, "embed_dim"),
        other => panic!("{other:?}"),
    }
    assert_eq!(model.params, before);
}

#[test]
fn reconstruction_without_masking_is_identity() {
    let vit = small_vit();
    let p = mae::init_params::<f64>(&vit, 1).unwrap();
    let s = subject_with([8, 8, 8], 13, &[0, 1]);
    let plans = mae::sample_plans(&s, 8, 0.0, 0, 0).unwrap();
    for r in recon::reconstruct(&p, &vit, &s, &plans).unwrap() {
        assert_eq!(r.masked, r.original);
        assert_eq!(r.reconstructed, r.original);
    }
    let plans = mae::sample_plans(&s, 8, 0.5, 0, 0).unwrap();
    for r in recon::reconstruct(&p, &vit, &s, &plans).unwrap() {
        assert_eq!(r.voxel_mask.iter().filter(|m| **m).count(), 4 * 64);
        for ((o, x), m) in r.original.iter().zip(&r.reconstructed).zip(&r.voxel_mask) {
            if !m {
                assert_eq!(o, x);
            }
        }
    }
}

#[test]
fn seg_model_requires_patch_four() {
    let vit = VitConfig { patch: 2, ..small_vit() };
    assert!(matches!(SegModel::<f64>::init(vit, HeadConfig::default(), 0), Err(Error::Config(_))));
}
