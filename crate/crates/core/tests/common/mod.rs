//! Helpers shared by the integration test targets.
#![allow(dead_code)]

pub mod oracle;

use amae_core::autograd::{Graph, Var};
use amae_core::data::synth::{generate_subject, GeneratorConfig};
use amae_core::data::{ModalityId, SubjectSample, Volume};
use amae_core::params::{Bound, Params};
use amae_core::tensor::Tensor;
use amae_core::vit::VitConfig;
use amae_core::Result;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Desk model with an `8^3` volume.
pub fn small_vit() -> VitConfig {
    VitConfig { volume: [8, 8, 8], ..VitConfig::default() }
}

/// A tiny model for fast property tests.
pub fn tiny_vit() -> VitConfig {
    VitConfig {
        embed_dim: 12,
        depth: 2,
        heads: 2,
        mlp_ratio: 2,
        dec_dim: 8,
        dec_depth: 1,
        dec_heads: 2,
        volume: [8, 8, 8],
        modality_dim: 4,
        ..VitConfig::default()
    }
}

pub fn generator(dims: [usize; 3], seed: u64) -> GeneratorConfig {
    GeneratorConfig { dims, seed, lesion_radius: [1.0, 2.0], ..GeneratorConfig::default() }
}

/// Subject `id` with exactly the listed modalities.
pub fn subject_with(dims: [usize; 3], id: u32, mods: &[u32]) -> SubjectSample {
    let mut cfg = generator(dims, 17);
    for m in &mut cfg.modalities {
        m.availability = 1.0;
    }
    let full = generate_subject(&cfg, id).unwrap();
    let list = mods.iter().map(|m| (ModalityId(*m), full.volumes[&ModalityId(*m)].clone())).collect();
    SubjectSample::from_list(id, list, full.mask).unwrap()
}

pub fn noise_volume(dims: [usize; 3], seed: u64) -> Volume {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let n = dims.iter().product();
    Volume::new(dims, (0..n).map(|_| r.random_range(0.0f32..1.0)).collect()).unwrap()
}

/// Adds `N(0, std)` noise to every parameter so that zero-initialised paths
/// carry gradient.
pub fn perturb(params: &Params<f64>, std: f64, seed: u64) -> Params<f64> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut out = params.clone();
    for (_, t) in out.iter_mut() {
        for x in t.data_mut() {
            let z: f64 = StandardNormal.sample(&mut r);
            *x += std * z;
        }
    }
    out
}

pub fn eval_loss(params: &Params<f64>, f: &impl Fn(&mut Graph<f64>, &Bound) -> Result<Var>) -> f64 {
    let mut g = Graph::new();
    let b = Bound::bind(&mut g, params, false);
    let l = f(&mut g, &b).unwrap();
    g.value(l).item().unwrap()
}

pub fn analytic(params: &Params<f64>, f: &impl Fn(&mut Graph<f64>, &Bound) -> Result<Var>) -> Params<f64> {
    let mut g = Graph::new();
    let b = Bound::bind(&mut g, params, true);
    let l = f(&mut g, &b).unwrap();
    g.backward(l).unwrap();
    b.grads(&g)
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

#[derive(Debug)]
pub struct GradCheck {
    pub tensor: String,
    pub checked: usize,
    pub max_rel: f64,
}

/// Central differences on up to `per_tensor` sampled entries of every
/// parameter tensor, plus one random direction through all of them.
pub fn check_gradients(
    params: &Params<f64>,
    per_tensor: usize,
    h: f64,
    floor: f64,
    seed: u64,
    f: impl Fn(&mut Graph<f64>, &Bound) -> Result<Var>,
) -> Vec<GradCheck> {
    let grads = analytic(params, &f);
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut work = params.clone();
    for (name, t) in params.iter() {
        let n = t.numel();
        let idx: Vec<usize> = if n <= per_tensor { (0..n).collect() } else { sample(&mut r, n, per_tensor).into_vec() };
        let ga = grads.get(name).unwrap();
        let mut max_rel = 0.0f64;
        for &i in &idx {
            let x0 = t.data()[i];
            work.get_mut(name).unwrap().data_mut()[i] = x0 + h;
            let up = eval_loss(&work, &f);
            work.get_mut(name).unwrap().data_mut()[i] = x0 - h;
            let down = eval_loss(&work, &f);
            work.get_mut(name).unwrap().data_mut()[i] = x0;
            max_rel = max_rel.max(rel_err(ga.data()[i], (up - down) / (2.0 * h), floor));
        }
        out.push(GradCheck { tensor: name.to_string(), checked: idx.len(), max_rel });
    }

    let dir: Params<f64> = {
        let mut d = params.zeros_like();
        for (_, t) in d.iter_mut() {
            for x in t.data_mut() {
                *x = StandardNormal.sample(&mut r);
            }
        }
        d
    };
    let along: f64 = grads
        .iter()
        .map(|(n, g)| g.data().iter().zip(dir.get(n).unwrap().data()).map(|(a, b)| a * b).sum::<f64>())
        .sum();
    let mut plus = params.clone();
    plus.add_scaled(&dir, h);
    let mut minus = params.clone();
    minus.add_scaled(&dir, -h);
    let numeric = (eval_loss(&plus, &f) - eval_loss(&minus, &f)) / (2.0 * h);
    out.push(GradCheck { tensor: "<random direction>".into(), checked: 1, max_rel: rel_err(along, numeric, floor) });
    out
}

pub fn tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| r.random_range(-1.0..1.0))
}
