//! Deterministic multi-contrast phantom generator with planted lesions.
//!
//! Every subject shares one latent "anatomy" field rendered into each contrast
//! through a monotone intensity transfer. Lesions shift intensity up in the
//! trace-like contrast and down in the ADC-like contrast, so the two required
//! modalities together identify them.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Catalog, ModalityId, ModalityInfo, SubjectSample, Volume};
use crate::error::{Error, Result};
use crate::seed::{mix, rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModalitySpec {
    pub id: ModalityId,
    pub name: String,
    pub required: bool,
    /// Probability that an optional modality is acquired.
    pub availability: f64,
    pub offset: f64,
    pub gain: f64,
    pub gamma: f64,
    /// Additive intensity shift inside lesions.
    pub lesion_shift: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub dims: [usize; 3],
    pub modalities: Vec<ModalitySpec>,
    pub lesion_count: [usize; 2],
    pub lesion_radius: [f64; 2],
    pub blob_count: [usize; 2],
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        let spec = |id, name: &str, required, availability, offset, gain, gamma, lesion_shift| ModalitySpec {
            id: ModalityId(id),
            name: name.to_string(),
            required,
            availability,
            offset,
            gain,
            gamma,
            lesion_shift,
        };
        GeneratorConfig {
            dims: [16, 16, 16],
            modalities: vec![
                spec(0, "ADC", true, 1.0, 0.10, 0.75, 1.0, -0.35),
                spec(1, "Trace", true, 1.0, 0.05, 0.55, 1.5, 0.40),
                spec(2, "T2", false, 0.6, 0.10, 0.60, 0.6, 0.20),
            ],
            lesion_count: [1, 3],
            lesion_radius: [1.5, 3.0],
            blob_count: [3, 6],
            noise_std: 0.03,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dims.contains(&0) {
            return Err(Error::Config(format!("zero extent in {:?}", self.dims)));
        }
        for (i, m) in self.modalities.iter().enumerate() {
            if m.id.index() != i {
                return Err(Error::Config(format!("modality ids must be 0..n, found {} at {i}", m.id)));
            }
            if !(0.0..=1.0).contains(&m.availability) {
                return Err(Error::Config(format!("availability of {} outside [0, 1]", m.name)));
            }
            if m.required && m.availability != 1.0 {
                return Err(Error::Config(format!("required modality {} must have availability 1", m.name)));
            }
        }
        if self.modalities.is_empty() {
            return Err(Error::Config("empty modality catalog".into()));
        }
        if self.lesion_count[0] == 0 || self.lesion_count[0] > self.lesion_count[1] {
            return Err(Error::Config(format!("bad lesion count range {:?}", self.lesion_count)));
        }
        if self.lesion_radius[0] <= 0.0 || self.lesion_radius[0] > self.lesion_radius[1] {
            return Err(Error::Config(format!("bad lesion radius range {:?}", self.lesion_radius)));
        }
        Ok(())
    }

    pub fn catalog(&self) -> Catalog {
        Catalog {
            modalities: self
                .modalities
                .iter()
                .map(|m| ModalityInfo { id: m.id, name: m.name.clone(), required: m.required })
                .collect(),
        }
    }
}

struct Blob {
    centre: [f64; 3],
    sigma: f64,
    amp: f64,
}

fn range_usize(r: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    r.random_range(lo..=hi)
}

fn coords(dims: [usize; 3]) -> impl Iterator<Item = [f64; 3]> {
    let [h, w, d] = dims;
    (0..h).flat_map(move |i| {
        (0..w).flat_map(move |j| (0..d).map(move |k| [i as f64, j as f64, k as f64]))
    })
}

/// Generates subject `index`. Always plants at least one lesion and returns
/// its mask.
pub fn generate_subject(config: &GeneratorConfig, index: u32) -> Result<SubjectSample> {
    config.validate()?;
    let mut r = rng(mix(&[config.seed, u64::from(index), 0x5b7e]));
    let dims = config.dims;
    let centre = dims.map(|e| (e as f64 - 1.0) / 2.0);
    let radii: [f64; 3] = dims.map(|e| e as f64 * r.random_range(0.38..0.46));

    let head = |p: [f64; 3]| -> f64 {
        let q: f64 = (0..3).map(|a| ((p[a] - centre[a]) / radii[a]).powi(2)).sum::<f64>().sqrt();
        ((1.0 - q) / 0.15).clamp(0.0, 1.0)
    };

    let n_blobs = range_usize(&mut r, config.blob_count[0], config.blob_count[1]);
    let blobs: Vec<Blob> = (0..n_blobs)
        .map(|_| Blob {
            centre: [0, 1, 2].map(|a| centre[a] + r.random_range(-0.7..0.7) * radii[a]),
            sigma: r.random_range(1.5..3.5),
            amp: r.random_range(-0.3..0.4),
        })
        .collect();

    let anatomy: Vec<f64> = coords(dims)
        .map(|p| {
            let mut a = 0.5;
            for b in &blobs {
                let d2: f64 = (0..3).map(|k| (p[k] - b.centre[k]).powi(2)).sum();
                a += b.amp * (-d2 / (2.0 * b.sigma * b.sigma)).exp();
            }
            head(p) * a.clamp(0.0, 1.0)
        })
        .collect();

    let n_lesions = range_usize(&mut r, config.lesion_count[0], config.lesion_count[1]);
    let mut lesion = vec![0.0f32; anatomy.len()];
    for _ in 0..n_lesions {
        // Centre on a voxel well inside the head.
        let c = loop {
            let v = [0, 1, 2].map(|a| r.random_range(0..dims[a]) as f64);
            if head(v) > 0.9 {
                break v;
            }
        };
        let rad = [0, 1, 2].map(|_| r.random_range(config.lesion_radius[0]..=config.lesion_radius[1]));
        for (i, p) in coords(dims).enumerate() {
            let q: f64 = (0..3).map(|a| ((p[a] - c[a]) / rad[a]).powi(2)).sum();
            if q <= 1.0 {
                lesion[i] = 1.0;
            }
        }
    }

    let mut list = Vec::new();
    for spec in &config.modalities {
        let keep = r.random::<f64>() < spec.availability;
        let data: Vec<f32> = anatomy
            .iter()
            .zip(&lesion)
            .map(|(a, l)| {
                let noise: f64 = StandardNormal.sample(&mut r);
                let v = spec.offset
                    + spec.gain * a.powf(spec.gamma)
                    + spec.lesion_shift * f64::from(*l)
                    + config.noise_std * noise;
                v.clamp(0.0, 1.0) as f32
            })
            .collect();
        if spec.required || keep {
            list.push((spec.id, Volume::new(dims, data)?));
        }
    }
    SubjectSample::from_list(index, list, Some(Volume::new(dims, lesion)?))
}

/// Disjoint subject-id lists for fine-tuning.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<u32>,
    pub val: Vec<u32>,
    pub test: Vec<u32>,
}

/// Assigns ids `0..n_train + n_val + n_test` to three splits by a seeded shuffle.
pub fn make_splits(config: &GeneratorConfig, n_train: usize, n_val: usize, n_test: usize) -> Result<Splits> {
    if n_train == 0 || n_val == 0 || n_test == 0 {
        return Err(Error::Config("every split needs at least one subject".into()));
    }
    let total = (n_train + n_val + n_test) as u32;
    let mut ids: Vec<u32> = (0..total).collect();
    let mut r = rng(mix(&[config.seed, 0x5711]));
    for i in (1..ids.len()).rev() {
        let j = r.random_range(0..=i);
        ids.swap(i, j);
    }
    let mut train = ids[..n_train].to_vec();
    let mut val = ids[n_train..n_train + n_val].to_vec();
    let mut test = ids[n_train + n_val..].to_vec();
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    Ok(Splits { train, val, test })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic() {
        let cfg = GeneratorConfig::default();
        assert_eq!(generate_subject(&cfg, 4).unwrap(), generate_subject(&cfg, 4).unwrap());
        assert_ne!(generate_subject(&cfg, 4).unwrap(), generate_subject(&cfg, 5).unwrap());
    }

    #[test]
    fn zero_availability_keeps_only_required() {
        let mut cfg = GeneratorConfig::default();
        cfg.modalities[2].availability = 0.0;
        for i in 0..20 {
            let s = generate_subject(&cfg, i).unwrap();
            assert_eq!(s.modalities(), vec![ModalityId(0), ModalityId(1)]);
        }
    }

    #[test]
    fn optional_modality_sometimes_present() {
        let cfg = GeneratorConfig::default();
        let n = (0..40).filter(|i| generate_subject(&cfg, *i).unwrap().num_modalities() == 3).count();
        assert!(n > 5 && n < 40, "{n}");
    }

    #[test]
    fn values_in_unit_interval_and_lesion_nonempty() {
        let cfg = GeneratorConfig::default();
        let s = generate_subject(&cfg, 11).unwrap();
        for v in s.volumes.values() {
            assert!(v.data.iter().all(|x| (0.0..=1.0).contains(x)));
        }
        assert!(s.mask.unwrap().data.contains(&1.0));
    }

    #[test]
    fn required_modality_must_be_always_available() {
        let mut cfg = GeneratorConfig::default();
        cfg.modalities[0].availability = 0.5;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn splits_are_disjoint_and_complete() {
        let cfg = GeneratorConfig::default();
        let s = make_splits(&cfg, 20, 5, 5).unwrap();
        let mut all: Vec<u32> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        all.sort_unstable();
        all.dedup();
        assert_eq!(all.len(), 30);
        assert_eq!(s, make_splits(&cfg, 20, 5, 5).unwrap());
        assert!(make_splits(&cfg, 0, 1, 1).is_err());
    }
}
