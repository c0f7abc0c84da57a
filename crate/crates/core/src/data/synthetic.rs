//! Synthetic bag generator with a planted, recoverable class signal.
//!
//! Each class owns one unit-norm prototype per modality; the prototypes of the
//! three classes are orthonormal. A bag of class `c` adds
//! `signal_strength * prototype[c]` to every frame of its relevant cine
//! instances and to every doppler instance. Everything else is zero-mean
//! Gaussian noise.
//!
//! Independent ChaCha streams drive prototypes, labels, bag sizes and
//! instance content, so changing the class priors changes labels and means
//! but leaves bag sizes and noise draws untouched.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Bag, Class, Dataset, Instance, Modality, Split};
use crate::error::{Error, Result};

const STREAM_PROTOTYPES: u64 = 0;
const STREAM_LABELS: u64 = 1;
const STREAM_SIZES: u64 = 2;
const STREAM_CONTENT: u64 = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    /// Labeled training bags.
    pub n_labeled: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub n_unlabeled: usize,
    pub class_priors: [f64; 3],
    /// Inclusive `[min, max]` cine instances per bag.
    pub cine_bag_size: [usize; 2],
    /// Inclusive `[min, max]` doppler instances per bag.
    pub doppler_bag_size: [usize; 2],
    /// `[frames, height, width]`.
    pub cine_shape: [usize; 3],
    /// `[height, width]`.
    pub doppler_shape: [usize; 2],
    pub signal_strength: f64,
    /// Fraction of cine instances per bag that carry the class signal.
    pub relevant_fraction: f64,
    pub noise_std: f64,
    pub signal_in_cine: bool,
    pub signal_in_doppler: bool,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            n_labeled: 60,
            n_val: 60,
            n_test: 60,
            n_unlabeled: 500,
            class_priors: [1.0 / 3.0; 3],
            cine_bag_size: [5, 15],
            doppler_bag_size: [2, 6],
            cine_shape: [4, 8, 8],
            doppler_shape: [12, 16],
            signal_strength: 3.0,
            relevant_fraction: 0.3,
            noise_std: 1.0,
            signal_in_cine: true,
            signal_in_doppler: true,
            seed: 7,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.n_labeled == 0 {
            return bad("n_labeled must be positive".into());
        }
        if self.class_priors.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return bad(format!("class priors must be non-negative, got {:?}", self.class_priors));
        }
        let total: f64 = self.class_priors.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return bad(format!("class priors sum to {total}, expected 1"));
        }
        for (name, [lo, hi]) in [("cine_bag_size", self.cine_bag_size), ("doppler_bag_size", self.doppler_bag_size)] {
            if lo > hi {
                return bad(format!("{name} range [{lo}, {hi}] is empty"));
            }
        }
        if self.cine_bag_size[0] + self.doppler_bag_size[0] == 0 {
            return bad("bag size ranges allow bags with no instances".into());
        }
        if self.cine_shape.iter().chain(&self.doppler_shape).any(|&d| d == 0) {
            return bad("instance dimensions must be positive".into());
        }
        if self.cine_shape[1] * self.cine_shape[2] < Class::COUNT
            || self.doppler_shape[0] * self.doppler_shape[1] < Class::COUNT
        {
            return bad("feature dimension must be at least the number of classes".into());
        }
        if !(self.signal_strength >= 0.0 && self.signal_strength.is_finite()) {
            return bad(format!("signal_strength {} must be finite and >= 0", self.signal_strength));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad(format!("noise_std {} must be finite and >= 0", self.noise_std));
        }
        if !(0.0..=1.0).contains(&self.relevant_fraction) {
            return bad(format!("relevant_fraction {} outside [0, 1]", self.relevant_fraction));
        }
        Ok(())
    }
}

/// Labels of unlabeled bags, for diagnostics only.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct HiddenTruth {
    pub labels: BTreeMap<String, Class>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticData {
    pub dataset: Dataset,
    pub hidden_truth: HiddenTruth,
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Three orthonormal directions in `dim` dimensions (Gram-Schmidt on Gaussian draws).
fn prototypes(rng: &mut ChaCha8Rng, dim: usize) -> Vec<Vec<f64>> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(Class::COUNT);
    while basis.len() < Class::COUNT {
        let mut v: Vec<f64> = (0..dim).map(|_| normal.sample(rng)).collect();
        for b in &basis {
            let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            v.iter_mut().for_each(|x| *x /= norm);
            basis.push(v);
        }
    }
    basis
}

fn draw_class(rng: &mut ChaCha8Rng, priors: &[f64; 3]) -> Class {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in priors.iter().enumerate() {
        acc += p;
        if u < acc {
            return Class::from_index(i);
        }
    }
    // u landed in the rounding gap at the top; use the last class with mass.
    let last = priors.iter().rposition(|&p| p > 0.0).unwrap_or(Class::COUNT - 1);
    Class::from_index(last)
}

fn clamp_unit(x: f64) -> f64 {
    x.clamp(0.0, 1.0)
}

struct Planter<'a> {
    cfg: &'a GeneratorConfig,
    cine_protos: Vec<Vec<f64>>,
    doppler_protos: Vec<Vec<f64>>,
    noise: Normal<f64>,
    relevant_score: Normal<f64>,
    irrelevant_score: Normal<f64>,
}

impl Planter<'_> {
    fn cine_instance(&self, rng: &mut ChaCha8Rng, class: Class, relevant: bool) -> Result<Instance> {
        let [frames, h, w] = self.cfg.cine_shape;
        let frame_len = h * w;
        let shift = (relevant && self.cfg.signal_in_cine).then(|| &self.cine_protos[class.index()]);
        let mut features = Vec::with_capacity(frames * frame_len);
        for _ in 0..frames {
            for j in 0..frame_len {
                let mean = shift.map_or(0.0, |p| self.cfg.signal_strength * p[j]);
                features.push(mean + self.noise.sample(rng));
            }
        }
        let score = if relevant {
            self.relevant_score.sample(rng)
        } else {
            self.irrelevant_score.sample(rng)
        };
        Instance::new(Modality::Cine, self.cfg.cine_shape.to_vec(), features, Some(clamp_unit(score)))
    }

    fn doppler_instance(&self, rng: &mut ChaCha8Rng, class: Class) -> Result<Instance> {
        let proto = &self.doppler_protos[class.index()];
        let features = proto
            .iter()
            .map(|&p| {
                let mean = if self.cfg.signal_in_doppler {
                    self.cfg.signal_strength * p
                } else {
                    0.0
                };
                mean + self.noise.sample(rng)
            })
            .collect();
        Instance::new(Modality::Doppler, self.cfg.doppler_shape.to_vec(), features, None)
    }
}

pub fn generate_synthetic(cfg: &GeneratorConfig) -> Result<SyntheticData> {
    cfg.validate()?;
    let mut proto_rng = stream(cfg.seed, STREAM_PROTOTYPES);
    let mut label_rng = stream(cfg.seed, STREAM_LABELS);
    let mut size_rng = stream(cfg.seed, STREAM_SIZES);
    let mut content_rng = stream(cfg.seed, STREAM_CONTENT);

    let [_, ch, cw] = cfg.cine_shape;
    let [dh, dw] = cfg.doppler_shape;
    let planter = Planter {
        cfg,
        cine_protos: prototypes(&mut proto_rng, ch * cw),
        doppler_protos: prototypes(&mut proto_rng, dh * dw),
        noise: Normal::new(0.0, cfg.noise_std).map_err(|e| Error::Config(e.to_string()))?,
        relevant_score: Normal::new(0.95, 0.02).expect("valid normal"),
        irrelevant_score: Normal::new(0.05, 0.02).expect("valid normal"),
    };

    let plan = [
        (Split::Train, "train", cfg.n_labeled),
        (Split::Val, "val", cfg.n_val),
        (Split::Test, "test", cfg.n_test),
        (Split::Unlabeled, "unl", cfg.n_unlabeled),
    ];
    let mut bags = Vec::new();
    let mut splits = BTreeMap::new();
    let mut hidden = HiddenTruth::default();
    for (split, prefix, count) in plan {
        for i in 0..count {
            let id = format!("{prefix}-{i:05}");
            let class = draw_class(&mut label_rng, &cfg.class_priors);
            let n_cine = size_rng.random_range(cfg.cine_bag_size[0]..=cfg.cine_bag_size[1]);
            let n_doppler = size_rng.random_range(cfg.doppler_bag_size[0]..=cfg.doppler_bag_size[1]);

            let n_relevant = if n_cine == 0 || cfg.relevant_fraction == 0.0 {
                0
            } else {
                ((cfg.relevant_fraction * n_cine as f64).round() as usize).clamp(1, n_cine)
            };
            let mut relevant = vec![false; n_cine];
            for k in sample(&mut content_rng, n_cine, n_relevant) {
                relevant[k] = true;
            }
            let cine = relevant
                .iter()
                .map(|&r| planter.cine_instance(&mut content_rng, class, r))
                .collect::<Result<Vec<_>>>()?;
            let doppler = (0..n_doppler)
                .map(|_| planter.doppler_instance(&mut content_rng, class))
                .collect::<Result<Vec<_>>>()?;

            let label = if split == Split::Unlabeled {
                hidden.labels.insert(id.clone(), class);
                None
            } else {
                Some(class)
            };
            splits.insert(id.clone(), split);
            bags.push(Bag::new(id, cine, doppler, label)?);
        }
    }
    Ok(SyntheticData {
        dataset: Dataset::new(bags, splits)?,
        hidden_truth: hidden,
    })
}
