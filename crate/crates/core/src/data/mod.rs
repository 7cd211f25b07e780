//! Synthetic paired world: every sample has a real view, a generated view and
//! a text view drawn from one shared latent, plus the concept it came from.
//!
//! Generated views differ from real ones through a separate linear map and a
//! fixed artifact direction, which gives a systematic, learnable gap while the
//! ground-truth pairing stays known.

mod io;

use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use io::{
    decode_dataset, decode_embeddings, encode_dataset, encode_embeddings, export_embeddings,
    import_embeddings, load_dataset, save_dataset, DATASET_MAGIC, DATASET_VERSION,
    EMBEDDING_MAGIC, EMBEDDING_VERSION,
};
pub(crate) use io::{dim_u32, put_f64s, put_u32, ByteReader};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Variance of the per-sample latent offset around its concept prototype.
pub const LATENT_JITTER_VAR: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub latent_dim: usize,
    pub real_dim: usize,
    pub gen_dim: usize,
    pub text_dim: usize,
    pub n_concepts: usize,
    pub samples_per_concept: usize,
    pub sigma_real: f64,
    pub sigma_gen: f64,
    pub sigma_text: f64,
    /// Magnitude of the fixed artifact direction added to generated views.
    pub artifact_strength: f64,
    /// Scale of the independent perturbation separating the generated map
    /// from the real one.
    pub map_mismatch: f64,
    /// Use the real map for generated views as well.
    pub mirror_maps: bool,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            latent_dim: 16,
            real_dim: 64,
            gen_dim: 64,
            text_dim: 48,
            n_concepts: 50,
            samples_per_concept: 40,
            sigma_real: 0.05,
            sigma_gen: 0.05,
            sigma_text: 0.05,
            artifact_strength: 2.0,
            map_mismatch: 0.5,
            mirror_maps: false,
            seed: 0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("latent_dim", self.latent_dim),
            ("real_dim", self.real_dim),
            ("gen_dim", self.gen_dim),
            ("text_dim", self.text_dim),
            ("samples_per_concept", self.samples_per_concept),
        ] {
            if v < 1 {
                return Err(Error::Config(format!("{name} must be >= 1, got {v}")));
            }
        }
        if self.n_concepts < 2 {
            return Err(Error::Config(format!(
                "n_concepts must be >= 2, got {}",
                self.n_concepts
            )));
        }
        for (name, v) in [
            ("sigma_real", self.sigma_real),
            ("sigma_gen", self.sigma_gen),
            ("sigma_text", self.sigma_text),
            ("artifact_strength", self.artifact_strength),
            ("map_mismatch", self.map_mismatch),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be >= 0, got {v}")));
            }
        }
        if self.mirror_maps && self.gen_dim != self.real_dim {
            return Err(Error::Config(
                "mirror_maps requires gen_dim == real_dim".into(),
            ));
        }
        Ok(())
    }

    pub fn n_samples(&self) -> usize {
        self.n_concepts * self.samples_per_concept
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train = 0,
    Val = 1,
    Test = 2,
}

impl Split {
    pub fn from_tag(t: u8) -> Option<Self> {
        match t {
            0 => Some(Split::Train),
            1 => Some(Split::Val),
            2 => Some(Split::Test),
            _ => None,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub x_real: Vec<f64>,
    pub x_gen: Vec<f64>,
    pub text: Vec<f64>,
    pub concept_id: u32,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub n_concepts: usize,
    pub samples_per_concept: usize,
    pub real_dim: usize,
    pub gen_dim: usize,
    pub text_dim: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        self.samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    fn gather(&self, idx: &[usize], dim: usize, view: impl Fn(&Sample) -> &[f64]) -> Tensor {
        let mut data = Vec::with_capacity(idx.len() * dim);
        for &i in idx {
            data.extend_from_slice(view(&self.samples[i]));
        }
        Tensor::matrix(idx.len(), dim, data).expect("dataset values are finite")
    }

    pub fn real(&self, idx: &[usize]) -> Tensor {
        self.gather(idx, self.real_dim, |s| &s.x_real)
    }

    pub fn gen(&self, idx: &[usize]) -> Tensor {
        self.gather(idx, self.gen_dim, |s| &s.x_gen)
    }

    pub fn text(&self, idx: &[usize]) -> Tensor {
        self.gather(idx, self.text_dim, |s| &s.text)
    }

    pub fn labels(&self, idx: &[usize]) -> Vec<usize> {
        idx.iter()
            .map(|&i| self.samples[i].concept_id as usize)
            .collect()
    }
}

/// Split of the `j`-th sample of a concept: a 7/1/2 stride over each block
/// of ten.
fn split_for(j: usize, m: usize) -> Split {
    match j % 10 {
        0..=6 if !(j + 1 == m && m < 9) => Split::Train,
        7 if !(j + 1 == m && m < 9) => Split::Val,
        // short concepts get their last sample as the test sample
        _ => Split::Test,
    }
}

fn gaussian_map(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(vec![rows, cols], (1.0 / cols as f64).sqrt(), rng)
}

fn apply(map: &Tensor, z: &[f64]) -> Vec<f64> {
    (0..map.rows())
        .map(|i| map.row(i).iter().zip(z).map(|(a, b)| a * b).sum())
        .collect()
}

/// Draws a dataset; identical configs give bit-identical datasets.
///
/// Prototypes and maps are drawn before any sample, so worlds that differ
/// only in `samples_per_concept` share their concepts and maps.
pub fn generate_world(cfg: &WorldConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let k = cfg.latent_dim;

    let prototypes = Tensor::randn(vec![cfg.n_concepts, k], 1.0, &mut rng);
    let map_real = gaussian_map(cfg.real_dim, k, &mut rng);
    let perturb = gaussian_map(cfg.gen_dim, k, &mut rng);
    let map_text = gaussian_map(cfg.text_dim, k, &mut rng);
    let artifact = {
        let u = Tensor::randn(vec![cfg.gen_dim], 1.0, &mut rng);
        let n = u.row_norms()[0];
        u.data().iter().map(|v| v / n).collect::<Vec<_>>()
    };

    let map_gen = if cfg.mirror_maps {
        map_real.clone()
    } else if cfg.gen_dim == cfg.real_dim {
        let data = map_real
            .data()
            .iter()
            .zip(perturb.data())
            .map(|(a, p)| a + cfg.map_mismatch * p)
            .collect();
        Tensor::matrix(cfg.gen_dim, k, data)?
    } else {
        perturb
    };

    let jitter = LATENT_JITTER_VAR.sqrt();
    let m = cfg.samples_per_concept;
    let mut samples = Vec::with_capacity(cfg.n_samples());
    for c in 0..cfg.n_concepts {
        for j in 0..m {
            let dz = Tensor::randn(vec![k], jitter, &mut rng);
            let z: Vec<f64> = prototypes.row(c).iter().zip(dz.data()).map(|(a, b)| a + b).collect();

            let noise_r = Tensor::randn(vec![cfg.real_dim], cfg.sigma_real, &mut rng);
            let noise_g = Tensor::randn(vec![cfg.gen_dim], cfg.sigma_gen, &mut rng);
            let noise_t = Tensor::randn(vec![cfg.text_dim], cfg.sigma_text, &mut rng);

            let x_real = apply(&map_real, &z)
                .iter()
                .zip(noise_r.data())
                .map(|(a, e)| a + e)
                .collect();
            let x_gen = apply(&map_gen, &z)
                .iter()
                .zip(noise_g.data())
                .zip(&artifact)
                .map(|((a, e), u)| a + cfg.artifact_strength * u + e)
                .collect();
            let text = apply(&map_text, &z)
                .iter()
                .zip(noise_t.data())
                .map(|(a, e)| a + e)
                .collect();
            samples.push(Sample {
                x_real,
                x_gen,
                text,
                concept_id: c as u32,
                split: split_for(j, m),
            });
        }
    }

    Ok(Dataset {
        n_concepts: cfg.n_concepts,
        samples_per_concept: m,
        real_dim: cfg.real_dim,
        gen_dim: cfg.gen_dim,
        text_dim: cfg.text_dim,
        samples,
    })
}

/// Index batches covering `split` once, in a shuffled order fixed by
/// `epoch_seed`. The last batch may be short.
pub fn batches(ds: &Dataset, split: Split, batch_size: usize, epoch_seed: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be >= 1".into()));
    }
    let mut idx = ds.indices(split);
    if idx.is_empty() {
        return Err(Error::Config(format!("split {split} has no samples")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed);
    idx.shuffle(&mut rng);
    Ok(idx.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeSet;

    use super::*;

    fn small() -> WorldConfig {
        WorldConfig {
            latent_dim: 4,
            real_dim: 6,
            gen_dim: 6,
            text_dim: 5,
            n_concepts: 3,
            samples_per_concept: 10,
            seed: 9,
            ..Default::default()
        }
    }

    #[test]
    fn mirrored_noiseless_world_has_identical_views() {
        let cfg = WorldConfig {
            artifact_strength: 0.0,
            sigma_gen: 0.0,
            sigma_real: 0.0,
            mirror_maps: true,
            ..small()
        };
        let ds = generate_world(&cfg).unwrap();
        for s in &ds.samples {
            assert_eq!(s.x_real, s.x_gen);
        }
    }

    #[test]
    fn same_seed_same_world() {
        assert_eq!(generate_world(&small()).unwrap(), generate_world(&small()).unwrap());
        let other = WorldConfig { seed: 10, ..small() };
        assert_ne!(generate_world(&small()).unwrap(), generate_world(&other).unwrap());
    }

    #[test]
    fn every_concept_has_a_test_sample() {
        for m in [1, 2, 5, 9, 10, 13, 40] {
            let cfg = WorldConfig { samples_per_concept: m, ..small() };
            let ds = generate_world(&cfg).unwrap();
            let test: BTreeSet<u32> = ds
                .indices(Split::Test)
                .iter()
                .map(|&i| ds.samples[i].concept_id)
                .collect();
            assert_eq!(test.len(), cfg.n_concepts, "m = {m}");
        }
        let ds = generate_world(&WorldConfig { samples_per_concept: 40, ..small() }).unwrap();
        assert_eq!(ds.indices(Split::Train).len(), 3 * 28);
        assert_eq!(ds.indices(Split::Val).len(), 3 * 4);
        assert_eq!(ds.indices(Split::Test).len(), 3 * 8);
    }

    #[test]
    fn config_validation() {
        assert!(WorldConfig { n_concepts: 1, ..small() }.validate().is_err());
        assert!(WorldConfig { sigma_gen: -0.1, ..small() }.validate().is_err());
        assert!(WorldConfig { latent_dim: 0, ..small() }.validate().is_err());
        assert!(WorldConfig { mirror_maps: true, gen_dim: 7, ..small() }.validate().is_err());
    }

    #[test]
    fn batch_partition() {
        let ds = generate_world(&small()).unwrap();
        let train = ds.indices(Split::Train);
        let one = batches(&ds, Split::Train, train.len(), 1).unwrap();
        assert_eq!(one.len(), 1);
        let mut sorted = one[0].clone();
        sorted.sort();
        assert_eq!(sorted, train);

        let b = batches(&ds, Split::Train, 4, 1).unwrap();
        let flat: Vec<usize> = b.concat();
        assert_eq!(flat.len(), train.len());
        assert_eq!(flat.iter().collect::<BTreeSet<_>>().len(), train.len());
        assert_eq!(b.last().unwrap().len(), train.len() % 4);

        let c = batches(&ds, Split::Train, 4, 2).unwrap().concat();
        assert_ne!(flat, c);
        let (mut s1, mut s2) = (flat.clone(), c);
        s1.sort();
        s2.sort();
        assert_eq!(s1, s2);
        assert_eq!(flat, batches(&ds, Split::Train, 4, 1).unwrap().concat());
    }

    #[test]
    fn batch_errors() {
        let ds = generate_world(&small()).unwrap();
        assert!(batches(&ds, Split::Train, 0, 1).is_err());
        let mut empty = ds.clone();
        empty.samples.retain(|s| s.split != Split::Val);
        assert!(batches(&empty, Split::Val, 4, 1).is_err());
    }
}
