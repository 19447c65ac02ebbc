//! Desk-scale labeled datasets built from perturbed prototype crystals.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::crystal::{prototypes, CrystalStructure, StrainTensor, Vec3};
use crate::error::{Error, Result};

use super::oracle::LennardJones;
use super::{derive_seed, LabeledSample};

/// Fraction of samples held out for validation.
pub const VALIDATION_FRACTION: f64 = 0.05;

/// Closest allowed approach after perturbation, relative to the pair minimum.
const MIN_CONTACT: f64 = 0.8;
const MAX_ATTEMPTS: usize = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Prototype {
    Fcc,
    Bcc,
    Rocksalt,
}

impl Prototype {
    pub const ALL: [Prototype; 3] = [Prototype::Fcc, Prototype::Bcc, Prototype::Rocksalt];

    /// Conventional cell with nearest neighbours at the pair-potential minimum.
    /// FCC uses the first species, BCC the last, rocksalt the first two.
    pub fn build(self, species: &[u32], oracle: &LennardJones) -> CrystalStructure {
        let a = species[0];
        let b = *species.last().expect("non-empty species");
        match self {
            Prototype::Fcc => prototypes::fcc(a, 2f64.sqrt() * oracle.minimum_distance(a, a)),
            Prototype::Bcc => prototypes::bcc(b, 2.0 / 3f64.sqrt() * oracle.minimum_distance(b, b)),
            Prototype::Rocksalt => {
                let b = species.get(1).copied().unwrap_or(a);
                prototypes::rocksalt(a, b, 2.0 * oracle.minimum_distance(a, b))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetConfig {
    pub n_samples: usize,
    pub species: Vec<u32>,
    /// Standard deviation of the Cartesian displacement of each atom (Å).
    pub perturbation: f64,
    /// Half-width of the uniform random strain components.
    pub cell_jitter: f64,
    pub oracle: LennardJones,
}

impl DatasetConfig {
    pub fn desk(n_samples: usize) -> Self {
        Self {
            n_samples,
            species: vec![18, 36],
            perturbation: 0.1,
            cell_jitter: 0.03,
            oracle: LennardJones::argon_krypton(5.0),
        }
    }
}

fn sample(index: usize, seed: u64, cfg: &DatasetConfig) -> Result<LabeledSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0, index as u64));
    let proto = Prototype::ALL[rng.random_range(0..Prototype::ALL.len())];
    let base = proto.build(&cfg.species, &cfg.oracle);
    let noise = Normal::new(0.0, cfg.perturbation.max(0.0))
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    for _ in 0..MAX_ATTEMPTS {
        let j = cfg.cell_jitter;
        let mut voigt = [0.0; 6];
        if j > 0.0 {
            for v in &mut voigt {
                *v = rng.random_range(-j..=j);
            }
        }
        let mut s = base.apply_strain(&StrainTensor::from_voigt(voigt))?;
        if cfg.perturbation > 0.0 {
            for p in &mut s.positions {
                *p += Vec3::new(noise.sample(&mut rng), noise.sample(&mut rng), noise.sample(&mut rng));
            }
        }
        if too_close(&s, &cfg.oracle)? {
            continue;
        }
        return cfg.oracle.label(&s);
    }
    Err(Error::InvalidArgument(format!(
        "perturbation {} Å too large: no overlap-free sample after {MAX_ATTEMPTS} attempts",
        cfg.perturbation
    )))
}

fn too_close(s: &CrystalStructure, oracle: &LennardJones) -> Result<bool> {
    let reach = s
        .atomic_numbers
        .iter()
        .flat_map(|&a| s.atomic_numbers.iter().map(move |&b| (a, b)))
        .map(|(a, b)| MIN_CONTACT * oracle.minimum_distance(a, b))
        .fold(0.0, f64::max);
    let graph = match crate::crystal::build_graph(s, reach) {
        Ok(g) => g,
        Err(Error::AtomicOverlap(..)) => return Ok(true),
        Err(e) => return Err(e),
    };
    Ok(graph.edges.iter().any(|e| {
        let (a, b) = (s.atomic_numbers[e.target], s.atomic_numbers[e.source]);
        e.displacement.norm() < MIN_CONTACT * oracle.minimum_distance(a, b)
    }))
}

/// Labeled samples drawn from random prototypes with random strain and
/// displacements. Each sample depends only on `(seed, index)`.
pub fn generate_dataset(seed: u64, cfg: &DatasetConfig) -> Result<Vec<LabeledSample>> {
    if cfg.species.is_empty() {
        return Err(Error::InvalidArgument("dataset needs at least one species".into()));
    }
    (0..cfg.n_samples)
        .into_par_iter()
        .map(|i| sample(i, seed, cfg))
        .collect()
}

/// Splits off the last 5% (at least one sample when there are two or more)
/// as the validation set.
pub fn split_dataset(samples: Vec<LabeledSample>) -> (Vec<LabeledSample>, Vec<LabeledSample>) {
    let n = samples.len();
    let n_val = if n < 2 {
        0
    } else {
        ((n as f64 * VALIDATION_FRACTION).round() as usize).max(1)
    };
    let mut train = samples;
    let val = train.split_off(n - n_val);
    (train, val)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_and_deterministic() {
        let mut cfg = DatasetConfig::desk(0);
        assert!(generate_dataset(1, &cfg).unwrap().is_empty());
        cfg.n_samples = 6;
        assert_eq!(generate_dataset(3, &cfg).unwrap(), generate_dataset(3, &cfg).unwrap());
        assert_ne!(generate_dataset(3, &cfg).unwrap(), generate_dataset(4, &cfg).unwrap());
    }

    #[test]
    fn unperturbed_prototypes_share_labels() {
        let mut cfg = DatasetConfig::desk(30);
        cfg.perturbation = 0.0;
        cfg.cell_jitter = 0.0;
        let data = generate_dataset(11, &cfg).unwrap();
        for a in &data {
            for b in &data {
                if a.structure.len() == b.structure.len() && a.structure.atomic_numbers == b.structure.atomic_numbers {
                    assert_eq!(a.energy, b.energy);
                    assert_eq!(a.forces, b.forces);
                    assert_eq!(a.stress, b.stress);
                }
            }
        }
    }

    #[test]
    fn split_is_95_5() {
        let cfg = DatasetConfig::desk(40);
        let (train, val) = split_dataset(generate_dataset(0, &cfg).unwrap());
        assert_eq!((train.len(), val.len()), (38, 2));
    }
}
