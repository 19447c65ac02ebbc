//! Shifted-force Lennard-Jones reference potential used to label datasets.

use crate::crystal::{build_graph, CrystalStructure, Mat3, Vec3};
use crate::error::{Error, Result};
use crate::potential::{Potential, PredictionSet};

use super::LabeledSample;

/// Default well depth (eV) and diameter (Å), argon-like.
pub const LJ_EPSILON: f64 = 0.0104;
pub const LJ_SIGMA: f64 = 3.40;
/// Second species used for binary datasets, krypton-like.
pub const KR_EPSILON: f64 = 0.0140;
pub const KR_SIGMA: f64 = 3.65;

/// Pair distances below this fraction of the mixed σ are rejected.
const OVERLAP_FRACTION: f64 = 0.5;

/// Pairwise Lennard-Jones with the energy and force both shifted to vanish
/// at the cutoff. Unlisted elements use the default `(epsilon, sigma)`;
/// unlike pairs mix by Lorentz–Berthelot.
#[derive(Clone, Debug, PartialEq)]
pub struct LennardJones {
    pub epsilon: f64,
    pub sigma: f64,
    pub cutoff: f64,
    pub species: Vec<(u32, f64, f64)>,
}

impl LennardJones {
    pub fn new(epsilon: f64, sigma: f64, cutoff: f64) -> Result<Self> {
        if !(epsilon > 0.0 && sigma > 0.0 && cutoff > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "Lennard-Jones parameters must be positive (epsilon={epsilon}, sigma={sigma}, cutoff={cutoff})"
            )));
        }
        Ok(Self {
            epsilon,
            sigma,
            cutoff,
            species: Vec::new(),
        })
    }

    /// Ar (18) and Kr (36) with the given cutoff.
    pub fn argon_krypton(cutoff: f64) -> Self {
        Self {
            epsilon: LJ_EPSILON,
            sigma: LJ_SIGMA,
            cutoff,
            species: vec![(18, LJ_EPSILON, LJ_SIGMA), (36, KR_EPSILON, KR_SIGMA)],
        }
    }

    pub fn with_species(mut self, z: u32, epsilon: f64, sigma: f64) -> Self {
        self.species.retain(|s| s.0 != z);
        self.species.push((z, epsilon, sigma));
        self
    }

    fn element(&self, z: u32) -> (f64, f64) {
        self.species
            .iter()
            .find(|s| s.0 == z)
            .map(|s| (s.1, s.2))
            .unwrap_or((self.epsilon, self.sigma))
    }

    pub fn pair_parameters(&self, zi: u32, zj: u32) -> (f64, f64) {
        let (ei, si) = self.element(zi);
        let (ej, sj) = self.element(zj);
        ((ei * ej).sqrt(), 0.5 * (si + sj))
    }

    /// Distance of the minimum of the unshifted pair potential.
    pub fn minimum_distance(&self, zi: u32, zj: u32) -> f64 {
        2f64.powf(1.0 / 6.0) * self.pair_parameters(zi, zj).1
    }

    fn bare(eps: f64, sigma: f64, r: f64) -> (f64, f64) {
        let s6 = (sigma / r).powi(6);
        let s12 = s6 * s6;
        (4.0 * eps * (s12 - s6), 4.0 * eps * (-12.0 * s12 + 6.0 * s6) / r)
    }

    /// Shifted-force pair energy and its radial derivative.
    pub fn pair(&self, zi: u32, zj: u32, r: f64) -> (f64, f64) {
        if r >= self.cutoff {
            return (0.0, 0.0);
        }
        let (eps, sigma) = self.pair_parameters(zi, zj);
        let (v, dv) = Self::bare(eps, sigma, r);
        let (vc, dvc) = Self::bare(eps, sigma, self.cutoff);
        (v - vc - (r - self.cutoff) * dvc, dv - dvc)
    }

    /// Energy, forces and stress of a structure.
    pub fn label(&self, structure: &CrystalStructure) -> Result<LabeledSample> {
        let graph = build_graph(structure, self.cutoff)?;
        let n = structure.len();
        let z = &structure.atomic_numbers;
        let mut energy = 0.0;
        let mut forces = vec![Vec3::zeros(); n];
        let mut virial = Mat3::zeros();
        for e in &graph.edges {
            let r = e.displacement.norm();
            let (zi, zj) = (z[e.target], z[e.source]);
            if r < OVERLAP_FRACTION * self.pair_parameters(zi, zj).1 {
                return Err(Error::AtomicOverlap(e.target.min(e.source), e.target.max(e.source)));
            }
            let (v, dv) = self.pair(zi, zj, r);
            energy += 0.5 * v;
            let unit = e.displacement / r;
            forces[e.target] += dv * unit;
            virial += (0.5 * dv / r) * e.displacement * e.displacement.transpose();
        }
        let stress = virial / structure.volume();
        Ok(LabeledSample {
            structure: structure.clone(),
            energy,
            forces,
            stress: 0.5 * (stress + stress.transpose()),
        })
    }
}

impl Potential for LennardJones {
    fn predict(&self, structure: &CrystalStructure) -> Result<PredictionSet> {
        let s = self.label(structure)?;
        Ok(PredictionSet {
            energy: s.energy,
            forces: s.forces,
            stress: s.stress,
        })
    }
}

/// Labels a structure with a single-species shifted-force Lennard-Jones potential.
pub fn lj_oracle(structure: &CrystalStructure, epsilon: f64, sigma: f64, cutoff: f64) -> Result<LabeledSample> {
    LennardJones::new(epsilon, sigma, cutoff)?.label(structure)
}
