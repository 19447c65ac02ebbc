//! Analytic potentials with known answers, for checking the workflows.

use crate::crystal::{build_graph, CrystalStructure, Mat3, Vec3};
use crate::error::{Error, Result};
use crate::potential::{Potential, PredictionSet, EV_PER_A3_TO_GPA};

/// Each atom bound to its own anchor point by an isotropic spring (eV/Å²).
#[derive(Clone, Debug, PartialEq)]
pub struct HarmonicWells {
    pub anchors: Vec<Vec3>,
    pub stiffness: f64,
}

impl Potential for HarmonicWells {
    fn predict(&self, s: &CrystalStructure) -> Result<PredictionSet> {
        if s.len() != self.anchors.len() {
            return Err(Error::InvalidArgument("anchor count does not match structure".into()));
        }
        let mut energy = 0.0;
        let forces = s
            .positions
            .iter()
            .zip(&self.anchors)
            .map(|(p, a)| {
                let d = p - a;
                energy += 0.5 * self.stiffness * d.norm_squared();
                -self.stiffness * d
            })
            .collect();
        Ok(PredictionSet {
            energy,
            forces,
            stress: Mat3::zeros(),
        })
    }
}

/// Central springs `½k(r − r0)²` between all pairs closer than `cutoff`.
#[derive(Clone, Debug, PartialEq)]
pub struct PairSprings {
    pub stiffness: f64,
    pub rest_length: f64,
    pub cutoff: f64,
}

impl Potential for PairSprings {
    fn predict(&self, s: &CrystalStructure) -> Result<PredictionSet> {
        let graph = build_graph(s, self.cutoff)?;
        let mut energy = 0.0;
        let mut forces = vec![Vec3::zeros(); s.len()];
        let mut virial = Mat3::zeros();
        for e in &graph.edges {
            let r = e.displacement.norm();
            let stretch = r - self.rest_length;
            energy += 0.25 * self.stiffness * stretch * stretch;
            let dv = self.stiffness * stretch;
            forces[e.target] += (dv / r) * e.displacement;
            virial += (0.5 * dv / r) * e.displacement * e.displacement.transpose();
        }
        Ok(PredictionSet {
            energy,
            forces,
            stress: virial / s.volume(),
        })
    }
}

/// Linear elasticity about a reference cell with stiffness `c` (GPa, Voigt).
/// Atoms feel no force.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearElastic {
    pub reference: Mat3,
    pub stiffness: [[f64; 6]; 6],
}

impl LinearElastic {
    /// Isotropic (cubic-form) stiffness from `C11` and `C12`.
    pub fn isotropic(reference: Mat3, c11: f64, c12: f64) -> Self {
        let mut c = [[0.0; 6]; 6];
        for i in 0..3 {
            for j in 0..3 {
                c[i][j] = if i == j { c11 } else { c12 };
            }
            c[i + 3][i + 3] = 0.5 * (c11 - c12);
        }
        Self {
            reference,
            stiffness: c,
        }
    }
}

impl Potential for LinearElastic {
    fn predict(&self, s: &CrystalStructure) -> Result<PredictionSet> {
        let inv = self.reference.try_inverse().ok_or(Error::SingularLattice)?;
        let m = inv * s.lattice;
        let eps = 0.5 * (m + m.transpose()) - Mat3::identity();
        let e = [
            eps[(0, 0)],
            eps[(1, 1)],
            eps[(2, 2)],
            2.0 * eps[(1, 2)],
            2.0 * eps[(0, 2)],
            2.0 * eps[(0, 1)],
        ];
        let mut sigma = [0.0; 6];
        for i in 0..6 {
            sigma[i] = (0..6).map(|j| self.stiffness[i][j] * e[j]).sum::<f64>() / EV_PER_A3_TO_GPA;
        }
        let volume = self.reference.determinant().abs();
        let energy = 0.5 * volume * (0..6).map(|i| sigma[i] * e[i]).sum::<f64>();
        let stress = Mat3::new(
            sigma[0], sigma[5], sigma[4], //
            sigma[5], sigma[1], sigma[3], //
            sigma[4], sigma[3], sigma[2],
        );
        Ok(PredictionSet {
            energy,
            forces: vec![Vec3::zeros(); s.len()],
            stress,
        })
    }
}
