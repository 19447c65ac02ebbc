//! Finite-displacement force constants and phonon frequencies.

use std::f64::consts::PI;

use nalgebra::{DMatrix, SymmetricEigen};
use num_complex::Complex64;
use rayon::prelude::*;

use crate::crystal::{CrystalStructure, Mat3, Vec3};
use crate::elements;
use crate::error::{Error, Result};
use crate::potential::Potential;

use super::THZ_PER_SQRT_EV_A2_AMU;

/// Default displacement (Å).
pub const DEFAULT_DISPLACEMENT: f64 = 0.01;
/// Largest tolerated anti-Hermitian part of a dynamical matrix, relative to its largest entry.
pub const HERMITICITY_TOLERANCE: f64 = 1e-6;

/// Force constants of a supercell built from a unit cell.
#[derive(Clone, Debug, PartialEq)]
pub struct ForceConstants {
    pub unit_cell: CrystalStructure,
    pub supercell: CrystalStructure,
    pub diag: [usize; 3],
    /// `(3 n_sc) × (3 n_sc)` in eV/Å², symmetrized.
    pub matrix: DMatrix<f64>,
    pub displacement: f64,
}

impl ForceConstants {
    /// Central differences of the forces under `±displacement` of every
    /// supercell atom along three orthonormal axes attached to the lattice,
    /// so the sampled configurations rotate with the structure.
    pub fn compute(
        unit_cell: &CrystalStructure,
        potential: &dyn Potential,
        diag: [usize; 3],
        displacement: f64,
    ) -> Result<Self> {
        if !(displacement > 0.0) {
            return Err(Error::InvalidArgument("displacement must be positive".into()));
        }
        let supercell = unit_cell.make_supercell(diag)?;
        let n = supercell.len();
        let axes = lattice_axes(&supercell);
        let columns: Vec<Vec<f64>> = (0..3 * n)
            .into_par_iter()
            .map(|col| {
                let forces = |sign: f64| -> Result<Vec<Vec3>> {
                    let mut s = supercell.clone();
                    s.positions[col / 3] += axes.column(col % 3) * (sign * displacement);
                    Ok(potential.predict(&s)?.forces)
                };
                let plus = forces(1.0)?;
                let minus = forces(-1.0)?;
                Ok((0..3 * n)
                    .map(|row| -(plus[row / 3][row % 3] - minus[row / 3][row % 3]) / (2.0 * displacement))
                    .collect())
            })
            .collect::<Result<_>>()?;
        let raw = DMatrix::from_fn(3 * n, 3 * n, |r, c| {
            let (j, y) = (c / 3, c % 3);
            (0..3).map(|k| columns[3 * j + k][r] * axes[(y, k)]).sum::<f64>()
        });
        let matrix = 0.5 * (&raw + raw.transpose());
        Ok(Self {
            unit_cell: unit_cell.clone(),
            supercell,
            diag,
            matrix,
            displacement,
        })
    }

    /// Largest `‖Σ_j Φ_ij‖` over atoms `i` (eV/Å²).
    pub fn acoustic_sum_violation(&self) -> f64 {
        let n = self.supercell.len();
        (0..n)
            .map(|i| {
                let mut block = nalgebra::Matrix3::<f64>::zeros();
                for j in 0..n {
                    block += self.matrix.fixed_view::<3, 3>(3 * i, 3 * j);
                }
                block.norm()
            })
            .fold(0.0, f64::max)
    }

    /// Mass-weighted dynamical matrix at fractional wavevector `q` of the
    /// unit cell. Each supercell atom is placed at its minimum image relative
    /// to the home-cell atom; equidistant images share the weight.
    pub fn dynamical_matrix(&self, q: Vec3) -> Result<DMatrix<Complex64>> {
        let unit = &self.unit_cell;
        let nu = unit.len();
        let masses = unit
            .atomic_numbers
            .iter()
            .map(|&z| elements::mass(z))
            .collect::<Result<Vec<_>>>()?;
        let [d1, d2, d3] = self.diag;
        let dims = [d1 as i32, d2 as i32, d3 as i32];
        let mut dyn_mat = DMatrix::<Complex64>::zeros(3 * nu, 3 * nu);
        for a in 0..nu {
            let home = unit.positions[a];
            for cell in 0..d1 * d2 * d3 {
                let offset = [(cell / (d2 * d3)) as i32, ((cell / d3) % d2) as i32, (cell % d3) as i32];
                for b in 0..nu {
                    let j = cell * nu + b;
                    let base = Vec3::new(offset[0] as f64, offset[1] as f64, offset[2] as f64);
                    let mut images: Vec<(f64, Vec3)> = Vec::with_capacity(27);
                    for s1 in -1..=1 {
                        for s2 in -1..=1 {
                            for s3 in -1..=1 {
                                let n = base
                                    + Vec3::new(
                                        (s1 * dims[0]) as f64,
                                        (s2 * dims[1]) as f64,
                                        (s3 * dims[2]) as f64,
                                    );
                                let r = unit.to_cartesian(&n) + unit.positions[b] - home;
                                images.push((r.norm(), n));
                            }
                        }
                    }
                    let shortest = images.iter().map(|i| i.0).fold(f64::INFINITY, f64::min);
                    let tol = 1e-5 * shortest.max(1.0);
                    let nearest: Vec<Vec3> = images
                        .iter()
                        .filter(|i| i.0 <= shortest + tol)
                        .map(|i| i.1)
                        .collect();
                    let phase = nearest
                        .iter()
                        .map(|n| Complex64::from_polar(1.0, 2.0 * PI * q.dot(n)))
                        .sum::<Complex64>()
                        / nearest.len() as f64;
                    let w = 1.0 / (masses[a] * masses[b]).sqrt();
                    for x in 0..3 {
                        for y in 0..3 {
                            let phi = self.matrix[(3 * a + x, 3 * j + y)];
                            dyn_mat[(3 * a + x, 3 * b + y)] += phase * (phi * w);
                        }
                    }
                }
            }
        }
        let scale = dyn_mat.iter().map(|z| z.norm()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
        let asym = (&dyn_mat - dyn_mat.adjoint()).iter().map(|z| z.norm()).fold(0.0, f64::max);
        if asym > HERMITICITY_TOLERANCE * scale {
            return Err(Error::NonHermitian(asym / scale));
        }
        Ok((&dyn_mat + dyn_mat.adjoint()) * Complex64::new(0.5, 0.0))
    }

    /// Frequencies (THz) at `q`, ascending; imaginary modes are negative.
    pub fn frequencies(&self, q: Vec3) -> Result<Vec<f64>> {
        let d = self.dynamical_matrix(q)?;
        let eig = SymmetricEigen::new(d).eigenvalues;
        let mut f: Vec<f64> = eig
            .iter()
            .map(|&l| l.signum() * l.abs().sqrt() * THZ_PER_SQRT_EV_A2_AMU)
            .collect();
        f.sort_by(f64::total_cmp);
        Ok(f)
    }
}

/// Orthonormal columns from Gram–Schmidt on the lattice vectors.
fn lattice_axes(structure: &CrystalStructure) -> Mat3 {
    let l = &structure.lattice;
    let a = l.row(0).transpose().normalize();
    let b = l.row(1).transpose();
    let b = (b - a * a.dot(&b)).normalize();
    let c = a.cross(&b);
    let c = if c.dot(&l.row(2).transpose()) < 0.0 { -c } else { c };
    Mat3::from_columns(&[a, b, c])
}

/// Frequencies (THz) at each fractional `q`.
pub fn finite_displacement_phonons(
    structure: &CrystalStructure,
    potential: &dyn Potential,
    diag: [usize; 3],
    displacement: f64,
    q_points: &[Vec3],
) -> Result<Vec<Vec<f64>>> {
    let fc = ForceConstants::compute(structure, potential, diag, displacement)?;
    q_points.iter().map(|&q| fc.frequencies(q)).collect()
}
