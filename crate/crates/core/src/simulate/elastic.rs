//! Elastic stiffness from stress–strain fits, and Voigt/Reuss/Hill bulk moduli.

use nalgebra::{Matrix6, Vector6};
use rayon::prelude::*;

use crate::crystal::{CrystalStructure, StrainTensor};
use crate::error::{Error, Result};
use crate::potential::{Potential, EV_PER_A3_TO_GPA};

/// Strain magnitudes applied to normal (xx, yy, zz) modes, each with both signs.
pub const NORMAL_STRAINS: [f64; 2] = [0.005, 0.01];
/// Engineering strain magnitudes applied to shear (yz, xz, xy) modes.
pub const SHEAR_STRAINS: [f64; 2] = [0.06, 0.03];

/// Largest tolerated condition number of the stiffness matrix.
const MAX_CONDITION: f64 = 1e12;

#[derive(Clone, Debug, PartialEq)]
pub struct ElasticOptions {
    pub normal_strains: Vec<f64>,
    pub shear_strains: Vec<f64>,
}

impl Default for ElasticOptions {
    fn default() -> Self {
        Self {
            normal_strains: NORMAL_STRAINS.to_vec(),
            shear_strains: SHEAR_STRAINS.to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ElasticResult {
    /// Stiffness in Voigt order xx, yy, zz, yz, xz, xy (GPa).
    pub stiffness: Matrix6<f64>,
    pub k_voigt: f64,
    pub k_reuss: f64,
    pub k_vrh: f64,
    /// Coefficient of determination of each mode's fit of its own stress component.
    pub r_squared: [f64; 6],
}

impl ElasticResult {
    pub fn from_stiffness(c: Matrix6<f64>, r_squared: [f64; 6]) -> Result<Self> {
        let k_voigt = (c[(0, 0)] + c[(1, 1)] + c[(2, 2)] + 2.0 * (c[(0, 1)] + c[(0, 2)] + c[(1, 2)])) / 9.0;
        let svd = c.svd(false, false);
        let smax = svd.singular_values.max();
        let smin = svd.singular_values.min();
        if !(smax > 0.0) || smax / smin > MAX_CONDITION {
            return Err(Error::SingularMatrix);
        }
        let s = c.try_inverse().ok_or(Error::SingularMatrix)?;
        let k_reuss = 1.0 / (s[(0, 0)] + s[(1, 1)] + s[(2, 2)] + 2.0 * (s[(0, 1)] + s[(0, 2)] + s[(1, 2)]));
        Ok(Self {
            stiffness: c,
            k_voigt,
            k_reuss,
            k_vrh: 0.5 * (k_voigt + k_reuss),
            r_squared,
        })
    }
}

fn voigt_stress(s: &nalgebra::Matrix3<f64>) -> Vector6<f64> {
    Vector6::new(s[(0, 0)], s[(1, 1)], s[(2, 2)], s[(1, 2)], s[(0, 2)], s[(0, 1)]) * EV_PER_A3_TO_GPA
}

/// Slope and R² of a least-squares line through `(x, y)`.
fn fit_line(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let slope = sxy / sxx;
    let ss_tot: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    let ss_res: f64 = x
        .iter()
        .zip(y)
        .map(|(a, b)| (b - my - slope * (a - mx)).powi(2))
        .sum();
    let r2 = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 };
    (slope, r2)
}

/// Applies each Voigt strain mode at `±` the configured magnitudes and fits
/// the stress linearly; the slopes form the columns of the stiffness.
pub fn elastic_tensor(
    structure: &CrystalStructure,
    potential: &dyn Potential,
    options: &ElasticOptions,
) -> Result<ElasticResult> {
    let mut jobs = Vec::new();
    for mode in 0..6 {
        let mags = if mode < 3 { &options.normal_strains } else { &options.shear_strains };
        for &m in mags {
            jobs.push((mode, m));
            jobs.push((mode, -m));
        }
    }
    let stresses: Vec<Vector6<f64>> = jobs
        .par_iter()
        .map(|&(mode, e)| {
            let mut v = [0.0; 6];
            v[mode] = e;
            let s = structure.apply_strain(&StrainTensor::from_voigt(v))?;
            Ok(voigt_stress(&potential.predict(&s)?.stress))
        })
        .collect::<Result<_>>()?;
    let mut c = Matrix6::zeros();
    let mut r_squared = [1.0; 6];
    for mode in 0..6 {
        let idx: Vec<usize> = (0..jobs.len()).filter(|&k| jobs[k].0 == mode).collect();
        let x: Vec<f64> = idx.iter().map(|&k| jobs[k].1).collect();
        for row in 0..6 {
            let y: Vec<f64> = idx.iter().map(|&k| stresses[k][row]).collect();
            let (slope, r2) = fit_line(&x, &y);
            c[(row, mode)] = slope;
            if row == mode {
                r_squared[mode] = r2;
            }
        }
    }
    ElasticResult::from_stiffness(c, r_squared)
}

/// Bulk modulus `V·d²E/dV²` (GPa) by central differences of the energy under
/// isotropic volume changes of relative size `h`.
pub fn bulk_modulus_from_energy(structure: &CrystalStructure, potential: &dyn Potential, h: f64) -> Result<f64> {
    let energy = |dv: f64| -> Result<f64> {
        let s = (1.0 + dv).cbrt() - 1.0;
        let strained = structure.apply_strain(&StrainTensor::isotropic(s))?;
        Ok(potential.predict(&strained)?.energy)
    };
    let v = structure.volume();
    let d2 = (energy(h)? - 2.0 * energy(0.0)? + energy(-h)?) / (h * v).powi(2);
    Ok(v * d2 * EV_PER_A3_TO_GPA)
}
