//! BFGS relaxation of atomic positions and, optionally, the cell.

use nalgebra::{DMatrix, DVector};

use crate::crystal::{CrystalStructure, Mat3, Vec3};
use crate::error::{Error, Result};
use crate::potential::{Potential, PredictionSet};

/// Default force tolerance (eV/Å).
pub const DEFAULT_FORCE_TOLERANCE: f64 = 0.1;

/// Curvature guess for the initial inverse Hessian (eV/Å²).
const INITIAL_CURVATURE: f64 = 70.0;
/// Largest displacement of any coordinate in one step (Å).
const MAX_STEP: f64 = 0.2;
const ARMIJO: f64 = 1e-4;
const MAX_BACKTRACK: usize = 30;

#[derive(Clone, Debug, PartialEq)]
pub struct RelaxOptions {
    pub force_tolerance: f64,
    pub max_steps: usize,
    pub relax_cell: bool,
}

impl Default for RelaxOptions {
    fn default() -> Self {
        Self {
            force_tolerance: DEFAULT_FORCE_TOLERANCE,
            max_steps: 500,
            relax_cell: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RelaxResult {
    pub structure: CrystalStructure,
    pub prediction: PredictionSet,
    pub converged: bool,
    pub steps: usize,
    /// Energy after each accepted step, starting with the initial energy.
    pub energies: Vec<f64>,
}

/// Coordinates: reference-frame positions followed by six strain
/// components scaled to length units. Actual positions and cell are the
/// reference ones deformed by `I + ε`.
struct Frame<'a> {
    reference: &'a CrystalStructure,
    relax_cell: bool,
    strain_scale: f64,
}

impl Frame<'_> {
    fn dim(&self) -> usize {
        3 * self.reference.len() + if self.relax_cell { 6 } else { 0 }
    }

    fn strain(&self, x: &DVector<f64>) -> Mat3 {
        if !self.relax_cell {
            return Mat3::zeros();
        }
        let o = 3 * self.reference.len();
        let u: Vec<f64> = (0..6).map(|i| x[o + i] / self.strain_scale).collect();
        Mat3::new(u[0], u[5], u[4], u[5], u[1], u[3], u[4], u[3], u[2])
    }

    fn structure(&self, x: &DVector<f64>) -> Result<CrystalStructure> {
        let deform = Mat3::identity() + self.strain(x);
        let positions = (0..self.reference.len())
            .map(|i| deform.transpose() * Vec3::new(x[3 * i], x[3 * i + 1], x[3 * i + 2]))
            .collect();
        CrystalStructure::new(
            self.reference.atomic_numbers.clone(),
            positions,
            self.reference.lattice * deform,
        )
    }

    /// Energy gradient in frame coordinates.
    fn gradient(&self, x: &DVector<f64>, p: &PredictionSet, volume: f64) -> DVector<f64> {
        let deform = Mat3::identity() + self.strain(x);
        let mut g = DVector::zeros(self.dim());
        for (i, f) in p.forces.iter().enumerate() {
            let gi = -(deform * f);
            g.rows_mut(3 * i, 3).copy_from(&gi);
        }
        if self.relax_cell {
            let inv = deform.try_inverse().unwrap_or_else(Mat3::identity);
            let gs = volume * inv.transpose() * p.stress;
            let o = 3 * self.reference.len();
            let comps = [
                gs[(0, 0)],
                gs[(1, 1)],
                gs[(2, 2)],
                gs[(1, 2)] + gs[(2, 1)],
                gs[(0, 2)] + gs[(2, 0)],
                gs[(0, 1)] + gs[(1, 0)],
            ];
            for (k, c) in comps.iter().enumerate() {
                g[o + k] = c / self.strain_scale;
            }
        }
        g
    }
}

fn max_force(g: &DVector<f64>, n_atoms: usize) -> f64 {
    let atoms = (0..n_atoms)
        .map(|i| g.rows(3 * i, 3).norm())
        .fold(0.0, f64::max);
    let cell = g.rows(3 * n_atoms, g.len() - 3 * n_atoms).amax();
    atoms.max(cell)
}

/// Quasi-Newton minimisation of the energy with a backtracking (Armijo)
/// line search, so every accepted step lowers the energy. Stops when the
/// largest atomic force (and cell gradient, when relaxing the cell) drops
/// below the tolerance.
pub fn relax(structure: &CrystalStructure, potential: &dyn Potential, options: &RelaxOptions) -> Result<RelaxResult> {
    if !(options.force_tolerance > 0.0) {
        return Err(Error::InvalidArgument("force tolerance must be positive".into()));
    }
    let n = structure.len();
    let frame = Frame {
        reference: structure,
        relax_cell: options.relax_cell,
        strain_scale: structure.volume().cbrt(),
    };
    let dim = frame.dim();
    let mut x = DVector::zeros(dim);
    for (i, p) in structure.positions.iter().enumerate() {
        x.rows_mut(3 * i, 3).copy_from(p);
    }
    let mut current = structure.clone();
    let mut pred = potential.predict(&current)?;
    let mut g = frame.gradient(&x, &pred, current.volume());
    let mut energies = vec![pred.energy];
    let mut h = DMatrix::identity(dim, dim) / INITIAL_CURVATURE;
    let mut steps = 0;

    while max_force(&g, n) >= options.force_tolerance {
        if steps == options.max_steps {
            return Ok(RelaxResult {
                structure: current,
                prediction: pred,
                converged: false,
                steps,
                energies,
            });
        }
        let mut dir = -(&h * &g);
        if dir.dot(&g) >= 0.0 {
            h = DMatrix::identity(dim, dim) / INITIAL_CURVATURE;
            dir = -&g / INITIAL_CURVATURE;
        }
        let longest = dir.amax();
        if longest > MAX_STEP {
            dir *= MAX_STEP / longest;
        }
        let slope = dir.dot(&g);
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..MAX_BACKTRACK {
            let trial = &x + t * &dir;
            if let Ok(s) = frame.structure(&trial) {
                if let Ok(p) = potential.predict(&s) {
                    if p.energy <= pred.energy + ARMIJO * t * slope && p.energy < pred.energy {
                        accepted = Some((trial, s, p));
                        break;
                    }
                }
            }
            t *= 0.5;
        }
        // Extend steps that succeed outright, e.g. across regions of negative
        // curvature where the quasi-Newton model underestimates the step.
        if t == 1.0 {
            while let Some((_, _, best)) = accepted.as_ref() {
                let t2 = 2.0 * t;
                if t2 * dir.amax() > MAX_STEP {
                    break;
                }
                let trial = &x + t2 * &dir;
                let Ok(s) = frame.structure(&trial) else { break };
                let Ok(p) = potential.predict(&s) else { break };
                if p.energy < best.energy && p.energy <= pred.energy + ARMIJO * t2 * slope {
                    accepted = Some((trial, s, p));
                    t = t2;
                } else {
                    break;
                }
            }
        }
        let Some((x_new, s_new, p_new)) = accepted else {
            // No further decrease is resolvable; report the best point.
            return Ok(RelaxResult {
                structure: current,
                prediction: pred,
                converged: false,
                steps,
                energies,
            });
        };
        let g_new = frame.gradient(&x_new, &p_new, s_new.volume());
        let s = &x_new - &x;
        let y = &g_new - &g;
        let sy = s.dot(&y);
        if sy > 1e-12 {
            let hy = &h * &y;
            let yhy = y.dot(&hy);
            h += ((sy + yhy) / (sy * sy)) * (&s * s.transpose()) - (&hy * s.transpose() + &s * hy.transpose()) / sy;
        }
        x = x_new;
        current = s_new;
        pred = p_new;
        g = g_new;
        energies.push(pred.energy);
        steps += 1;
    }
    Ok(RelaxResult {
        structure: current,
        prediction: pred,
        converged: true,
        steps,
        energies,
    })
}
