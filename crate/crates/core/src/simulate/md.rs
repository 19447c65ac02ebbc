//! Velocity-Verlet and Langevin (BAOAB) integrators.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::crystal::{CrystalStructure, Vec3};
use crate::elements;
use crate::error::{Error, Result};
use crate::potential::Potential;

use super::{ACCELERATION, BOLTZMANN};

/// Positions, velocities (Å/fs) and masses (amu) of a running simulation.
#[derive(Clone, Debug, PartialEq)]
pub struct MdState {
    pub structure: CrystalStructure,
    pub velocities: Vec<Vec3>,
    pub masses: Vec<f64>,
    /// fs
    pub time: f64,
    /// Forces at the current positions (eV/Å).
    pub forces: Vec<Vec3>,
    /// eV
    pub potential_energy: f64,
}

impl MdState {
    /// State at rest with standard atomic masses.
    pub fn new(structure: CrystalStructure, potential: &dyn Potential) -> Result<Self> {
        let masses = structure
            .atomic_numbers
            .iter()
            .map(|&z| elements::mass(z))
            .collect::<Result<Vec<_>>>()?;
        let n = structure.len();
        Self::with_velocities(structure, vec![Vec3::zeros(); n], masses, potential)
    }

    pub fn with_velocities(
        structure: CrystalStructure,
        velocities: Vec<Vec3>,
        masses: Vec<f64>,
        potential: &dyn Potential,
    ) -> Result<Self> {
        let n = structure.len();
        if velocities.len() != n || masses.len() != n {
            return Err(Error::InvalidArgument(format!(
                "{n} atoms, {} velocities, {} masses",
                velocities.len(),
                masses.len()
            )));
        }
        if masses.iter().any(|&m| !(m > 0.0)) {
            return Err(Error::InvalidArgument("masses must be positive".into()));
        }
        let p = potential.predict(&structure)?;
        Ok(Self {
            structure,
            velocities,
            masses,
            time: 0.0,
            forces: p.forces,
            potential_energy: p.energy,
        })
    }

    /// Maxwell–Boltzmann velocities at `temperature` (K) with the centre-of-mass
    /// motion removed.
    pub fn randomize_velocities(&mut self, temperature: f64, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (v, &m) in self.velocities.iter_mut().zip(&self.masses) {
            let s = (BOLTZMANN * temperature / m * ACCELERATION).sqrt();
            *v = Vec3::new(
                s * rng.sample::<f64, _>(StandardNormal),
                s * rng.sample::<f64, _>(StandardNormal),
                s * rng.sample::<f64, _>(StandardNormal),
            );
        }
        let total: f64 = self.masses.iter().sum();
        let com = self
            .velocities
            .iter()
            .zip(&self.masses)
            .fold(Vec3::zeros(), |acc, (v, &m)| acc + m * v)
            / total;
        if self.velocities.len() > 1 {
            self.velocities.iter_mut().for_each(|v| *v -= com);
        }
    }

    /// eV
    pub fn kinetic_energy(&self) -> f64 {
        0.5 * self
            .velocities
            .iter()
            .zip(&self.masses)
            .map(|(v, &m)| m * v.norm_squared())
            .sum::<f64>()
            / ACCELERATION
    }

    /// Instantaneous kinetic temperature (K) over 3N degrees of freedom.
    pub fn temperature(&self) -> f64 {
        let n = self.masses.len();
        if n == 0 {
            return 0.0;
        }
        2.0 * self.kinetic_energy() / (3.0 * n as f64 * BOLTZMANN)
    }

    pub fn total_energy(&self) -> f64 {
        self.kinetic_energy() + self.potential_energy
    }

    fn kick(&mut self, dt: f64) {
        for ((v, f), &m) in self.velocities.iter_mut().zip(&self.forces).zip(&self.masses) {
            *v += (dt * ACCELERATION / m) * f;
        }
    }

    fn drift(&mut self, dt: f64) {
        for (p, v) in self.structure.positions.iter_mut().zip(&self.velocities) {
            *p += dt * v;
        }
    }

    fn refresh(&mut self, potential: &dyn Potential) -> Result<()> {
        let p = potential.predict(&self.structure)?;
        self.forces = p.forces;
        self.potential_energy = p.energy;
        Ok(())
    }
}

/// Energies after one step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnergyRecord {
    pub step: usize,
    pub time: f64,
    pub kinetic: f64,
    pub potential: f64,
    pub total: f64,
    pub temperature: f64,
}

impl EnergyRecord {
    fn of(step: usize, s: &MdState) -> Self {
        let kinetic = s.kinetic_energy();
        Self {
            step,
            time: s.time,
            kinetic,
            potential: s.potential_energy,
            total: kinetic + s.potential_energy,
            temperature: s.temperature(),
        }
    }
}

/// Langevin bath: target temperature (K), friction (1/fs) and noise seed.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Thermostat {
    pub temperature: f64,
    pub friction: f64,
    pub seed: u64,
}

fn run(
    state: &mut MdState,
    potential: &dyn Potential,
    dt: f64,
    steps: usize,
    thermostat: Option<Thermostat>,
    observer: &mut dyn FnMut(&MdState) -> Result<()>,
) -> Result<Vec<EnergyRecord>> {
    if !(dt > 0.0) {
        return Err(Error::InvalidArgument(format!("time step must be positive, got {dt}")));
    }
    let mut rng = thermostat.map(|t| ChaCha8Rng::seed_from_u64(t.seed));
    let mut log = Vec::with_capacity(steps);
    for step in 1..=steps {
        state.kick(0.5 * dt);
        match (thermostat, rng.as_mut()) {
            (Some(t), Some(rng)) if t.friction > 0.0 => {
                state.drift(0.5 * dt);
                let c1 = (-t.friction * dt).exp();
                for (v, &m) in state.velocities.iter_mut().zip(&state.masses) {
                    let c2 = ((1.0 - c1 * c1) * BOLTZMANN * t.temperature / m * ACCELERATION).sqrt();
                    let xi = Vec3::new(
                        rng.sample::<f64, _>(StandardNormal),
                        rng.sample::<f64, _>(StandardNormal),
                        rng.sample::<f64, _>(StandardNormal),
                    );
                    *v = c1 * *v + c2 * xi;
                }
                state.drift(0.5 * dt);
            }
            _ => state.drift(dt),
        }
        state.refresh(potential)?;
        state.kick(0.5 * dt);
        state.time += dt;
        if state.velocities.iter().any(|v| !v.iter().all(|x| x.is_finite())) {
            return Err(Error::InvalidArgument(format!("non-finite velocity at step {step}")));
        }
        log.push(EnergyRecord::of(step, state));
        observer(state)?;
    }
    Ok(log)
}

/// Constant-energy dynamics. `observer` sees the state after every step.
pub fn velocity_verlet_nve(
    state: &mut MdState,
    potential: &dyn Potential,
    dt: f64,
    steps: usize,
    mut observer: impl FnMut(&MdState) -> Result<()>,
) -> Result<Vec<EnergyRecord>> {
    run(state, potential, dt, steps, None, &mut observer)
}

/// Langevin dynamics with the BAOAB splitting. Zero friction gives the
/// velocity-Verlet trajectory.
pub fn langevin_thermostat(
    state: &mut MdState,
    potential: &dyn Potential,
    dt: f64,
    steps: usize,
    thermostat: Thermostat,
    mut observer: impl FnMut(&MdState) -> Result<()>,
) -> Result<Vec<EnergyRecord>> {
    if !(thermostat.temperature >= 0.0) || !(thermostat.friction >= 0.0) {
        return Err(Error::InvalidArgument(format!("invalid thermostat {thermostat:?}")));
    }
    run(state, potential, dt, steps, Some(thermostat), &mut observer)
}
