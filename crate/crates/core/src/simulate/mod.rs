//! Molecular dynamics, relaxation, phonons and elastic constants driven by
//! any [`Potential`](crate::potential::Potential).
//!
//! Units are eV, Å, amu and fs throughout.

pub mod elastic;
pub mod md;
pub mod mock;
pub mod phonon;
pub mod relax;

pub use elastic::{bulk_modulus_from_energy, elastic_tensor, ElasticOptions, ElasticResult};
pub use md::{langevin_thermostat, velocity_verlet_nve, EnergyRecord, MdState, Thermostat};
pub use phonon::{finite_displacement_phonons, ForceConstants};
pub use relax::{relax, RelaxOptions, RelaxResult};

/// Acceleration in Å/fs² of a 1 eV/Å force on a 1 amu mass.
pub const ACCELERATION: f64 = 0.009648533215665328;
/// Boltzmann constant in eV/K.
pub const BOLTZMANN: f64 = 8.617333262e-5;
/// Converts `sqrt(eV/Å²/amu)` to THz (cycles, not radians).
pub const THZ_PER_SQRT_EV_A2_AMU: f64 = 15.633304239856193;
