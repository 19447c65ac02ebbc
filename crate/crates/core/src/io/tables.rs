//! CSV renderings of metric logs and workflow results.

use std::fmt::Write as _;

use crate::crystal::Vec3;
use crate::simulate::{ElasticResult, EnergyRecord};
use crate::training::EpochMetrics;

pub fn metrics_csv(log: &[EpochMetrics]) -> String {
    let mut out = "epoch,split,mae_e,mae_f,mae_s,lr\n".to_string();
    for m in log {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            m.epoch,
            m.split.name(),
            m.mae_energy,
            m.mae_force,
            m.mae_stress,
            m.lr
        );
    }
    out
}

pub fn phonon_csv(q_points: &[Vec3], frequencies: &[Vec<f64>]) -> String {
    let mut out = "q1,q2,q3,branch,omega_THz\n".to_string();
    for (q, w) in q_points.iter().zip(frequencies) {
        for (b, f) in w.iter().enumerate() {
            let _ = writeln!(out, "{},{},{},{b},{f}", q.x, q.y, q.z);
        }
    }
    out
}

pub fn elastic_csv(r: &ElasticResult) -> String {
    let mut out = "quantity,value_GPa\n".to_string();
    for i in 0..6 {
        for j in 0..6 {
            let _ = writeln!(out, "C{}{},{}", i + 1, j + 1, r.stiffness[(i, j)]);
        }
    }
    let _ = writeln!(out, "K_voigt,{}", r.k_voigt);
    let _ = writeln!(out, "K_reuss,{}", r.k_reuss);
    let _ = writeln!(out, "K_vrh,{}", r.k_vrh);
    out
}

pub fn energy_csv(records: &[EnergyRecord]) -> String {
    let mut out = "step,time_fs,kinetic_eV,potential_eV,total_eV,temperature_K\n".to_string();
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.step, r.time, r.kinetic, r.potential, r.total, r.temperature
        );
    }
    out
}
