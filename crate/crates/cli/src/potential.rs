//! `--potential` selection: a checkpoint file or a built-in analytic model.

use std::path::Path;

use anyhow::{bail, Context, Result};
use hienet_core::crystal::CrystalStructure;
use hienet_core::io::Checkpoint;
use hienet_core::potential::{Model, Potential};
use hienet_core::simulate::mock::LinearElastic;
use hienet_core::training::LennardJones;

/// Parses comma-separated reals, requiring exactly `n`.
pub fn reals(text: &str, n: usize, what: &str) -> Result<Vec<f64>> {
    let v: Vec<f64> = text
        .split(',')
        .map(|t| t.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .with_context(|| format!("{what}: expected {n} comma-separated numbers, got {text:?}"))
        .map_err(config_error)?;
    if v.len() != n {
        bail!(config_error(anyhow::anyhow!("{what}: expected {n} values, got {}", v.len())));
    }
    Ok(v)
}

pub fn config_error(e: anyhow::Error) -> anyhow::Error {
    anyhow::Error::new(hienet_core::Error::Config(format!("{e:#}")))
}

/// `lj`, `lj:EPS,SIGMA,RCUT`, `isotropic:C11,C12` (GPa, referenced to the
/// input cell) or a checkpoint path.
pub fn load(spec: &str, reference: &CrystalStructure) -> Result<Box<dyn Potential>> {
    if spec == "lj" {
        return Ok(Box::new(LennardJones::argon_krypton(5.0)));
    }
    if let Some(args) = spec.strip_prefix("lj:") {
        let v = reals(args, 3, "lj")?;
        return Ok(Box::new(LennardJones::new(v[0], v[1], v[2])?));
    }
    if let Some(args) = spec.strip_prefix("isotropic:") {
        let v = reals(args, 2, "isotropic")?;
        return Ok(Box::new(LinearElastic::isotropic(reference.lattice, v[0], v[1])));
    }
    Ok(Box::new(load_model(Path::new(spec))?))
}

/// Model with the averaged weights of a checkpoint.
pub fn load_model(path: &Path) -> Result<Model> {
    let ckpt = Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    Ok(ckpt.model()?)
}
