//! Radial Bessel edge features with a smooth polynomial cutoff, and one-hot
//! element embeddings.

use std::f64::consts::PI;
use std::rc::Rc;

use hienet_autograd::{Tape, Var};

use crate::crystal::MAX_ATOMIC_NUMBER;
use crate::error::{Error, Result};

pub const NUM_ELEMENTS: usize = MAX_ATOMIC_NUMBER as usize;

fn envelope_coefficients(p: u32) -> (f64, f64, f64) {
    let p = p as f64;
    ((p + 1.0) * (p + 2.0) / 2.0, p * (p + 2.0), p * (p + 1.0) / 2.0)
}

/// Polynomial cutoff of the scaled distance `d = r / r_cut`; exactly zero for
/// `d >= 1`, with vanishing first and second derivatives there.
pub fn envelope(d: f64, p: u32) -> f64 {
    if d >= 1.0 {
        return 0.0;
    }
    let (a, b, c) = envelope_coefficients(p);
    let dp = d.powi(p as i32);
    1.0 - a * dp + b * dp * d - c * dp * d * d
}

/// First derivative of [`envelope`] with respect to `d`.
pub fn envelope_derivative(d: f64, p: u32) -> f64 {
    if d >= 1.0 {
        return 0.0;
    }
    let (a, b, c) = envelope_coefficients(p);
    let pf = p as f64;
    let dm = d.powi(p as i32 - 1);
    -a * pf * dm + b * (pf + 1.0) * dm * d - c * (pf + 2.0) * dm * d * d
}

/// `n_bessel` radial features `2 sin(nπr/r_cut) / (r_cut·r) · envelope(r/r_cut)`
/// for `n = 1..=n_bessel`.
pub fn bessel_embed(r: f64, cutoff: f64, n_bessel: usize, p: u32) -> Result<Vec<f64>> {
    if !(r > 0.0) {
        return Err(Error::CoincidentAtoms);
    }
    let env = envelope(r / cutoff, p);
    Ok((1..=n_bessel)
        .map(|n| 2.0 * (n as f64 * PI * r / cutoff).sin() / (cutoff * r) * env)
        .collect())
}

/// Envelope of `(rows, 1)` scaled distances on a tape.
pub fn envelope_on_tape(tape: &Tape, d: Var, p: u32) -> Result<Var> {
    let (a, b, c) = envelope_coefficients(p);
    let dp = tape.powf(d, p as f64);
    // 1 + d^p (−a + d (b − c d))
    let inner = tape.offset(tape.scale(d, -c), b);
    let inner = tape.offset(tape.mul(d, inner)?, -a);
    let poly = tape.offset(tape.mul(dp, inner)?, 1.0);
    let mask: Vec<f64> = tape
        .value(d)
        .iter()
        .map(|&x| if x < 1.0 { 1.0 } else { 0.0 })
        .collect();
    let mask = tape.constant(mask, &tape.shape(d))?;
    Ok(tape.mul(poly, mask)?)
}

/// Bessel features of `(rows, 1)` distances, `(rows, n_bessel)`, given the
/// precomputed envelope `(rows, 1)`.
pub fn bessel_on_tape(tape: &Tape, r: Var, env: Var, cutoff: f64, n_bessel: usize) -> Result<Var> {
    let freq: Vec<f64> = (1..=n_bessel).map(|n| n as f64 * PI / cutoff).collect();
    let freq = tape.constant(freq, &[1, n_bessel])?;
    let phase = tape.matmul(r, freq)?;
    let s = tape.sin(phase);
    let radial = tape.div(tape.scale(env, 2.0 / cutoff), r)?;
    Ok(tape.mul(s, radial)?)
}

/// Row indices (`z - 1`) into the element table.
pub fn element_indices(atomic_numbers: &[u32]) -> Result<Rc<[usize]>> {
    atomic_numbers
        .iter()
        .map(|&z| {
            if z == 0 || z > MAX_ATOMIC_NUMBER {
                Err(Error::UnknownElement(z))
            } else {
                Ok(z as usize - 1)
            }
        })
        .collect()
}

/// Columns of the `(d, 118)` embedding matrix for each atom, as `(n, d)`.
pub fn embed_nodes(atomic_numbers: &[u32], embedding: &[f64], dim: usize) -> Result<Vec<Vec<f64>>> {
    if embedding.len() != dim * NUM_ELEMENTS {
        return Err(Error::Layout(format!(
            "embedding has {} entries, expected {dim}x{NUM_ELEMENTS}",
            embedding.len()
        )));
    }
    let idx = element_indices(atomic_numbers)?;
    Ok(idx
        .iter()
        .map(|&z| (0..dim).map(|k| embedding[k * NUM_ELEMENTS + z]).collect())
        .collect())
}

/// Tape version of [`embed_nodes`]: `embedding` is `(d, 118)`.
pub fn embed_nodes_on_tape(tape: &Tape, atomic_numbers: &[u32], embedding: Var) -> Result<Var> {
    let idx = element_indices(atomic_numbers)?;
    let table = tape.transpose(embedding)?;
    Ok(tape.gather(table, idx)?)
}
