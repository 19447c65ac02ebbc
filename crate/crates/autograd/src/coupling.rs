//! Sparse bilinear contractions used for Clebsch-Gordan couplings.
//!
//! A [`CouplingTerms`] table is a list of `(i, j, k, coefficient)` entries. Two
//! kernels consume it, and the pair is closed under differentiation:
//!
//! * couple:   `out[e, k, c] += coef * a[e, i, c] * b[e, j]`
//! * contract: `out[e, k]    += coef * <x[e, i, :], y[e, j, :]>`

#[derive(Debug, Clone, PartialEq)]
pub struct CouplingTerms {
    entries: Vec<(u32, u32, u32, f64)>,
    dims: [usize; 3],
}

impl CouplingTerms {
    /// `dims` are the extents of the `i`, `j`, `k` index ranges.
    pub fn new(dims: [usize; 3], entries: Vec<(usize, usize, usize, f64)>) -> Self {
        let entries = entries
            .into_iter()
            .inspect(|&(i, j, k, _)| {
                assert!(i < dims[0] && j < dims[1] && k < dims[2], "coupling index out of range");
            })
            .map(|(i, j, k, c)| (i as u32, j as u32, k as u32, c))
            .collect();
        CouplingTerms { entries, dims }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn entries(&self) -> impl Iterator<Item = (usize, usize, usize, f64)> + '_ {
        self.entries
            .iter()
            .map(|&(i, j, k, c)| (i as usize, j as usize, k as usize, c))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Reorders the index roles: the new `(i, j, k)` are the old indices at positions `perm`.
    pub(crate) fn permuted(&self, perm: [usize; 3]) -> CouplingTerms {
        let entries = self
            .entries
            .iter()
            .map(|&(i, j, k, c)| {
                let idx = [i, j, k];
                (idx[perm[0]], idx[perm[1]], idx[perm[2]], c)
            })
            .collect();
        CouplingTerms {
            entries,
            dims: [self.dims[perm[0]], self.dims[perm[1]], self.dims[perm[2]]],
        }
    }
}

pub(crate) fn couple(terms: &CouplingTerms, a: &[f64], b: &[f64], rows: usize, channels: usize) -> Vec<f64> {
    let [di, dj, dk] = terms.dims;
    let mut out = vec![0.0; rows * dk * channels];
    for e in 0..rows {
        let a_row = &a[e * di * channels..(e + 1) * di * channels];
        let b_row = &b[e * dj..(e + 1) * dj];
        let o_row = &mut out[e * dk * channels..(e + 1) * dk * channels];
        for &(i, j, k, c) in &terms.entries {
            let s = c * b_row[j as usize];
            if s == 0.0 {
                continue;
            }
            let src = &a_row[i as usize * channels..(i as usize + 1) * channels];
            let dst = &mut o_row[k as usize * channels..(k as usize + 1) * channels];
            for (d, x) in dst.iter_mut().zip(src) {
                *d += s * x;
            }
        }
    }
    out
}

pub(crate) fn contract(terms: &CouplingTerms, x: &[f64], y: &[f64], rows: usize, channels: usize) -> Vec<f64> {
    let [di, dj, dk] = terms.dims;
    let mut out = vec![0.0; rows * dk];
    for e in 0..rows {
        let x_row = &x[e * di * channels..(e + 1) * di * channels];
        let y_row = &y[e * dj * channels..(e + 1) * dj * channels];
        for &(i, j, k, c) in &terms.entries {
            let xs = &x_row[i as usize * channels..(i as usize + 1) * channels];
            let ys = &y_row[j as usize * channels..(j as usize + 1) * channels];
            let dot: f64 = xs.iter().zip(ys).map(|(p, q)| p * q).sum();
            out[e * dk + k as usize] += c * dot;
        }
    }
    out
}
