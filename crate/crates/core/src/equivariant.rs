//! Real spherical harmonics, Clebsch–Gordan couplings, irreps-typed features,
//! the path-weighted tensor product and the gate nonlinearity.
//!
//! Harmonics use component normalization (`‖Y^l(u)‖² = 2l+1`) with components
//! ordered `m = -l..=l`; for `l = 1` this is `√3·(y, z, x)`. Higher orders are
//! generated by coupling `Y^{l-1} ⊗ Y^1` through the same real Clebsch–Gordan
//! table used by the tensor product, so the two always share one basis.
//!
//! On a tape, an irreps block of order `l` with `mult` channels over `rows`
//! nodes or edges is a `(rows, 2l+1, mult)` array.

use std::collections::BTreeMap;
use std::rc::Rc;
use std::sync::OnceLock;

use hienet_autograd::{CouplingTerms, Tape, Var};
use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::crystal::{Mat3, Vec3};
use crate::error::{Error, Result};

/// Largest rotation order the coupling table supports.
pub const TABLE_LMAX: usize = 4;

fn factorial(n: i64) -> f64 {
    (1..=n).map(|k| k as f64).product()
}

/// Complex-basis coefficient `<j1 m1; j2 m2 | j3 m3>` (Racah formula).
fn complex_cg(j1: i64, m1: i64, j2: i64, m2: i64, j3: i64, m3: i64) -> f64 {
    if m1 + m2 != m3 || j3 < (j1 - j2).abs() || j3 > j1 + j2 {
        return 0.0;
    }
    if m1.abs() > j1 || m2.abs() > j2 || m3.abs() > j3 {
        return 0.0;
    }
    let pre = ((2 * j3 + 1) as f64 * factorial(j3 + j1 - j2) * factorial(j3 - j1 + j2)
        * factorial(j1 + j2 - j3)
        / factorial(j1 + j2 + j3 + 1))
    .sqrt();
    let norm = (factorial(j3 + m3)
        * factorial(j3 - m3)
        * factorial(j1 - m1)
        * factorial(j1 + m1)
        * factorial(j2 - m2)
        * factorial(j2 + m2))
    .sqrt();
    let mut sum = 0.0;
    for k in 0..=(j1 + j2 + j3) {
        let d = [
            k,
            j1 + j2 - j3 - k,
            j1 - m1 - k,
            j2 + m2 - k,
            j3 - j2 + m1 + k,
            j3 - j1 - m2 + k,
        ];
        if d.iter().any(|&x| x < 0) {
            continue;
        }
        let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
        sum += sign / d.iter().map(|&x| factorial(x)).product::<f64>();
    }
    pre * norm * sum
}

/// Unitary change of basis from complex (`μ`) to real (`m`) harmonics.
fn real_basis(l: i64) -> Vec<Vec<Complex64>> {
    let dim = (2 * l + 1) as usize;
    let mut u = vec![vec![Complex64::new(0.0, 0.0); dim]; dim];
    let s = std::f64::consts::FRAC_1_SQRT_2;
    for m in -l..=l {
        let row = (m + l) as usize;
        let a = m.abs();
        let parity = if a % 2 == 0 { 1.0 } else { -1.0 };
        if m > 0 {
            u[row][(a + l) as usize] = Complex64::new(parity * s, 0.0);
            u[row][(-a + l) as usize] = Complex64::new(s, 0.0);
        } else if m < 0 {
            u[row][(a + l) as usize] = Complex64::new(0.0, -parity * s);
            u[row][(-a + l) as usize] = Complex64::new(0.0, s);
        } else {
            u[row][l as usize] = Complex64::new(1.0, 0.0);
        }
    }
    u
}

/// Sparse real Clebsch–Gordan coefficients, orthonormal in the sense
/// `Σ_{m1,m2} C[l1 l2 l3](m1,m2,m3) C[l1 l2 l3'](m1,m2,m3') = δ δ`.
#[derive(Clone, Debug)]
pub struct CgTable {
    lmax: usize,
    blocks: BTreeMap<(usize, usize, usize), Vec<(usize, usize, usize, f64)>>,
    harmonic_scale: Vec<f64>,
}

impl CgTable {
    pub fn new(lmax: usize) -> Result<Self> {
        if lmax > TABLE_LMAX {
            return Err(Error::InvalidArgument(format!(
                "coupling table supports l <= {TABLE_LMAX}, got {lmax}"
            )));
        }
        let mut blocks = BTreeMap::new();
        for l1 in 0..=lmax {
            for l2 in 0..=lmax {
                for l3 in l1.abs_diff(l2)..=(l1 + l2).min(lmax) {
                    blocks.insert((l1, l2, l3), real_block(l1, l2, l3));
                }
            }
        }
        let mut table = Self {
            lmax,
            blocks,
            harmonic_scale: vec![1.0; lmax + 1],
        };
        // Scale each recursively generated order to unit component norm with
        // a positive zonal component at +z.
        let z = Vec3::z();
        for l in 2..=lmax {
            let raw = table.harmonics_unscaled(&z, l);
            let norm = raw[l].iter().map(|v| v * v).sum::<f64>().sqrt();
            let sign = raw[l][l].signum();
            table.harmonic_scale[l] = sign * ((2 * l + 1) as f64).sqrt() / norm;
        }
        Ok(table)
    }

    /// Table for all orders up to [`TABLE_LMAX`], built once per process.
    pub fn shared() -> &'static CgTable {
        static TABLE: OnceLock<CgTable> = OnceLock::new();
        TABLE.get_or_init(|| CgTable::new(TABLE_LMAX).expect("table order within bounds"))
    }

    pub fn lmax(&self) -> usize {
        self.lmax
    }

    /// Nonzero entries `(m1, m2, m3, c)` with indices offset to `0..2l+1`;
    /// `None` when the selection rule forbids the triple.
    pub fn block(&self, l1: usize, l2: usize, l3: usize) -> Option<&[(usize, usize, usize, f64)]> {
        self.blocks.get(&(l1, l2, l3)).map(|v| v.as_slice())
    }

    /// Coefficient with signed magnetic numbers; zero when absent.
    pub fn coefficient(&self, l1: usize, l2: usize, l3: usize, m1: i64, m2: i64, m3: i64) -> f64 {
        let idx = |m: i64, l: usize| (m + l as i64) as usize;
        self.block(l1, l2, l3)
            .and_then(|b| {
                b.iter()
                    .find(|e| (e.0, e.1, e.2) == (idx(m1, l1), idx(m2, l2), idx(m3, l3)))
                    .map(|e| e.3)
            })
            .unwrap_or(0.0)
    }

    /// Iterates all stored entries as `(l1, l2, l3, m1, m2, m3, c)`.
    pub fn entries(&self) -> impl Iterator<Item = (usize, usize, usize, i64, i64, i64, f64)> + '_ {
        self.blocks.iter().flat_map(|(&(l1, l2, l3), b)| {
            b.iter().map(move |&(a, c, d, v)| {
                (
                    l1,
                    l2,
                    l3,
                    a as i64 - l1 as i64,
                    c as i64 - l2 as i64,
                    d as i64 - l3 as i64,
                    v,
                )
            })
        })
    }

    pub fn coupling_terms(&self, l1: usize, l2: usize, l3: usize) -> Result<CouplingTerms> {
        let block = self.block(l1, l2, l3).ok_or_else(|| {
            Error::Layout(format!("coupling ({l1}, {l2}) -> {l3} is forbidden or beyond table"))
        })?;
        Ok(CouplingTerms::new(
            [2 * l1 + 1, 2 * l2 + 1, 2 * l3 + 1],
            block.to_vec(),
        ))
    }

    fn harmonics_unscaled(&self, u: &Vec3, lmax: usize) -> Vec<Vec<f64>> {
        let s3 = 3f64.sqrt();
        let y1 = [s3 * u.y, s3 * u.z, s3 * u.x];
        let mut out = vec![vec![1.0]];
        if lmax >= 1 {
            out.push(y1.to_vec());
        }
        for l in 2..=lmax {
            let mut y = vec![0.0; 2 * l + 1];
            for &(i, j, k, c) in self.block(l - 1, 1, l).expect("recursive coupling present") {
                y[k] += c * out[l - 1][i] * y1[j];
            }
            let scale = self.harmonic_scale[l];
            y.iter_mut().for_each(|v| *v *= scale);
            out.push(y);
        }
        out
    }

    /// Real harmonics `Y^0..=Y^lmax` of the direction of `u`.
    pub fn spherical_harmonics(&self, u: &Vec3, lmax: usize) -> Result<Vec<Vec<f64>>> {
        if lmax > self.lmax {
            return Err(Error::InvalidArgument(format!(
                "harmonics requested to l={lmax}, table holds {}",
                self.lmax
            )));
        }
        let n = u.norm();
        if !(n > 1e-12) {
            return Err(Error::UndefinedDirection);
        }
        Ok(self.harmonics_unscaled(&(u / n), lmax))
    }

    /// Harmonics of unit directions `u` (`(rows, 3)`, columns x, y, z) on a tape,
    /// as `(rows, 2l+1)` arrays.
    pub fn harmonics_on_tape(&self, tape: &Tape, u: Var, lmax: usize) -> Result<Vec<Var>> {
        if lmax > self.lmax {
            return Err(Error::InvalidArgument(format!(
                "harmonics requested to l={lmax}, table holds {}",
                self.lmax
            )));
        }
        let rows = tape.shape(u)[0];
        let mut out = vec![tape.ones(&[rows, 1])];
        if lmax == 0 {
            return Ok(out);
        }
        let s3 = 3f64.sqrt();
        // columns (x, y, z) -> √3 (y, z, x)
        let perm = vec![0.0, 0.0, s3, s3, 0.0, 0.0, 0.0, s3, 0.0];
        let perm = tape.constant(perm, &[3, 3])?;
        let y1 = tape.matmul(u, perm)?;
        out.push(y1);
        for l in 2..=lmax {
            let prev = tape.reshape(out[l - 1], &[rows, 2 * l - 1, 1])?;
            let terms = Rc::new(self.coupling_terms(l - 1, 1, l)?);
            let y = tape.couple(prev, y1, terms)?;
            let y = tape.reshape(y, &[rows, 2 * l + 1])?;
            out.push(tape.scale(y, self.harmonic_scale[l]));
        }
        Ok(out)
    }
}

fn real_block(l1: usize, l2: usize, l3: usize) -> Vec<(usize, usize, usize, f64)> {
    let (j1, j2, j3) = (l1 as i64, l2 as i64, l3 as i64);
    let (u1, u2, u3) = (real_basis(j1), real_basis(j2), real_basis(j3));
    let (d1, d2, d3) = (2 * l1 + 1, 2 * l2 + 1, 2 * l3 + 1);
    let mut dense = vec![Complex64::new(0.0, 0.0); d1 * d2 * d3];
    for a in 0..d1 {
        for b in 0..d2 {
            for c in 0..d3 {
                let mut acc = Complex64::new(0.0, 0.0);
                for m1 in -j1..=j1 {
                    let x1 = u1[a][(m1 + j1) as usize];
                    if x1.norm() == 0.0 {
                        continue;
                    }
                    for m2 in -j2..=j2 {
                        let x2 = u2[b][(m2 + j2) as usize];
                        let m3 = m1 + m2;
                        if x2.norm() == 0.0 || m3.abs() > j3 {
                            continue;
                        }
                        let x3 = u3[c][(m3 + j3) as usize].conj();
                        acc += x1 * x2 * x3 * complex_cg(j1, m1, j2, m2, j3, m3);
                    }
                }
                dense[(a * d2 + b) * d3 + c] = acc;
            }
        }
    }
    // The block is a global phase times a real array; rotate that phase out.
    let pivot = dense
        .iter()
        .copied()
        .max_by(|x, y| x.norm().total_cmp(&y.norm()))
        .unwrap_or(Complex64::new(1.0, 0.0));
    let phase = if pivot.re.abs() >= pivot.im.abs() {
        Complex64::new(1.0, 0.0)
    } else {
        Complex64::new(0.0, -1.0)
    };
    let mut entries = Vec::new();
    for a in 0..d1 {
        for b in 0..d2 {
            for c in 0..d3 {
                let v = (dense[(a * d2 + b) * d3 + c] * phase).re;
                if v.abs() > 1e-14 {
                    entries.push((a, b, c, v));
                }
            }
        }
    }
    entries
}

/// Ordered `(multiplicity, l)` blocks with non-decreasing `l`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IrrepsLayout {
    blocks: Vec<(usize, usize)>,
}

impl IrrepsLayout {
    pub fn new(blocks: Vec<(usize, usize)>) -> Result<Self> {
        if blocks.iter().any(|&(m, _)| m == 0) {
            return Err(Error::Layout("multiplicities must be positive".into()));
        }
        if blocks.windows(2).any(|w| w[0].1 > w[1].1) {
            return Err(Error::Layout("rotation orders must be non-decreasing".into()));
        }
        Ok(Self { blocks })
    }

    /// One block per order with the given multiplicities (zeros skipped).
    pub fn from_multiplicities(mults: &[usize]) -> Self {
        Self {
            blocks: mults
                .iter()
                .enumerate()
                .filter(|(_, &m)| m > 0)
                .map(|(l, &m)| (m, l))
                .collect(),
        }
    }

    pub fn blocks(&self) -> &[(usize, usize)] {
        &self.blocks
    }

    pub fn dim(&self) -> usize {
        self.blocks.iter().map(|&(m, l)| m * (2 * l + 1)).sum()
    }

    pub fn lmax(&self) -> usize {
        self.blocks.last().map_or(0, |b| b.1)
    }

    /// Total multiplicity of order `l`.
    pub fn multiplicity(&self, l: usize) -> usize {
        self.blocks.iter().filter(|b| b.1 == l).map(|b| b.0).sum()
    }

    /// Number of non-scalar channels, each of which needs one gate scalar.
    pub fn num_gated(&self) -> usize {
        self.blocks.iter().filter(|b| b.1 > 0).map(|b| b.0).sum()
    }
}

/// A single node's features, stored block by block, channel-major within a
/// block: index `offset(block) + channel·(2l+1) + m`.
#[derive(Clone, Debug, PartialEq)]
pub struct IrrepsFeature {
    pub layout: IrrepsLayout,
    pub data: Vec<f64>,
}

impl IrrepsFeature {
    pub fn new(layout: IrrepsLayout, data: Vec<f64>) -> Result<Self> {
        if data.len() != layout.dim() {
            return Err(Error::Layout(format!(
                "data length {} does not match layout dimension {}",
                data.len(),
                layout.dim()
            )));
        }
        Ok(Self { layout, data })
    }

    pub fn zeros(layout: IrrepsLayout) -> Self {
        let data = vec![0.0; layout.dim()];
        Self { layout, data }
    }

    /// Per-block `(2l+1, mult)` arrays in row-major order, the tape layout.
    pub fn to_blocks(&self) -> Vec<Vec<f64>> {
        let mut off = 0;
        let mut out = Vec::new();
        for &(mult, l) in self.layout.blocks() {
            let d = 2 * l + 1;
            let mut b = vec![0.0; d * mult];
            for c in 0..mult {
                for m in 0..d {
                    b[m * mult + c] = self.data[off + c * d + m];
                }
            }
            off += d * mult;
            out.push(b);
        }
        out
    }

    pub fn from_blocks(layout: IrrepsLayout, blocks: &[Vec<f64>]) -> Result<Self> {
        if blocks.len() != layout.blocks().len() {
            return Err(Error::Layout("block count does not match layout".into()));
        }
        let mut data = Vec::with_capacity(layout.dim());
        for (b, &(mult, l)) in blocks.iter().zip(layout.blocks()) {
            let d = 2 * l + 1;
            if b.len() != d * mult {
                return Err(Error::Layout("block size does not match layout".into()));
            }
            for c in 0..mult {
                for m in 0..d {
                    data.push(b[m * mult + c]);
                }
            }
        }
        Self::new(layout, data)
    }

    /// Applies per-order matrices `d[l]` to every channel.
    pub fn rotate(&self, wigner: &[DMatrix<f64>]) -> Self {
        let mut out = self.clone();
        let mut off = 0;
        for &(mult, l) in self.layout.blocks() {
            let d = 2 * l + 1;
            for c in 0..mult {
                let s = off + c * d;
                let v = nalgebra::DVector::from_column_slice(&self.data[s..s + d]);
                let r = &wigner[l] * v;
                out.data[s..s + d].copy_from_slice(r.as_slice());
            }
            off += d * mult;
        }
        out
    }
}

/// One coupling `(input block, filter order) -> output order`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Path {
    pub input_block: usize,
    pub l_in: usize,
    pub l_filter: usize,
    pub l_out: usize,
    pub mult: usize,
}

/// Channel-wise tensor product of a feature with filter harmonics. Each
/// allowed path keeps the input multiplicity; outputs of the same order are
/// concatenated along channels in path order.
#[derive(Clone, Debug)]
pub struct TensorProduct {
    pub input: IrrepsLayout,
    pub filter_lmax: usize,
    pub output_lmax: usize,
    pub paths: Vec<Path>,
}

impl TensorProduct {
    /// Paths satisfying the triangle rule and parity `l_in + l_filter + l_out`
    /// even (keeping features of natural parity `(-1)^l`).
    pub fn new(input: IrrepsLayout, filter_lmax: usize, output_lmax: usize) -> Self {
        let mut paths = Vec::new();
        for l_out in 0..=output_lmax {
            for (bi, &(mult, l_in)) in input.blocks().iter().enumerate() {
                for l_filter in 0..=filter_lmax {
                    if l_out >= l_in.abs_diff(l_filter)
                        && l_out <= l_in + l_filter
                        && (l_in + l_filter + l_out) % 2 == 0
                    {
                        paths.push(Path {
                            input_block: bi,
                            l_in,
                            l_filter,
                            l_out,
                            mult,
                        });
                    }
                }
            }
        }
        Self {
            input,
            filter_lmax,
            output_lmax,
            paths,
        }
    }

    pub fn num_paths(&self) -> usize {
        self.paths.len()
    }

    pub fn output_layout(&self) -> IrrepsLayout {
        let mut mults = vec![0; self.output_lmax + 1];
        for p in &self.paths {
            mults[p.l_out] += p.mult;
        }
        IrrepsLayout::from_multiplicities(&mults)
    }

    /// Number of paths landing on each output order.
    pub fn fan_in(&self, l_out: usize) -> usize {
        self.paths.iter().filter(|p| p.l_out == l_out).count()
    }

    /// Tape evaluation over `rows` edges. `blocks[b]` is `(rows, 2l+1, mult)`,
    /// `filter[l]` is `(rows, 2l+1)`, `weights` is `(P,)` or `(rows, P)`.
    /// Returns one `(rows, 2l+1, mult_out)` array per output order (or `None`
    /// when no path reaches that order).
    pub fn apply(
        &self,
        tape: &Tape,
        table: &CgTable,
        blocks: &[Var],
        filter: &[Var],
        weights: Var,
    ) -> Result<Vec<Option<Var>>> {
        if blocks.len() != self.input.blocks().len() || filter.len() <= self.filter_lmax {
            return Err(Error::Layout("tensor product inputs do not match layout".into()));
        }
        let rows = tape.shape(blocks[0])[0];
        let wshape = tape.shape(weights);
        let per_edge = match wshape.as_slice() {
            [p] if *p == self.paths.len() => false,
            [r, p] if *r == rows && *p == self.paths.len() => true,
            _ => {
                return Err(Error::Layout(format!(
                    "path weights of shape {wshape:?} for {} paths",
                    self.paths.len()
                )))
            }
        };
        let mut per_order: Vec<Vec<Var>> = vec![Vec::new(); self.output_lmax + 1];
        for (pi, p) in self.paths.iter().enumerate() {
            let terms = Rc::new(table.coupling_terms(p.l_in, p.l_filter, p.l_out)?);
            let out = tape.couple(blocks[p.input_block], filter[p.l_filter], terms)?;
            let w = if per_edge {
                let w = tape.slice(weights, 1, pi, 1)?;
                tape.reshape(w, &[rows, 1, 1])?
            } else {
                tape.slice(weights, 0, pi, 1)?
            };
            per_order[p.l_out].push(tape.mul(out, w)?);
        }
        per_order
            .into_iter()
            .map(|parts| match parts.len() {
                0 => Ok(None),
                1 => Ok(Some(parts[0])),
                _ => Ok(Some(tape.concat(&parts, 2)?)),
            })
            .collect()
    }
}

/// Tensor product of a single feature with harmonics `y` (one array per
/// order) and uniform path weights. Output orders run up to the larger of the
/// feature's and the harmonics' maximum order.
pub fn tensor_product(
    f: &IrrepsFeature,
    y: &[Vec<f64>],
    weights: &[f64],
) -> Result<IrrepsFeature> {
    let table = CgTable::shared();
    let filter_lmax = y.len().checked_sub(1).ok_or_else(|| Error::Layout("no harmonics".into()))?;
    let tp = TensorProduct::new(f.layout.clone(), filter_lmax, f.layout.lmax().max(filter_lmax));
    if weights.len() != tp.num_paths() {
        return Err(Error::Layout(format!(
            "{} path weights for {} paths",
            weights.len(),
            tp.num_paths()
        )));
    }
    let tape = Tape::new();
    let blocks = f
        .to_blocks()
        .into_iter()
        .zip(f.layout.blocks())
        .map(|(b, &(mult, l))| tape.constant(b, &[1, 2 * l + 1, mult]))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let filter = y
        .iter()
        .enumerate()
        .map(|(l, v)| {
            if v.len() != 2 * l + 1 {
                return Err(Error::Layout(format!("harmonic of order {l} has {} entries", v.len())));
            }
            Ok(tape.constant(v.clone(), &[1, 2 * l + 1])?)
        })
        .collect::<Result<Vec<_>>>()?;
    let w = tape.constant(weights.to_vec(), &[weights.len()])?;
    let out = tp.apply(&tape, table, &blocks, &filter, w)?;
    let layout = tp.output_layout();
    let values: Vec<Vec<f64>> = out.into_iter().flatten().map(|v| tape.to_vec(v)).collect();
    IrrepsFeature::from_blocks(layout, &values)
}

/// Gate on tape blocks (one per order, in order). The scalar block carries
/// `num_gated` gate channels first, then the output scalars.
pub fn gate_on_tape(tape: &Tape, blocks: &[Var], mults: &[usize]) -> Result<Vec<Var>> {
    let scalar = blocks
        .first()
        .copied()
        .ok_or_else(|| Error::Layout("gate needs a scalar block".into()))?;
    let shape = tape.shape(scalar);
    let gated: usize = mults.iter().skip(1).sum();
    if shape[2] < gated {
        return Err(Error::Layout(format!(
            "{} scalar channels cannot gate {gated} non-scalar channels",
            shape[2]
        )));
    }
    let rows = shape[0];
    let mut out = Vec::with_capacity(blocks.len());
    let kept = tape.slice(scalar, 2, gated, shape[2] - gated)?;
    out.push(tape.silu(kept));
    let mut offset = 0;
    for (l, &b) in blocks.iter().enumerate().skip(1) {
        let m = mults[l];
        let g = tape.slice(scalar, 2, offset, m)?;
        let g = tape.silu(tape.reshape(g, &[rows, 1, m])?);
        out.push(tape.mul(b, g)?);
        offset += m;
    }
    Ok(out)
}

/// Gate on a single feature whose layout has one block per order.
pub fn gate(f: &IrrepsFeature) -> Result<IrrepsFeature> {
    let blocks = f.layout.blocks();
    if blocks.first().map(|b| b.1) != Some(0)
        || blocks.iter().enumerate().any(|(i, b)| b.1 != i)
    {
        return Err(Error::Layout("gate expects one block per order starting at l=0".into()));
    }
    let gated = f.layout.num_gated();
    if f.layout.multiplicity(0) < gated {
        return Err(Error::Layout(format!(
            "{} scalar channels cannot gate {gated} non-scalar channels",
            f.layout.multiplicity(0)
        )));
    }
    let mults: Vec<usize> = blocks.iter().map(|b| b.0).collect();
    let tape = Tape::new();
    let vars = f
        .to_blocks()
        .into_iter()
        .zip(blocks)
        .map(|(b, &(mult, l))| tape.constant(b, &[1, 2 * l + 1, mult]))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let out = gate_on_tape(&tape, &vars, &mults)?;
    let mut out_mults = mults.clone();
    out_mults[0] -= gated;
    let mut layout_blocks = Vec::new();
    let mut values = Vec::new();
    for (l, (&m, v)) in out_mults.iter().zip(&out).enumerate() {
        if m > 0 {
            layout_blocks.push((m, l));
            values.push(tape.to_vec(*v));
        }
    }
    IrrepsFeature::from_blocks(IrrepsLayout::new(layout_blocks)?, &values)
}

/// Least-squares fit of `D^l(R)` from `Y^l(R u_k) = D Y^l(u_k)` over random
/// directions. Fails when the fit residual exceeds `1e-8`.
pub fn wigner_from_samples(l: usize, rotation: &Mat3) -> Result<DMatrix<f64>> {
    let table = CgTable::shared();
    let d = 2 * l + 1;
    let samples = 4 * d;
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed + l as u64);
    let mut a = DMatrix::zeros(samples, d);
    let mut b = DMatrix::zeros(samples, d);
    for k in 0..samples {
        let u = Vec3::from_fn(|_, _| StandardNormal.sample(&mut rng)).normalize();
        let ya = &table.spherical_harmonics(&u, l)?[l];
        let yb = &table.spherical_harmonics(&(rotation * u), l)?[l];
        for m in 0..d {
            a[(k, m)] = ya[m];
            b[(k, m)] = yb[m];
        }
    }
    // b = a · Dᵀ
    let dt = a
        .clone()
        .svd(true, true)
        .solve(&b, 1e-12)
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let residual = (&a * &dt - &b).amax();
    if residual > 1e-8 {
        return Err(Error::HarmonicsNotEquivariant(residual));
    }
    Ok(dt.transpose())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_coupling_is_one() {
        let t = CgTable::shared();
        assert!((t.coefficient(0, 0, 0, 0, 0, 0) - 1.0).abs() < 1e-15);
        assert!(t.block(1, 1, 3).is_none());
        assert!(t.block(0, 2, 1).is_none());
    }

    #[test]
    fn low_order_harmonics() {
        let t = CgTable::shared();
        let y = t.spherical_harmonics(&Vec3::new(0.3, -0.5, 0.2), 3).unwrap();
        assert_eq!(y[0], vec![1.0]);
        let z = t.spherical_harmonics(&Vec3::z(), 1).unwrap();
        assert_eq!(z[1], vec![0.0, 3f64.sqrt(), 0.0]);
        assert!(matches!(
            t.spherical_harmonics(&Vec3::zeros(), 2),
            Err(Error::UndefinedDirection)
        ));
    }

    #[test]
    fn feature_block_round_trip() {
        let layout = IrrepsLayout::from_multiplicities(&[2, 3, 1]);
        let data: Vec<f64> = (0..layout.dim()).map(|i| i as f64).collect();
        let f = IrrepsFeature::new(layout.clone(), data).unwrap();
        let back = IrrepsFeature::from_blocks(layout, &f.to_blocks()).unwrap();
        assert_eq!(back, f);
    }

    #[test]
    fn path_count_at_default_order() {
        let tp = TensorProduct::new(IrrepsLayout::from_multiplicities(&[1, 1, 1, 1]), 3, 3);
        assert_eq!(tp.num_paths(), 23);
    }
}
