//! Periodic crystal structures, strain and rigid transforms, and radius graphs
//! with periodic images.
//!
//! Lattice matrices store the three lattice vectors as rows. Positions are
//! Cartesian (Å). A row-vector deformation `F` acts as `p -> p·F`, which for
//! column vectors is `p -> Fᵀ p`.

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

pub const MAX_ATOMIC_NUMBER: u32 = 118;
pub const MIN_CELL_VOLUME: f64 = 1e-8;
pub const DEFAULT_IMAGE_BOUND: usize = 64;
/// Distances below this are treated as overlapping atoms.
pub const OVERLAP_DISTANCE: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct CrystalStructure {
    pub atomic_numbers: Vec<u32>,
    pub positions: Vec<Vec3>,
    /// Rows are the lattice vectors.
    pub lattice: Mat3,
}

impl CrystalStructure {
    pub fn new(atomic_numbers: Vec<u32>, positions: Vec<Vec3>, lattice: Mat3) -> Result<Self> {
        let s = Self {
            atomic_numbers,
            positions,
            lattice,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.atomic_numbers.is_empty() {
            return Err(Error::InvalidStructure("structure has no atoms".into()));
        }
        if self.atomic_numbers.len() != self.positions.len() {
            return Err(Error::InvalidStructure(format!(
                "{} atomic numbers but {} positions",
                self.atomic_numbers.len(),
                self.positions.len()
            )));
        }
        if let Some(z) = self
            .atomic_numbers
            .iter()
            .find(|&&z| z == 0 || z > MAX_ATOMIC_NUMBER)
        {
            return Err(Error::UnknownElement(*z));
        }
        if self.positions.iter().any(|p| !p.iter().all(|v| v.is_finite()))
            || !self.lattice.iter().all(|v| v.is_finite())
        {
            return Err(Error::InvalidStructure("non-finite coordinates".into()));
        }
        if self.volume() <= MIN_CELL_VOLUME {
            return Err(Error::SingularLattice);
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.atomic_numbers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atomic_numbers.is_empty()
    }

    pub fn volume(&self) -> f64 {
        self.lattice.determinant().abs()
    }

    pub fn lattice_vector(&self, axis: usize) -> Vec3 {
        self.lattice.row(axis).transpose()
    }

    /// Cartesian position of fractional coordinates `f`.
    pub fn to_cartesian(&self, f: &Vec3) -> Vec3 {
        self.lattice.transpose() * f
    }

    pub fn to_fractional(&self, p: &Vec3) -> Result<Vec3> {
        let inv = self.lattice.transpose().try_inverse().ok_or(Error::SingularLattice)?;
        Ok(inv * p)
    }

    /// Distance between opposite faces of the cell, per lattice axis.
    pub fn face_spacings(&self) -> [f64; 3] {
        let v = self.volume();
        let l = [0, 1, 2].map(|a| self.lattice_vector(a));
        [0, 1, 2].map(|a| v / l[(a + 1) % 3].cross(&l[(a + 2) % 3]).norm())
    }

    /// Deforms cell and positions by `I + ε_sym`.
    pub fn apply_strain(&self, strain: &StrainTensor) -> Result<Self> {
        let f = Mat3::identity() + strain.symmetric();
        let out = Self {
            atomic_numbers: self.atomic_numbers.clone(),
            positions: self.positions.iter().map(|p| f.transpose() * p).collect(),
            lattice: self.lattice * f,
        };
        if out.volume() <= MIN_CELL_VOLUME {
            return Err(Error::CollapsedCell);
        }
        Ok(out)
    }

    /// Applies `p -> R p + b` to positions and `ℓ -> R ℓ` to lattice vectors.
    pub fn transform(&self, rotation: &Mat3, shift: &Vec3) -> Result<Self> {
        if !is_orthogonal(rotation) {
            return Err(Error::NotOrthogonal);
        }
        Ok(Self {
            atomic_numbers: self.atomic_numbers.clone(),
            positions: self.positions.iter().map(|p| rotation * p + shift).collect(),
            lattice: self.lattice * rotation.transpose(),
        })
    }

    /// Diagonal supercell. Atom `a` of cell `(i, j, k)` lands at index
    /// `((i·d2 + j)·d3 + k)·n + a`.
    pub fn make_supercell(&self, diag: [usize; 3]) -> Result<Self> {
        if diag.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "supercell multiples must be positive, got {diag:?}"
            )));
        }
        let l = [0, 1, 2].map(|a| self.lattice_vector(a));
        let mut numbers = Vec::with_capacity(self.len() * diag.iter().product::<usize>());
        let mut positions = Vec::with_capacity(numbers.capacity());
        for i in 0..diag[0] {
            for j in 0..diag[1] {
                for k in 0..diag[2] {
                    let offset = l[0] * i as f64 + l[1] * j as f64 + l[2] * k as f64;
                    for (z, p) in self.atomic_numbers.iter().zip(&self.positions) {
                        numbers.push(*z);
                        positions.push(p + offset);
                    }
                }
            }
        }
        let mut lattice = self.lattice;
        for (a, d) in diag.iter().enumerate() {
            let scaled = lattice.row(a) * *d as f64;
            lattice.set_row(a, &scaled);
        }
        Self::new(numbers, positions, lattice)
    }

    /// Copy with every atom wrapped into the cell's fractional range [0, 1).
    pub fn wrapped(&self) -> Result<Self> {
        let mut out = self.clone();
        for p in out.positions.iter_mut() {
            let f = self.to_fractional(p)?.map(|v| v - v.floor());
            *p = self.to_cartesian(&f);
        }
        Ok(out)
    }
}

pub fn is_orthogonal(r: &Mat3) -> bool {
    (r.transpose() * r - Mat3::identity()).norm() < 1e-10
}

/// Uniformly distributed orthogonal matrix; `proper` selects det = +1,
/// otherwise det = -1.
pub fn random_orthogonal<R: Rng + ?Sized>(rng: &mut R, proper: bool) -> Mat3 {
    let q = loop {
        let v: [f64; 4] = std::array::from_fn(|_| StandardNormal.sample(rng));
        let q = nalgebra::Quaternion::new(v[0], v[1], v[2], v[3]);
        if q.norm() > 1e-6 {
            break nalgebra::UnitQuaternion::from_quaternion(q);
        }
    };
    let r = *q.to_rotation_matrix().matrix();
    if proper {
        r
    } else {
        -r
    }
}

/// Random triclinic cell holding `n` atoms drawn from `elements`, with cell
/// volume about `volume_per_atom·n` and no two atoms (or periodic images)
/// closer than `min_distance`.
pub fn random_structure<R: Rng + ?Sized>(
    rng: &mut R,
    n: usize,
    elements: &[u32],
    volume_per_atom: f64,
    min_distance: f64,
) -> CrystalStructure {
    let a = (volume_per_atom * n as f64).cbrt();
    loop {
        let mut lattice = Mat3::identity() * a;
        for i in 0..3 {
            for j in 0..3 {
                lattice[(i, j)] += rng.random_range(-0.15..0.15) * a;
            }
        }
        let mut s = CrystalStructure {
            atomic_numbers: Vec::with_capacity(n),
            positions: Vec::with_capacity(n),
            lattice,
        };
        if s.volume() < 0.5 * a.powi(3) {
            continue;
        }
        let l = [0, 1, 2].map(|k| s.lattice_vector(k));
        let mut attempts = 0;
        while s.positions.len() < n && attempts < 1000 {
            attempts += 1;
            let f: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..1.0));
            let p = l[0] * f[0] + l[1] * f[1] + l[2] * f[2];
            s.atomic_numbers.push(elements[rng.random_range(0..elements.len())]);
            s.positions.push(p);
            let ok = match build_graph(&s, min_distance) {
                Ok(g) => g.is_empty(),
                Err(_) => false,
            };
            if !ok {
                s.atomic_numbers.pop();
                s.positions.pop();
            }
        }
        if s.positions.len() == n {
            return s;
        }
    }
}

/// A 3×3 strain; only its symmetric part deforms a structure.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StrainTensor(pub Mat3);

impl StrainTensor {
    pub fn zero() -> Self {
        Self(Mat3::zeros())
    }

    pub fn isotropic(alpha: f64) -> Self {
        Self(Mat3::identity() * alpha)
    }

    /// Voigt order xx, yy, zz, yz, xz, xy with engineering shear components,
    /// so the tensor off-diagonal is half the Voigt value.
    pub fn from_voigt(e: [f64; 6]) -> Self {
        Self(Mat3::new(
            e[0],
            e[5] / 2.0,
            e[4] / 2.0,
            e[5] / 2.0,
            e[1],
            e[3] / 2.0,
            e[4] / 2.0,
            e[3] / 2.0,
            e[2],
        ))
    }

    pub fn symmetric(&self) -> Mat3 {
        (self.0 + self.0.transpose()) * 0.5
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Edge {
    pub source: usize,
    pub target: usize,
    pub image: [i32; 3],
    /// `p_source + image·L − p_target`.
    pub displacement: Vec3,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CrystalGraph {
    pub edges: Vec<Edge>,
    pub cutoff: f64,
    pub num_nodes: usize,
}

impl CrystalGraph {
    pub fn sources(&self) -> Vec<usize> {
        self.edges.iter().map(|e| e.source).collect()
    }

    pub fn targets(&self) -> Vec<usize> {
        self.edges.iter().map(|e| e.target).collect()
    }

    pub fn images(&self) -> Vec<[i32; 3]> {
        self.edges.iter().map(|e| e.image).collect()
    }

    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }
}

pub fn build_graph(structure: &CrystalStructure, cutoff: f64) -> Result<CrystalGraph> {
    build_graph_bounded(structure, cutoff, DEFAULT_IMAGE_BOUND)
}

/// All directed edges `source -> target` whose image displacement lies within
/// `cutoff`, sorted by target, source and image. `max_image` bounds the image
/// search range along each lattice axis.
pub fn build_graph_bounded(
    structure: &CrystalStructure,
    cutoff: f64,
    max_image: usize,
) -> Result<CrystalGraph> {
    if !(cutoff > 0.0 && cutoff.is_finite()) {
        return Err(Error::InvalidArgument(format!("cutoff must be positive, got {cutoff}")));
    }
    structure.validate()?;
    let spacing = structure.face_spacings();
    let reach = spacing.map(|h| (cutoff / h).ceil() as usize);
    if let Some(&needed) = reach.iter().find(|&&r| r > max_image) {
        return Err(Error::ImageRangeOverflow {
            needed,
            bound: max_image,
        });
    }
    let l = [0, 1, 2].map(|a| structure.lattice_vector(a));
    let n = structure.len();
    let frac: Vec<Vec3> = structure
        .positions
        .iter()
        .map(|p| structure.to_fractional(p))
        .collect::<Result<_>>()?;
    let cutoff2 = cutoff * cutoff;
    let mut edges = Vec::new();
    for target in 0..n {
        for source in 0..n {
            let base = structure.positions[source] - structure.positions[target];
            let df = frac[source] - frac[target];
            let range: [(i64, i64); 3] = std::array::from_fn(|a| {
                let center = -(df[a].round() as i64);
                let r = reach[a] as i64 + 1;
                (center - r, center + r)
            });
            for k0 in range[0].0..=range[0].1 {
                for k1 in range[1].0..=range[1].1 {
                    for k2 in range[2].0..=range[2].1 {
                        if source == target && k0 == 0 && k1 == 0 && k2 == 0 {
                            continue;
                        }
                        let shift = l[0] * k0 as f64 + l[1] * k1 as f64 + l[2] * k2 as f64;
                        let r = base + shift;
                        let d2 = r.norm_squared();
                        if d2 > cutoff2 {
                            continue;
                        }
                        if d2.sqrt() < OVERLAP_DISTANCE {
                            return Err(Error::AtomicOverlap(source, target));
                        }
                        let image = [k0, k1, k2].map(|k| k as i32);
                        edges.push(Edge {
                            source,
                            target,
                            image,
                            displacement: r,
                        });
                    }
                }
            }
        }
    }
    Ok(CrystalGraph {
        edges,
        cutoff,
        num_nodes: n,
    })
}

/// Simple cubic, FCC, BCC and rocksalt conventional cells.
pub mod prototypes {
    use super::*;

    pub fn cubic(z: u32, a: f64) -> CrystalStructure {
        CrystalStructure::new(vec![z], vec![Vec3::zeros()], Mat3::identity() * a)
            .expect("valid prototype")
    }

    fn conventional(numbers: Vec<u32>, frac: &[[f64; 3]], a: f64) -> CrystalStructure {
        let positions = frac.iter().map(|f| Vec3::new(f[0], f[1], f[2]) * a).collect();
        CrystalStructure::new(numbers, positions, Mat3::identity() * a).expect("valid prototype")
    }

    pub fn fcc(z: u32, a: f64) -> CrystalStructure {
        conventional(
            vec![z; 4],
            &[[0.0, 0.0, 0.0], [0.0, 0.5, 0.5], [0.5, 0.0, 0.5], [0.5, 0.5, 0.0]],
            a,
        )
    }

    pub fn fcc_primitive(z: u32, a: f64) -> CrystalStructure {
        let h = a / 2.0;
        let lattice = Mat3::new(0.0, h, h, h, 0.0, h, h, h, 0.0);
        CrystalStructure::new(vec![z], vec![Vec3::zeros()], lattice).expect("valid prototype")
    }

    pub fn bcc(z: u32, a: f64) -> CrystalStructure {
        conventional(vec![z; 2], &[[0.0, 0.0, 0.0], [0.5, 0.5, 0.5]], a)
    }

    pub fn rocksalt(cation: u32, anion: u32, a: f64) -> CrystalStructure {
        conventional(
            vec![cation, cation, cation, cation, anion, anion, anion, anion],
            &[
                [0.0, 0.0, 0.0],
                [0.0, 0.5, 0.5],
                [0.5, 0.0, 0.5],
                [0.5, 0.5, 0.0],
                [0.5, 0.0, 0.0],
                [0.0, 0.5, 0.0],
                [0.0, 0.0, 0.5],
                [0.5, 0.5, 0.5],
            ],
            a,
        )
    }
}
