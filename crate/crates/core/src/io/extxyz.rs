//! Extended-XYZ frames with lattice, energy, stress and per-atom forces.
//!
//! Frame layout: atom count; a comment line of `key=value` pairs holding
//! `Lattice="..." Properties=species:S:1:pos:R:3[:forces:R:3]` plus optional
//! `energy=` (eV), `stress="..."` (eV/Å³, row-major 3×3) and free-form keys;
//! then one line per atom. Reals are written with 17 significant digits.

use std::fmt::Write as _;

use crate::crystal::{CrystalStructure, Mat3, Vec3};
use crate::elements;
use crate::error::{Error, Result};
use crate::training::LabeledSample;

#[derive(Clone, Debug, PartialEq)]
pub struct XyzFrame {
    pub structure: CrystalStructure,
    pub energy: Option<f64>,
    pub forces: Option<Vec<Vec3>>,
    pub stress: Option<Mat3>,
    /// Additional comment-line entries, in order.
    pub info: Vec<(String, String)>,
}

impl XyzFrame {
    pub fn new(structure: CrystalStructure) -> Self {
        Self {
            structure,
            energy: None,
            forces: None,
            stress: None,
            info: Vec::new(),
        }
    }

    pub fn with_info(mut self, key: &str, value: impl ToString) -> Self {
        self.info.push((key.to_string(), value.to_string()));
        self
    }

    /// Labeled sample when energy, forces and stress are all present.
    pub fn to_sample(&self) -> Result<LabeledSample> {
        match (self.energy, &self.forces, self.stress) {
            (Some(energy), Some(forces), Some(stress)) => Ok(LabeledSample {
                structure: self.structure.clone(),
                energy,
                forces: forces.clone(),
                stress,
            }),
            _ => Err(Error::Format("frame lacks energy, forces or stress labels".into())),
        }
    }
}

impl From<&LabeledSample> for XyzFrame {
    fn from(s: &LabeledSample) -> Self {
        Self {
            structure: s.structure.clone(),
            energy: Some(s.energy),
            forces: Some(s.forces.clone()),
            stress: Some(s.stress),
            info: Vec::new(),
        }
    }
}

fn real(x: f64) -> String {
    format!("{x:.16e}")
}

fn join(values: impl IntoIterator<Item = f64>) -> String {
    values.into_iter().map(real).collect::<Vec<_>>().join(" ")
}

fn quote(value: &str) -> String {
    if value.is_empty() || value.contains(char::is_whitespace) || value.contains('=') {
        format!("\"{}\"", value.replace('"', "'"))
    } else {
        value.to_string()
    }
}

/// Serializes frames to extended-XYZ text.
pub fn write_extxyz(frames: &[XyzFrame]) -> Result<String> {
    let mut out = String::new();
    for frame in frames {
        let s = &frame.structure;
        let n = s.len();
        if let Some(f) = &frame.forces {
            if f.len() != n {
                return Err(Error::Mismatch(format!("{n} atoms but {} forces", f.len())));
            }
        }
        let lattice = join((0..3).flat_map(|i| (0..3).map(move |j| s.lattice[(i, j)])));
        let mut props = "species:S:1:pos:R:3".to_string();
        if frame.forces.is_some() {
            props.push_str(":forces:R:3");
        }
        let _ = writeln!(out, "{n}");
        let _ = write!(out, "Lattice=\"{lattice}\" Properties={props}");
        if let Some(e) = frame.energy {
            let _ = write!(out, " energy={}", real(e));
        }
        if let Some(st) = frame.stress {
            let v = join((0..3).flat_map(|i| (0..3).map(move |j| st[(i, j)])));
            let _ = write!(out, " stress=\"{v}\"");
        }
        out.push_str(" pbc=\"T T T\"");
        for (k, v) in &frame.info {
            let _ = write!(out, " {}={}", k, quote(v));
        }
        out.push('\n');
        for i in 0..n {
            let p = s.positions[i];
            let _ = write!(out, "{} {}", elements::symbol(s.atomic_numbers[i])?, join([p.x, p.y, p.z]));
            if let Some(f) = &frame.forces {
                let _ = write!(out, " {}", join([f[i].x, f[i].y, f[i].z]));
            }
            out.push('\n');
        }
    }
    Ok(out)
}

/// Splits a comment line into `key=value` pairs; values may be double-quoted.
fn comment_pairs(line: &str) -> Result<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    let mut chars = line.trim().chars().peekable();
    loop {
        while chars.peek().is_some_and(|c| c.is_whitespace()) {
            chars.next();
        }
        if chars.peek().is_none() {
            return Ok(pairs);
        }
        let key: String = std::iter::from_fn(|| chars.next_if(|&c| c != '=' && !c.is_whitespace())).collect();
        if chars.next_if_eq(&'=').is_none() {
            // bare flag
            pairs.push((key, "T".into()));
            continue;
        }
        let value = if chars.next_if_eq(&'"').is_some() {
            let v: String = std::iter::from_fn(|| chars.next_if(|&c| c != '"')).collect();
            if chars.next_if_eq(&'"').is_none() {
                return Err(Error::Format(format!("unterminated quote in value of {key}")));
            }
            v
        } else {
            std::iter::from_fn(|| chars.next_if(|c| !c.is_whitespace())).collect()
        };
        pairs.push((key, value));
    }
}

fn reals(text: &str, count: usize, what: &str) -> Result<Vec<f64>> {
    let v: Vec<f64> = text
        .split_whitespace()
        .map(|t| t.parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Format(format!("{what}: {e}")))?;
    if v.len() != count {
        return Err(Error::Format(format!("{what}: expected {count} values, found {}", v.len())));
    }
    Ok(v)
}

fn matrix(text: &str, what: &str) -> Result<Mat3> {
    Ok(Mat3::from_row_slice(&reals(text, 9, what)?))
}

struct Columns {
    species: usize,
    pos: usize,
    forces: Option<usize>,
    width: usize,
}

fn columns(properties: &str) -> Result<Columns> {
    let parts: Vec<&str> = properties.split(':').collect();
    if parts.len() % 3 != 0 {
        return Err(Error::Format(format!("malformed Properties {properties}")));
    }
    let (mut species, mut pos, mut forces) = (None, None, None);
    let mut offset = 0;
    for chunk in parts.chunks(3) {
        let width: usize = chunk[2]
            .parse()
            .map_err(|_| Error::Format(format!("bad column count in Properties {properties}")))?;
        match chunk[0] {
            "species" => species = Some(offset),
            "pos" if width == 3 => pos = Some(offset),
            "forces" if width == 3 => forces = Some(offset),
            _ => {}
        }
        offset += width;
    }
    Ok(Columns {
        species: species.ok_or_else(|| Error::Format("Properties lacks species".into()))?,
        pos: pos.ok_or_else(|| Error::Format("Properties lacks pos".into()))?,
        forces,
        width: offset,
    })
}

fn species(token: &str) -> Result<u32> {
    match token.parse::<u32>() {
        Ok(z) => {
            elements::symbol(z)?;
            Ok(z)
        }
        Err(_) => elements::atomic_number(token),
    }
}

/// Parses every frame in the text. Blank trailing lines are ignored.
pub fn read_extxyz(text: &str) -> Result<Vec<XyzFrame>> {
    let mut lines = text.lines().enumerate().peekable();
    let mut frames = Vec::new();
    while let Some((no, line)) = lines.next() {
        if line.trim().is_empty() {
            continue;
        }
        let n: usize = line
            .trim()
            .parse()
            .map_err(|_| Error::Format(format!("line {}: expected atom count, found {line:?}", no + 1)))?;
        let (_, comment) = lines
            .next()
            .ok_or_else(|| Error::Format(format!("line {}: missing comment line", no + 2)))?;
        let mut lattice = None;
        let mut cols = None;
        let mut frame_energy = None;
        let mut stress = None;
        let mut info = Vec::new();
        for (k, v) in comment_pairs(comment)? {
            match k.as_str() {
                "Lattice" => lattice = Some(matrix(&v, "Lattice")?),
                "Properties" => cols = Some(columns(&v)?),
                "energy" => frame_energy = Some(reals(&v, 1, "energy")?[0]),
                "stress" => stress = Some(matrix(&v, "stress")?),
                "pbc" => {}
                _ => info.push((k, v)),
            }
        }
        let lattice = lattice.ok_or_else(|| Error::Format(format!("frame at line {}: missing Lattice", no + 1)))?;
        let cols = cols.unwrap_or(Columns {
            species: 0,
            pos: 1,
            forces: None,
            width: 4,
        });
        let mut numbers = Vec::with_capacity(n);
        let mut positions = Vec::with_capacity(n);
        let mut forces = cols.forces.map(|_| Vec::with_capacity(n));
        for _ in 0..n {
            let (ano, atom) = lines
                .next()
                .ok_or_else(|| Error::Format(format!("frame at line {}: expected {n} atoms", no + 1)))?;
            let t: Vec<&str> = atom.split_whitespace().collect();
            if t.len() < cols.width {
                return Err(Error::Format(format!("line {}: expected {} columns", ano + 1, cols.width)));
            }
            numbers.push(species(t[cols.species])?);
            let vec_at = |o: usize| -> Result<Vec3> {
                let v = reals(&t[o..o + 3].join(" "), 3, &format!("line {}", ano + 1))?;
                Ok(Vec3::new(v[0], v[1], v[2]))
            };
            positions.push(vec_at(cols.pos)?);
            if let (Some(f), Some(o)) = (forces.as_mut(), cols.forces) {
                f.push(vec_at(o)?);
            }
        }
        frames.push(XyzFrame {
            structure: CrystalStructure::new(numbers, positions, lattice)?,
            energy: frame_energy,
            forces,
            stress,
            info,
        });
    }
    Ok(frames)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crystal::prototypes;

    #[test]
    fn comment_line_tokens() {
        let p = comment_pairs(r#"Lattice="1 0 0 0 1 0 0 0 1" Properties=species:S:1:pos:R:3 energy=-1.5 flag"#).unwrap();
        assert_eq!(p[0], ("Lattice".into(), "1 0 0 0 1 0 0 0 1".into()));
        assert_eq!(p[2], ("energy".into(), "-1.5".into()));
        assert_eq!(p[3], ("flag".into(), "T".into()));
        assert!(comment_pairs("Lattice=\"1 2").is_err());
    }

    #[test]
    fn reads_foreign_columns_and_numbers() {
        let text = "2\nLattice=\"5 0 0 0 5 0 0 0 5\" Properties=species:S:1:pos:R:3:charge:R:1\n\
                    Ar 0 0 0 0.1\n36 1 1 1 -0.1\n";
        let f = read_extxyz(text).unwrap();
        assert_eq!(f[0].structure.atomic_numbers, vec![18, 36]);
        assert_eq!(f[0].structure.positions[1], Vec3::new(1.0, 1.0, 1.0));
        assert!(f[0].forces.is_none() && f[0].energy.is_none());
    }

    #[test]
    fn malformed_input_is_rejected() {
        assert!(read_extxyz("x\n").is_err());
        assert!(read_extxyz("2\nLattice=\"5 0 0 0 5 0 0 0 5\"\nAr 0 0 0\n").is_err());
        assert!(read_extxyz("1\nProperties=species:S:1:pos:R:3\nAr 0 0 0\n").is_err());
        assert!(read_extxyz("1\nLattice=\"5 0 0 0 5 0 0 0 5\"\nXx 0 0 0\n").is_err());
        assert!(read_extxyz("").unwrap().is_empty());
    }

    #[test]
    fn info_entries_survive() {
        let f = XyzFrame::new(prototypes::bcc(18, 4.0))
            .with_info("time", 1.5)
            .with_info("note", "two words");
        let back = read_extxyz(&write_extxyz(&[f.clone()]).unwrap()).unwrap();
        assert_eq!(back[0].info, f.info);
    }
}
