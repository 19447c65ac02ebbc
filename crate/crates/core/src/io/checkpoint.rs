//! Binary checkpoint of a model configuration, raw weights and averaged weights.
//!
//! Layout (little-endian): magic `HIEN`; u32 format version; u64 length and
//! UTF-8 TOML of the model configuration; the raw array table; the averaged
//! array table; u64 FNV-1a checksum of every preceding byte. An array table is
//! a u32 count followed by, per array, a u32 name length, the UTF-8 name, a u8
//! element type code, a u32 rank, u64 dims and the f64 payload.

use std::hash::Hasher;
use std::path::Path;

use fnv::FnvHasher;

use crate::error::{Error, Result};
use crate::potential::{Array, Model, ModelConfig, ModelParameters};

pub const MAGIC: &[u8; 4] = b"HIEN";
pub const CHECKPOINT_VERSION: u32 = 1;
/// Element type code of 64-bit floats.
const F64_CODE: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ModelParameters,
    /// Averaged weights; these are the ones used for prediction.
    pub ema: ModelParameters,
}

fn checksum(bytes: &[u8]) -> u64 {
    let mut h = FnvHasher::default();
    h.write(bytes);
    h.finish()
}

fn put_table(out: &mut Vec<u8>, params: &ModelParameters) {
    out.extend((params.len() as u32).to_le_bytes());
    for (name, a) in params.iter() {
        out.extend((name.len() as u32).to_le_bytes());
        out.extend(name.as_bytes());
        out.push(F64_CODE);
        out.extend((a.shape.len() as u32).to_le_bytes());
        for &d in &a.shape {
            out.extend((d as u64).to_le_bytes());
        }
        for &v in &a.data {
            out.extend(v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Checkpoint("length overflow".into()))
    }

    fn text(&mut self, n: usize) -> Result<&'a str> {
        std::str::from_utf8(self.take(n)?).map_err(|_| Error::Checkpoint("invalid UTF-8".into()))
    }

    fn table(&mut self) -> Result<ModelParameters> {
        let mut params = ModelParameters::default();
        for _ in 0..self.u32()? {
            let n = self.u32()? as usize;
            let name = self.text(n)?.to_string();
            let code = self.take(1)?[0];
            if code != F64_CODE {
                return Err(Error::Checkpoint(format!("array {name}: unsupported element type {code}")));
            }
            let rank = self.u32()? as usize;
            let shape = (0..rank).map(|_| self.len()).collect::<Result<Vec<_>>>()?;
            let count = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|&c| c <= self.bytes.len() / 8)
                .ok_or_else(|| Error::Checkpoint(format!("array {name}: implausible shape {shape:?}")))?;
            let data = self
                .take(8 * count)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            params.insert(name, Array { shape, data });
        }
        Ok(params)
    }
}

impl Checkpoint {
    pub fn new(model: &Model, ema: &ModelParameters) -> Self {
        Self {
            config: model.config.clone(),
            params: model.params.clone(),
            ema: ema.clone(),
        }
    }

    /// Model carrying the averaged weights.
    pub fn model(&self) -> Result<Model> {
        Model::from_parts(self.config.clone(), self.ema.clone())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let config = toml::to_string(&self.config).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut out = Vec::new();
        out.extend(MAGIC);
        out.extend(CHECKPOINT_VERSION.to_le_bytes());
        out.extend((config.len() as u64).to_le_bytes());
        out.extend(config.as_bytes());
        put_table(&mut out, &self.params);
        put_table(&mut out, &self.ema);
        let sum = checksum(&out);
        out.extend(sum.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let mut r = Reader { bytes, at: 4 };
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Mismatch(format!(
                "checkpoint format version {version}, expected {CHECKPOINT_VERSION}"
            )));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        if checksum(body) != u64::from_le_bytes(tail.try_into().expect("8 bytes")) {
            return Err(Error::Checkpoint("checksum mismatch".into()));
        }
        r.bytes = body;
        let n = r.len()?;
        let config: ModelConfig = toml::from_str(r.text(n)?).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let params = r.table()?;
        let ema = r.table()?;
        if r.at != body.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        config.validate()?;
        params.check_shapes(&config)?;
        ema.check_shapes(&config)?;
        Ok(Self { config, params, ema })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        super::atomic_write(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let config = ModelConfig {
            hidden_dim: 4,
            irreps: vec![4, 2],
            num_equivariant_layers: 1,
            ..ModelConfig::desk()
        };
        let model = Model::new(config, 3).unwrap();
        let mut ema = model.params.clone();
        ema.iter_mut().for_each(|(_, a)| a.data.iter_mut().for_each(|v| *v = -*v / 3.0));
        Checkpoint::new(&model, &ema)
    }

    #[test]
    fn header_fields() {
        let b = sample().to_bytes().unwrap();
        assert_eq!(&b[..4], b"HIEN");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), CHECKPOINT_VERSION);
    }

    #[test]
    fn corruption_and_versions_are_detected() {
        let c = sample();
        let b = c.to_bytes().unwrap();
        assert_eq!(Checkpoint::from_bytes(&b).unwrap(), c);
        let mut flipped = b.clone();
        let k = flipped.len() / 2;
        flipped[k] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&flipped), Err(Error::Checkpoint(_))));
        let mut newer = b.clone();
        newer[4] = 2;
        assert!(matches!(Checkpoint::from_bytes(&newer), Err(Error::Mismatch(_))));
        assert!(Checkpoint::from_bytes(&b[..b.len() - 9]).is_err());
        assert!(Checkpoint::from_bytes(b"HIEX0000000000000000").is_err());
    }
}
