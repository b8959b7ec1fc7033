//! Binary tensor checkpoint format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "SEMCKPT\0"
//! version  u32
//! records  until EOF:
//!   name_len u32, name (UTF-8), rank u32, extents u64 * rank,
//!   payload  f64 * prod(extents)
//! ```

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"SEMCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] io::Error),
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated record for tensor {0:?}")]
    Truncated(String),
    #[error("tensor name is not valid UTF-8")]
    InvalidName,
    #[error("duplicate tensor {0:?}")]
    Duplicate(String),
    #[error("missing tensor {0:?}")]
    Missing(String),
    #[error("tensor {name:?} has shape {found:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
}

/// Ordered collection of named `f64` tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    entries: Vec<(String, Tensor<f64>)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<f64>) -> Result<(), CheckpointError> {
        let name = name.into();
        if self.get(&name).is_some() {
            return Err(CheckpointError::Duplicate(name));
        }
        self.entries.push((name, tensor));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f64>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor<f64>, CheckpointError> {
        self.get(name)
            .ok_or_else(|| CheckpointError::Missing(name.to_string()))
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &Tensor<f64>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), CheckpointError> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        for (name, t) in &self.entries {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.rank() as u32).to_le_bytes())?;
            for &e in t.shape() {
                w.write_all(&(e as u64).to_le_bytes())?;
            }
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, CheckpointError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| CheckpointError::BadMagic)?;
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = read_u32(&mut r)?.ok_or(CheckpointError::BadMagic)?;
        if version != VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        let mut ckpt = Checkpoint::new();
        while let Some(name_len) = read_u32(&mut r)? {
            let mut name = vec![0u8; name_len as usize];
            let truncated = |n: &[u8]| CheckpointError::Truncated(String::from_utf8_lossy(n).into_owned());
            r.read_exact(&mut name).map_err(|_| truncated(&name))?;
            let name = String::from_utf8(name).map_err(|_| CheckpointError::InvalidName)?;
            let trunc = || CheckpointError::Truncated(name.clone());
            let rank = read_u32(&mut r)?.ok_or_else(trunc)?;
            let mut shape = Vec::with_capacity(rank as usize);
            for _ in 0..rank {
                let mut b = [0u8; 8];
                r.read_exact(&mut b).map_err(|_| trunc())?;
                shape.push(u64::from_le_bytes(b) as usize);
            }
            let n: usize = shape.iter().product();
            let mut bytes = vec![0u8; n * 8];
            r.read_exact(&mut bytes).map_err(|_| trunc())?;
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let tensor = Tensor::new(shape, data).map_err(|_| trunc())?;
            ckpt.insert(name, tensor)?;
        }
        Ok(ckpt)
    }

    /// Writes to a sibling temporary file and renames it into place.
    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let tmp = path.with_extension("tmp");
        {
            let mut f = io::BufWriter::new(fs::File::create(&tmp)?);
            self.write_to(&mut f)?;
            f.flush()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::read_from(io::BufReader::new(fs::File::open(path)?))
    }
}

/// `Ok(None)` on clean EOF before the first byte.
fn read_u32<R: Read>(r: &mut R) -> Result<Option<u32>, CheckpointError> {
    let mut b = [0u8; 4];
    let mut filled = 0;
    while filled < 4 {
        match r.read(&mut b[filled..])? {
            0 if filled == 0 => return Ok(None),
            0 => return Err(CheckpointError::Truncated(String::new())),
            n => filled += n,
        }
    }
    Ok(Some(u32::from_le_bytes(b)))
}
