//! Checkpoint container.
//!
//! Layout: magic `CMTK`, u32 version, u64 header length, a JSON header, then
//! the raw little-endian arrays the header lists, in order.

use std::path::Path;

use cmtkd_core::{ParamStore, Scalar, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::Dtype;
use crate::data::Normalization;
use crate::error::{Error, Result};
use crate::rng::RngState;

pub const MAGIC: &[u8; 4] = b"CMTK";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

/// Accuracies recorded when the checkpoint was written.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordedMetrics {
    pub top1_student: f64,
    pub top5_student: f64,
    pub top1_combined_teacher: Option<f64>,
    pub top5_combined_teacher: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    /// The run's configuration as TOML.
    pub config: String,
    pub dtype: Dtype,
    pub epoch: usize,
    pub step: usize,
    /// `[C, H, W]` and class count of the training data.
    pub input: [usize; 3],
    pub classes: usize,
    pub normalization: Normalization,
    pub rng_order: RngState,
    pub rng_augment: RngState,
    pub metrics: RecordedMetrics,
    pub arrays: Vec<ArrayEntry>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    pub header: Header,
    pub values: Vec<Tensor<T>>,
}

fn dtype_of<T: Scalar>() -> Dtype {
    if std::mem::size_of::<T>() == 4 {
        Dtype::F32
    } else {
        Dtype::F64
    }
}

/// Reads only the header, e.g. to choose the scalar type before loading.
pub fn read_header(bytes: &[u8]) -> Result<(Header, &[u8])> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(bad("not a checkpoint (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = &bytes[16..];
    if body.len() < len {
        return Err(bad("truncated header"));
    }
    let header: Header = serde_json::from_slice(&body[..len]).map_err(|e| Error::Checkpoint(e.to_string()))?;
    Ok((header, &body[len..]))
}

impl<T: Scalar> Checkpoint<T> {
    /// Captures every store entry (parameters and buffers).
    pub fn capture(mut header: Header, store: &ParamStore<T>) -> Self {
        header.dtype = dtype_of::<T>();
        header.arrays = store
            .iter()
            .map(|(_, p)| ArrayEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
            })
            .collect();
        let values = store.iter().map(|(_, p)| p.value.clone()).collect();
        Checkpoint { header, values }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let json = serde_json::to_vec(&self.header).expect("header serialises");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for v in &self.values {
            for &x in v.data() {
                match self.header.dtype {
                    Dtype::F32 => out.extend_from_slice(&(x.as_f64() as f32).to_le_bytes()),
                    Dtype::F64 => out.extend_from_slice(&x.as_f64().to_le_bytes()),
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, mut rest) = read_header(bytes)?;
        if header.dtype != dtype_of::<T>() {
            return Err(Error::Checkpoint(format!("checkpoint holds {:?} arrays", header.dtype)));
        }
        let width = std::mem::size_of::<T>();
        let mut values = Vec::with_capacity(header.arrays.len());
        for a in &header.arrays {
            let n: usize = a.shape.iter().product();
            if rest.len() < n * width {
                return Err(Error::Checkpoint(format!("array {} is truncated", a.name)));
            }
            let (raw, tail) = rest.split_at(n * width);
            rest = tail;
            let data = raw
                .chunks_exact(width)
                .map(|c| match header.dtype {
                    Dtype::F32 => T::of(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64),
                    Dtype::F64 => T::of(f64::from_le_bytes(c.try_into().expect("8 bytes"))),
                })
                .collect();
            values.push(Tensor::new(&a.shape, data)?);
        }
        if !rest.is_empty() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", rest.len())));
        }
        Ok(Checkpoint { header, values })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(Error::io(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path).map_err(Error::io(path))?)
    }

    /// Writes every array into `store` by name; the two must hold the same
    /// set of entries.
    pub fn restore(&self, store: &mut ParamStore<T>) -> Result<()> {
        if store.len() != self.values.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} arrays, model has {}",
                self.values.len(),
                store.len()
            )));
        }
        for (a, v) in self.header.arrays.iter().zip(&self.values) {
            store.assign(&a.name, v.clone()).map_err(|e| Error::Checkpoint(e.to_string()))?;
        }
        Ok(())
    }
}
