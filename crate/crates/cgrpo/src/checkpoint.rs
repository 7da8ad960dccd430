//! Versioned binary dumps of named f64 arrays.
//!
//! One container serves both the public policy checkpoint and the full
//! training-state snapshot (optimizer moments, multiplier state, counters).
//! Values round-trip bit-exactly: `load(save(p)) == p`.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::gridworld::OBS_DIM;
use crate::policy::{MlpParams, HIDDEN, NUM_ACTIONS};

const MAGIC: &[u8; 8] = b"CGRNCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] io::Error),
    #[error("corrupt checkpoint: {0}")]
    Format(String),
    #[error("checkpoint missing array {0:?}")]
    MissingArray(String),
    #[error("array {name:?} has shape {found:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// An ordered set of named arrays.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ArrayDump {
    pub entries: Vec<ArrayEntry>,
}

impl ArrayDump {
    pub fn push(&mut self, name: &str, shape: &[usize], data: Vec<f64>) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.entries.push(ArrayEntry {
            name: name.to_string(),
            shape: shape.to_vec(),
            data,
        });
    }

    pub fn push_scalar(&mut self, name: &str, value: f64) {
        self.push(name, &[1], vec![value]);
    }

    pub fn get(&self, name: &str) -> Result<&ArrayEntry, CheckpointError> {
        self.entries
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| CheckpointError::MissingArray(name.to_string()))
    }

    pub fn take(
        &self,
        name: &str,
        expected_shape: &[usize],
    ) -> Result<Vec<f64>, CheckpointError> {
        let entry = self.get(name)?;
        if entry.shape != expected_shape {
            return Err(CheckpointError::ShapeMismatch {
                name: name.to_string(),
                found: entry.shape.clone(),
                expected: expected_shape.to_vec(),
            });
        }
        Ok(entry.data.clone())
    }

    pub fn scalar(&self, name: &str) -> Result<f64, CheckpointError> {
        Ok(self.take(name, &[1])?[0])
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for e in &self.entries {
            let name = e.name.as_bytes();
            w.write_all(&(name.len() as u16).to_le_bytes())?;
            w.write_all(name)?;
            w.write_all(&(e.shape.len() as u8).to_le_bytes())?;
            for &d in &e.shape {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for &v in &e.data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)
            .map_err(|_| CheckpointError::Format("file too short for header".into()))?;
        if &magic != MAGIC {
            return Err(CheckpointError::Format("bad magic".into()));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(CheckpointError::Format(format!(
                "unsupported version {version}"
            )));
        }
        let n = read_u32(&mut r)? as usize;
        let mut entries = Vec::with_capacity(n);
        for _ in 0..n {
            let name_len = read_u16(&mut r)? as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)
                .map_err(|_| CheckpointError::Format("truncated array name".into()))?;
            let name = String::from_utf8(name)
                .map_err(|_| CheckpointError::Format("array name not utf8".into()))?;
            let ndim = read_u8(&mut r)? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(read_u64(&mut r)? as usize);
            }
            let len: usize = shape.iter().product();
            let mut data = Vec::with_capacity(len);
            let mut buf = [0u8; 8];
            for _ in 0..len {
                r.read_exact(&mut buf)
                    .map_err(|_| CheckpointError::Format("truncated array data".into()))?;
                data.push(f64::from_le_bytes(buf));
            }
            entries.push(ArrayEntry { name, shape, data });
        }
        Ok(Self { entries })
    }
}

fn read_u8(r: &mut impl Read) -> Result<u8, CheckpointError> {
    let mut b = [0u8; 1];
    r.read_exact(&mut b)
        .map_err(|_| CheckpointError::Format("truncated header".into()))?;
    Ok(b[0])
}

fn read_u16(r: &mut impl Read) -> Result<u16, CheckpointError> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)
        .map_err(|_| CheckpointError::Format("truncated header".into()))?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32(r: &mut impl Read) -> Result<u32, CheckpointError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| CheckpointError::Format("truncated header".into()))?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64, CheckpointError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)
        .map_err(|_| CheckpointError::Format("truncated header".into()))?;
    Ok(u64::from_le_bytes(b))
}

fn policy_shapes() -> [(&'static str, Vec<usize>); 6] {
    [
        ("w1", vec![HIDDEN, OBS_DIM]),
        ("b1", vec![HIDDEN]),
        ("w2", vec![HIDDEN, HIDDEN]),
        ("b2", vec![HIDDEN]),
        ("w3", vec![NUM_ACTIONS, HIDDEN]),
        ("b3", vec![NUM_ACTIONS]),
    ]
}

/// Adds the six policy blocks under `prefix.` names.
pub fn push_policy(dump: &mut ArrayDump, prefix: &str, params: &MlpParams) {
    for ((name, shape), (_, data)) in policy_shapes().iter().zip(params.blocks()) {
        dump.push(&format!("{prefix}.{name}"), shape, data.to_vec());
    }
}

/// Reads the six policy blocks written by [`push_policy`].
pub fn read_policy(dump: &ArrayDump, prefix: &str) -> Result<MlpParams, CheckpointError> {
    let mut params = MlpParams::zeros();
    for ((name, shape), (_, block)) in policy_shapes().iter().zip(params.blocks_mut()) {
        *block = dump.take(&format!("{prefix}.{name}"), shape)?;
    }
    if let Some(block) = params.find_non_finite_block() {
        return Err(CheckpointError::Format(format!(
            "non-finite values in {prefix}.{block}"
        )));
    }
    Ok(params)
}

/// Saves bare policy parameters (the public checkpoint format).
pub fn save_policy(params: &MlpParams, path: &Path) -> Result<(), CheckpointError> {
    let mut dump = ArrayDump::default();
    push_policy(&mut dump, "policy", params);
    dump.save(path)
}

/// Loads a checkpoint that contains policy parameters (bare or full state).
pub fn load_policy(path: &Path) -> Result<MlpParams, CheckpointError> {
    read_policy(&ArrayDump::load(path)?, "policy")
}
