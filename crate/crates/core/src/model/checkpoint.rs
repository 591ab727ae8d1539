//! Binary checkpoints.
//!
//! Little-endian layout: magic `FTXT`, format version `u32` (= 1), tensor
//! count `u32`, then per tensor: name length `u32`, UTF-8 name, rank `u32`,
//! dims as `u64`s, row-major `f32` data.

use std::fs;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{ModelError, ModelParameters, NamedTensor};

pub const MAGIC: &[u8; 4] = b"FTXT";
pub const FORMAT_VERSION: u32 = 1;

/// Upper bound on elements in one tensor; guards allocations on corrupt input.
const MAX_TENSOR_ELEMENTS: u64 = 1 << 32;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint I/O: {0}")]
    Io(#[from] io::Error),
    #[error("not a checkpoint (bad magic {0:?})")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("checkpoint is truncated")]
    Truncated,
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint shape mismatch: {0}")]
    ShapeMismatch(#[from] ModelError),
}

/// Serializes `params` to `writer`.
pub fn write_checkpoint<W: Write>(params: &ModelParameters<f32>, mut writer: W) -> io::Result<()> {
    let tensors = params.extract_weights();
    writer.write_all(MAGIC)?;
    writer.write_all(&FORMAT_VERSION.to_le_bytes())?;
    writer.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for t in &tensors {
        writer.write_all(&(t.name.len() as u32).to_le_bytes())?;
        writer.write_all(t.name.as_bytes())?;
        writer.write_all(&(t.shape.len() as u32).to_le_bytes())?;
        for &d in &t.shape {
            writer.write_all(&(d as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(t.data.len() * 4);
        for v in &t.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        writer.write_all(&buf)?;
    }
    writer.flush()
}

pub fn save_checkpoint(params: &ModelParameters<f32>, path: &Path) -> Result<(), CheckpointError> {
    let file = fs::File::create(path)?;
    write_checkpoint(params, BufWriter::new(file))?;
    Ok(())
}

fn read_exact<R: Read>(reader: &mut R, buf: &mut [u8]) -> Result<(), CheckpointError> {
    reader.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => CheckpointError::Truncated,
        _ => CheckpointError::Io(e),
    })
}

fn read_u32<R: Read>(reader: &mut R) -> Result<u32, CheckpointError> {
    let mut b = [0u8; 4];
    read_exact(reader, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(reader: &mut R) -> Result<u64, CheckpointError> {
    let mut b = [0u8; 8];
    read_exact(reader, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// Parses a checkpoint. `max_seq_len` is not stored in the file and is
/// attached to the returned parameters.
pub fn read_checkpoint<R: Read>(
    mut reader: R,
    max_seq_len: usize,
) -> Result<ModelParameters<f32>, CheckpointError> {
    let mut magic = [0u8; 4];
    read_exact(&mut reader, &mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic(magic));
    }
    let version = read_u32(&mut reader)?;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let count = read_u32(&mut reader)?;
    if count as usize != super::TENSOR_NAMES.len() {
        return Err(CheckpointError::ShapeMismatch(ModelError::Shape(format!(
            "expected {} tensors, found {count}",
            super::TENSOR_NAMES.len()
        ))));
    }
    let mut tensors = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let name_len = read_u32(&mut reader)? as usize;
        if name_len > 256 {
            return Err(CheckpointError::Corrupt(format!(
                "tensor name length {name_len}"
            )));
        }
        let mut name = vec![0u8; name_len];
        read_exact(&mut reader, &mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| CheckpointError::Corrupt("tensor name is not UTF-8".into()))?;
        let rank = read_u32(&mut reader)?;
        if rank > 8 {
            return Err(CheckpointError::Corrupt(format!(
                "tensor {name:?} has rank {rank}"
            )));
        }
        let mut shape = Vec::with_capacity(rank as usize);
        let mut elements: u64 = 1;
        for _ in 0..rank {
            let d = read_u64(&mut reader)?;
            elements = elements
                .checked_mul(d)
                .filter(|&n| n <= MAX_TENSOR_ELEMENTS)
                .ok_or_else(|| CheckpointError::Corrupt(format!("tensor {name:?} is too large")))?;
            shape.push(d as usize);
        }
        let mut raw = vec![0u8; elements as usize * 4];
        read_exact(&mut reader, &mut raw)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        tensors.push(NamedTensor { name, shape, data });
    }
    let mut trailing = [0u8; 1];
    if reader.read(&mut trailing)? != 0 {
        return Err(CheckpointError::Corrupt(
            "trailing bytes after last tensor".into(),
        ));
    }
    Ok(ModelParameters::from_named_tensors(tensors, max_seq_len)?)
}

pub fn load_checkpoint(
    path: &Path,
    max_seq_len: usize,
) -> Result<ModelParameters<f32>, CheckpointError> {
    let file = fs::File::open(path)?;
    read_checkpoint(BufReader::new(file), max_seq_len)
}
