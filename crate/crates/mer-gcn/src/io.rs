//! The MERT tensor container: a small versioned binary format used for
//! checkpoints and raw sequence storage.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic  "MERT"
//! u32    format version (currently 1)
//! u32    entry count
//! entry: u16 name length, UTF-8 name bytes,
//!        u32 ndim, u64 dims[ndim], f64 data (row-major)
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use thiserror::Error;

use crate::tensor::{Tensor, TensorError};

pub const MERT_MAGIC: &[u8; 4] = b"MERT";
pub const MERT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("i/o error reading or writing container: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic bytes {found:?}; expected \"MERT\"")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported container version {found}; this build reads version {MERT_VERSION}")]
    UnsupportedVersion { found: u32 },
    #[error("entry name is not valid UTF-8")]
    NameNotUtf8,
    #[error("entry `{name}` is malformed: {reason}")]
    BadEntry { name: String, reason: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Writes named tensors in the given order.
pub fn write_container<P: AsRef<Path>>(
    path: P,
    entries: &[(&str, &Tensor)],
) -> Result<(), ContainerError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MERT_MAGIC)?;
    w.write_u32::<LittleEndian>(MERT_VERSION)?;
    w.write_u32::<LittleEndian>(entries.len() as u32)?;
    for (name, tensor) in entries {
        let bytes = name.as_bytes();
        assert!(bytes.len() <= u16::MAX as usize, "entry name too long");
        w.write_u16::<LittleEndian>(bytes.len() as u16)?;
        w.write_all(bytes)?;
        w.write_u32::<LittleEndian>(tensor.shape().len() as u32)?;
        for &dim in tensor.shape() {
            w.write_u64::<LittleEndian>(dim as u64)?;
        }
        for &v in tensor.data() {
            w.write_f64::<LittleEndian>(v)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_header<R: Read>(r: &mut R) -> Result<u32, ContainerError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MERT_MAGIC {
        return Err(ContainerError::BadMagic { found: magic });
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != MERT_VERSION {
        return Err(ContainerError::UnsupportedVersion { found: version });
    }
    r.read_u32::<LittleEndian>().map_err(Into::into)
}

fn read_entry_meta<R: Read>(r: &mut R) -> Result<(String, Vec<usize>), ContainerError> {
    let name_len = r.read_u16::<LittleEndian>()? as usize;
    let mut name_bytes = vec![0u8; name_len];
    r.read_exact(&mut name_bytes)?;
    let name = String::from_utf8(name_bytes).map_err(|_| ContainerError::NameNotUtf8)?;
    let ndim = r.read_u32::<LittleEndian>()? as usize;
    let mut dims = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let d = r.read_u64::<LittleEndian>()?;
        if d == 0 || d > (1u64 << 32) {
            return Err(ContainerError::BadEntry {
                name,
                reason: format!("dimension {d} out of range"),
            });
        }
        dims.push(d as usize);
    }
    Ok((name, dims))
}

/// Reads every entry, preserving file order.
pub fn read_container<P: AsRef<Path>>(path: P) -> Result<Vec<(String, Tensor)>, ContainerError> {
    let mut r = BufReader::new(File::open(path)?);
    let count = read_header(&mut r)?;
    let mut entries = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let (name, dims) = read_entry_meta(&mut r)?;
        let numel: usize = dims.iter().product();
        let mut data = vec![0.0f64; numel];
        r.read_f64_into::<LittleEndian>(&mut data)?;
        entries.push((name, Tensor::new(dims, data)?));
    }
    Ok(entries)
}

/// Reads only the entry names and shapes, skipping over the data.
pub fn peek_shapes<P: AsRef<Path>>(path: P) -> Result<Vec<(String, Vec<usize>)>, ContainerError> {
    let mut r = BufReader::new(File::open(path)?);
    let count = read_header(&mut r)?;
    let mut entries = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let (name, dims) = read_entry_meta(&mut r)?;
        let numel: usize = dims.iter().product();
        r.seek(SeekFrom::Current((numel * 8) as i64))?;
        entries.push((name, dims));
    }
    Ok(entries)
}
