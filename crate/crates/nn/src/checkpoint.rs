//! Binary checkpoint: a metadata string followed by named `f64` tensors.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   8 bytes  "DFCKPT01"
//! meta    u32 length + UTF-8 bytes
//! count   u32
//! tensor  u32 name length + UTF-8 name, u64 rows, u64 cols, rows*cols f64
//! ```

use std::io::{self, Read, Write};

use ndarray::Array2;

use crate::params::ParamStore;

const MAGIC: &[u8; 8] = b"DFCKPT01";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

pub fn write_checkpoint<W: Write>(
    mut w: W,
    meta: &str,
    store: &ParamStore,
) -> Result<(), CheckpointError> {
    w.write_all(MAGIC)?;
    w.write_all(&(meta.len() as u32).to_le_bytes())?;
    w.write_all(meta.as_bytes())?;
    w.write_all(&(store.len() as u32).to_le_bytes())?;
    for (_, name, value) in store.iter() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(value.nrows() as u64).to_le_bytes())?;
        w.write_all(&(value.ncols() as u64).to_le_bytes())?;
        for x in value.iter() {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_string<R: Read>(r: &mut R) -> Result<String, CheckpointError> {
    let len = read_u32(r)? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| CheckpointError::Malformed(e.to_string()))
}

/// Returns the metadata string and the tensors in file order.
pub fn read_checkpoint<R: Read>(mut r: R) -> Result<(String, ParamStore), CheckpointError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let meta = read_string(&mut r)?;
    let count = read_u32(&mut r)?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name = read_string(&mut r)?;
        let rows = read_u64(&mut r)? as usize;
        let cols = read_u64(&mut r)? as usize;
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            data.push(f64::from_le_bytes(b));
        }
        let value = Array2::from_shape_vec((rows, cols), data)
            .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        if store.id(&name).is_some() {
            return Err(CheckpointError::Malformed(format!("duplicate tensor {name}")));
        }
        store.add(name, value);
    }
    Ok((meta, store))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_names_and_bits() {
        let mut store = ParamStore::new();
        store.add("a", Array2::from_shape_vec((2, 2), vec![1.0, -0.0, f64::MIN_POSITIVE, 3.5]).unwrap());
        store.add("b.bias", Array2::zeros((1, 3)));
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, "{\"kind\":\"test\"}", &store).unwrap();
        let (meta, back) = read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(meta, "{\"kind\":\"test\"}");
        assert_eq!(back, store);
    }

    #[test]
    fn rejects_bad_magic() {
        let err = read_checkpoint(&b"NOTACKPT\0\0\0\0"[..]).unwrap_err();
        assert!(matches!(err, CheckpointError::BadMagic));
    }
}
