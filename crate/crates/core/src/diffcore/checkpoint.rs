//! Flat binary parameter checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      4 bytes  "TFRM"
//! version    u32      currently 1
//! count      u32      number of parameter records
//! record*    name_len u32, name bytes (UTF-8), rank u32, dims u32 × rank,
//!            values f64 × prod(dims)
//! ```

use std::io::{Read, Write};
use std::path::Path;

use super::params::ParameterStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"TFRM";
pub const VERSION: u32 = 1;

pub fn write_checkpoint(store: &ParameterStore, mut w: impl Write) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(store.len() as u32).to_le_bytes())?;
    for id in store.ids() {
        let name = store.name(id).as_bytes();
        let value = store.value(id);
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&(value.rank() as u32).to_le_bytes())?;
        for &d in value.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for v in value.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_checkpoint(mut r: impl Read) -> Result<Vec<(String, Tensor)>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Parse("not a checkpoint (bad magic)".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Parse(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let count = read_u32(&mut r)? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Parse("parameter name is not UTF-8".into()))?;
        let rank = read_u32(&mut r)? as usize;
        let dims = (0..rank)
            .map(|_| read_u32(&mut r).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = dims.iter().product();
        let mut raw = vec![0u8; n * 8];
        r.read_exact(&mut raw)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        out.push((name, Tensor::new(dims, data)?));
    }
    Ok(out)
}

pub fn save(store: &ParameterStore, path: impl AsRef<Path>) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    write_checkpoint(store, &mut w)?;
    w.flush()?;
    Ok(())
}

/// Overwrites the values of `store` from a checkpoint file. Every record
/// must match a registered parameter by name and shape, and every
/// parameter must be present.
pub fn load_into(store: &mut ParameterStore, path: impl AsRef<Path>) -> Result<()> {
    let file = std::fs::File::open(path)?;
    let records = read_checkpoint(std::io::BufReader::new(file))?;
    if records.len() != store.len() {
        return Err(Error::Parse(format!(
            "checkpoint holds {} parameters, model expects {}",
            records.len(),
            store.len()
        )));
    }
    for (name, tensor) in records {
        let id = store
            .id(&name)
            .ok_or_else(|| Error::Parse(format!("unknown parameter `{name}`")))?;
        if store.value(id).shape() != tensor.shape() {
            return Err(Error::Dimension {
                op: "load_checkpoint",
                left: store.value(id).shape().to_vec(),
                right: tensor.shape().to_vec(),
            });
        }
        store
            .value_mut(id)
            .data_mut()
            .copy_from_slice(tensor.data());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout_is_fixed() {
        let mut s = ParameterStore::new();
        s.register("ab", Tensor::new(vec![1, 2], vec![1.0, -2.5]).unwrap())
            .unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&s, &mut buf).unwrap();
        assert_eq!(&buf[..4], b"TFRM");
        assert_eq!(&buf[4..8], &1u32.to_le_bytes());
        assert_eq!(&buf[8..12], &1u32.to_le_bytes());
        assert_eq!(&buf[12..16], &2u32.to_le_bytes());
        assert_eq!(&buf[16..18], b"ab");
        assert_eq!(&buf[18..22], &2u32.to_le_bytes());
        assert_eq!(&buf[22..26], &1u32.to_le_bytes());
        assert_eq!(&buf[26..30], &2u32.to_le_bytes());
        assert_eq!(&buf[30..38], &1.0f64.to_le_bytes());
        assert_eq!(&buf[38..46], &(-2.5f64).to_le_bytes());
        assert_eq!(buf.len(), 46);
    }

    #[test]
    fn bad_magic_rejected() {
        let err = read_checkpoint(&b"XXXX\x01\0\0\0\0\0\0\0"[..]).unwrap_err();
        assert!(matches!(err, Error::Parse(_)));
    }
}
