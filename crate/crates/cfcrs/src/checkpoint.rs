//! Binary parameter checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "CFCK" | version u32 | entry count u64
//! per entry: name length u32 | UTF-8 name | dtype u8 | rank u32 | dims u64 * rank | values
//! ```
//!
//! The only dtype written is `1` (f64). Entries keep the store's insertion
//! order, so save, load, save gives the same bytes.

use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use cfcrs_core::nn::{ParamStore, Tensor};

use crate::error::{Error, Result};
use crate::formats::write_file;

pub const MAGIC: &[u8; 4] = b"CFCK";
pub const VERSION: u32 = 1;
pub const DTYPE_F64: u8 = 1;

pub fn to_bytes(store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.write_u32::<LE>(VERSION).unwrap();
    out.write_u64::<LE>(store.len() as u64).unwrap();
    for (name, t) in store.iter() {
        out.write_u32::<LE>(name.len() as u32).unwrap();
        out.extend_from_slice(name.as_bytes());
        out.write_u8(DTYPE_F64).unwrap();
        out.write_u32::<LE>(t.shape().len() as u32).unwrap();
        for &d in t.shape() {
            out.write_u64::<LE>(d as u64).unwrap();
        }
        for &v in t.data() {
            out.write_f64::<LE>(v).unwrap();
        }
    }
    out
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

pub fn from_bytes(bytes: &[u8]) -> Result<ParamStore> {
    let mut r = Cursor::new(bytes);
    let eof = |_| bad("truncated file");
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(eof)?;
    if &magic != MAGIC {
        return Err(bad("not a checkpoint (bad magic)"));
    }
    let version = r.read_u32::<LE>().map_err(eof)?;
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let count = r.read_u64::<LE>().map_err(eof)?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = r.read_u32::<LE>().map_err(eof)? as usize;
        let mut name = vec![0u8; len.min(bytes.len())];
        r.read_exact(&mut name).map_err(eof)?;
        if name.len() != len {
            return Err(bad("truncated file"));
        }
        let name = String::from_utf8(name).map_err(|_| bad("parameter name is not UTF-8"))?;
        let dtype = r.read_u8().map_err(eof)?;
        if dtype != DTYPE_F64 {
            return Err(bad(format!("`{name}`: unknown dtype tag {dtype}")));
        }
        let rank = r.read_u32::<LE>().map_err(eof)? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.read_u64::<LE>().map_err(eof)? as usize);
        }
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| bad("shape overflows"))?;
        let remaining = bytes.len() - r.position() as usize;
        if n.checked_mul(8).map_or(true, |b| b > remaining) {
            return Err(bad("truncated file"));
        }
        let mut data = vec![0.0; n];
        r.read_f64_into::<LE>(&mut data).map_err(eof)?;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(bad(format!("`{name}` holds non-finite values")));
        }
        if store.contains(&name) {
            return Err(bad(format!("duplicate parameter `{name}`")));
        }
        store.insert(name, Tensor::new(shape, data));
    }
    if (r.position() as usize) != bytes.len() {
        return Err(bad("trailing bytes after the last entry"));
    }
    Ok(store)
}

pub fn save(store: &ParamStore, path: &Path) -> Result<()> {
    write_file(path, &to_bytes(store))
}

pub fn load(path: &Path) -> Result<ParamStore> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

/// Overwrites every parameter of `store` from `saved`. Names and shapes must
/// match exactly.
pub fn restore_into(store: &mut ParamStore, saved: &ParamStore) -> Result<()> {
    if saved.len() != store.len() {
        return Err(bad(format!("checkpoint has {} parameters, model has {}", saved.len(), store.len())));
    }
    for (name, t) in saved.iter() {
        store.set(name, t.clone()).map_err(|e| bad(e.to_string()))?;
    }
    Ok(())
}
