//! Versioned binary checkpoints.
//!
//! Layout (little-endian): magic `KESTCKPT`, `u32` version, `u64` length of
//! the JSON-encoded [`ModelConfig`], the JSON bytes, `u64` parameter count,
//! then per parameter: `u32` name length, name, `u8` frozen flag, `u64`
//! rows, `u64` cols, and `rows × cols` `f64` values.

use std::io::{Read, Write};
use std::path::Path;

use super::{Model, ModelConfig};
use crate::autograd::ParamStore;
use crate::error::{KestError, Result};
use crate::tensor::{Mat, Scalar};

const MAGIC: &[u8; 8] = b"KESTCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn save_checkpoint<T: Scalar>(model: &Model<T>, path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    out.write_all(MAGIC)?;
    out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    let cfg = serde_json::to_vec(model.config())?;
    out.write_all(&(cfg.len() as u64).to_le_bytes())?;
    out.write_all(&cfg)?;
    let params = model.params();
    out.write_all(&(params.len() as u64).to_le_bytes())?;
    for id in params.ids() {
        let name = params.name(id).as_bytes();
        out.write_all(&(name.len() as u32).to_le_bytes())?;
        out.write_all(name)?;
        out.write_all(&[params.is_frozen(id) as u8])?;
        let m = params.get(id);
        out.write_all(&(m.rows() as u64).to_le_bytes())?;
        out.write_all(&(m.cols() as u64).to_le_bytes())?;
        for v in m.data() {
            out.write_all(&v.f64().to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// Loads a checkpoint. When `expected` is given, a differing stored config
/// is rejected.
pub fn load_checkpoint<T: Scalar>(path: &Path, expected: Option<&ModelConfig>) -> Result<Model<T>> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(KestError::integrity("not a checkpoint file"));
    }
    let version = read_u32(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(KestError::integrity(format!("unsupported checkpoint version {version}")));
    }
    let cfg_len = read_u64(&mut r)? as usize;
    let mut cfg_bytes = vec![0u8; cfg_len];
    r.read_exact(&mut cfg_bytes)?;
    let config: ModelConfig = serde_json::from_slice(&cfg_bytes)?;
    if let Some(exp) = expected {
        if *exp != config {
            return Err(KestError::config(format!(
                "checkpoint config does not match: stored {config:?}, expected {exp:?}"
            )));
        }
    }
    let count = read_u64(&mut r)? as usize;
    let mut store = ParamStore::<T>::default();
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| KestError::integrity("parameter name is not UTF-8"))?;
        let mut flag = [0u8; 1];
        r.read_exact(&mut flag)?;
        let rows = read_u64(&mut r)? as usize;
        let cols = read_u64(&mut r)? as usize;
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            data.push(T::of(f64::from_le_bytes(b)));
        }
        let id = store.add(name, Mat::from_vec(rows, cols, data));
        store.set_frozen(id, flag[0] != 0);
    }
    Model::from_params(config, store)
}
