//! Checkpoint container: a config fingerprint plus every named tensor,
//! each embedded in the single-tensor wire format.
//!
//! Layout: magic `SLWZ`, little-endian u16 version, 32-byte SHA-256 of the
//! canonical config text, u32 entry count, then per entry a u16 name
//! length, the UTF-8 name, and the tensor blob. Trainability is recovered
//! from the name on load; the seed is not persisted separately because the
//! fingerprint already covers it.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::config::ModelConfig;
use crate::model::params::Params;
use crate::model::Model;
use crate::scalar::Scalar;
use crate::tensor::io::{read_tensor, write_tensor};

pub const STORE_MAGIC: [u8; 4] = *b"SLWZ";
pub const STORE_VERSION: u16 = 1;

pub fn save_model<S: Scalar>(path: &Path, model: &Model<S>) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    w.write_all(&STORE_MAGIC)?;
    w.write_all(&STORE_VERSION.to_le_bytes())?;
    w.write_all(&model.config.fingerprint())?;
    let n: u32 = model
        .params
        .len()
        .try_into()
        .map_err(|_| Error::Format("too many tensors for the container".into()))?;
    w.write_all(&n.to_le_bytes())?;
    for (name, tensor) in model.params.iter() {
        let bytes = name.as_bytes();
        let len: u16 = bytes
            .len()
            .try_into()
            .map_err(|_| Error::Format(format!("tensor name too long: `{name}`")))?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(bytes)?;
        write_tensor(&mut w, tensor)?;
    }
    w.flush()?;
    Ok(())
}

/// Read only the config fingerprint, for mismatch diagnostics.
pub fn read_fingerprint(path: &Path) -> Result<[u8; 32]> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != STORE_MAGIC {
        return Err(Error::Format("not a model checkpoint (bad magic)".into()));
    }
    let mut ver = [0u8; 2];
    r.read_exact(&mut ver)?;
    let version = u16::from_le_bytes(ver);
    if version != STORE_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let mut fp = [0u8; 32];
    r.read_exact(&mut fp)?;
    Ok(fp)
}

pub fn load_model<S: Scalar>(path: &Path, config: &ModelConfig) -> Result<Model<S>> {
    config.validate()?;
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != STORE_MAGIC {
        return Err(Error::Format("not a model checkpoint (bad magic)".into()));
    }
    let mut ver = [0u8; 2];
    r.read_exact(&mut ver)?;
    let version = u16::from_le_bytes(ver);
    if version != STORE_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let mut fp = [0u8; 32];
    r.read_exact(&mut fp)?;
    if fp != config.fingerprint() {
        return Err(Error::Format(
            "checkpoint was written for a different configuration".into(),
        ));
    }
    let mut cnt = [0u8; 4];
    r.read_exact(&mut cnt)?;
    let n = u32::from_le_bytes(cnt) as usize;
    let mut params = Params::new();
    for _ in 0..n {
        let mut len = [0u8; 2];
        r.read_exact(&mut len)?;
        let mut name = vec![0u8; u16::from_le_bytes(len) as usize];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let tensor = read_tensor::<S, _>(&mut r)?;
        params.insert(name, tensor)?;
    }
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(Error::Format("trailing bytes after the last tensor".into()));
    }
    Ok(Model {
        config: config.clone(),
        params,
    })
}
