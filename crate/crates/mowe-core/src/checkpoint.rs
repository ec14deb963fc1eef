//! Versioned binary checkpoints: model config as JSON plus a named
//! tensor table with little-endian 64-bit floats. Round-trips are exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{MoweError, Result};
use crate::model::ModelConfig;
use crate::numerics::params::ParamStore;
use crate::numerics::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MOWECKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn save_checkpoint(path: &Path, config: &ModelConfig, store: &ParamStore) -> Result<()> {
    let file = File::create(path)
        .map_err(|e| MoweError::io(format!("creating checkpoint {}", path.display()), e))?;
    let mut w = BufWriter::new(file);
    let io = |e| MoweError::io("write checkpoint", e);

    w.write_all(CHECKPOINT_MAGIC).map_err(io)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes()).map_err(io)?;
    let config_json = serde_json::to_vec(config)
        .map_err(|e| MoweError::invalid(format!("encode checkpoint config: {e}")))?;
    w.write_all(&(config_json.len() as u32).to_le_bytes()).map_err(io)?;
    w.write_all(&config_json).map_err(io)?;

    w.write_all(&(store.len() as u64).to_le_bytes()).map_err(io)?;
    for (name, entry) in store.iter() {
        let bytes = name.as_bytes();
        if bytes.len() > u16::MAX as usize {
            return Err(MoweError::invalid(format!("parameter name too long: {name}")));
        }
        w.write_all(&(bytes.len() as u16).to_le_bytes()).map_err(io)?;
        w.write_all(bytes).map_err(io)?;
        w.write_all(&[entry.trainable as u8]).map_err(io)?;
        let shape = entry.tensor.shape();
        w.write_all(&[shape.len() as u8]).map_err(io)?;
        for &dim in shape {
            w.write_all(&(dim as u64).to_le_bytes()).map_err(io)?;
        }
        for v in entry.tensor.data() {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelConfig, ParamStore)> {
    let file = File::open(path)
        .map_err(|e| MoweError::io(format!("opening checkpoint {}", path.display()), e))?;
    let mut r = BufReader::new(file);
    let bad = |message: &str| MoweError::format(path, message);

    let mut magic = [0u8; 8];
    read_exact(&mut r, &mut magic, path)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(bad("not a checkpoint file (bad magic)"));
    }
    let version = read_u32(&mut r, path)?;
    if version != CHECKPOINT_VERSION {
        return Err(bad(&format!(
            "unsupported checkpoint version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let config_len = read_u32(&mut r, path)? as usize;
    let mut config_json = vec![0u8; config_len];
    read_exact(&mut r, &mut config_json, path)?;
    let config: ModelConfig = serde_json::from_slice(&config_json)
        .map_err(|e| bad(&format!("bad embedded config: {e}")))?;

    let count = read_u64(&mut r, path)? as usize;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name_len = read_u16(&mut r, path)? as usize;
        let mut name = vec![0u8; name_len];
        read_exact(&mut r, &mut name, path)?;
        let name = String::from_utf8(name).map_err(|_| bad("parameter name is not UTF-8"))?;
        let mut flag = [0u8; 1];
        read_exact(&mut r, &mut flag, path)?;
        let trainable = flag[0] != 0;
        let mut ndim = [0u8; 1];
        read_exact(&mut r, &mut ndim, path)?;
        let mut shape = Vec::with_capacity(ndim[0] as usize);
        for _ in 0..ndim[0] {
            shape.push(read_u64(&mut r, path)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut buf = [0u8; 8];
        for _ in 0..numel {
            read_exact(&mut r, &mut buf, path)?;
            data.push(f64::from_le_bytes(buf));
        }
        let tensor = Tensor::new(shape, data)
            .map_err(|e| bad(&format!("parameter {name}: {e}")))?;
        store.insert(&name, tensor, trainable);
    }
    Ok((config, store))
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], path: &Path) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| MoweError::format(path, "truncated checkpoint"))
}

fn read_u16(r: &mut impl Read, path: &Path) -> Result<u16> {
    let mut b = [0u8; 2];
    read_exact(r, &mut b, path)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32(r: &mut impl Read, path: &Path) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, path)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read, path: &Path) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b, path)?;
    Ok(u64::from_le_bytes(b))
}
