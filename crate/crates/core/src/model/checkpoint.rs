use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{PlacementStrategy, TransformerConfig};
use super::state::{init_parameters, ModelState};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"NLCKPT01";

#[derive(Serialize, Deserialize)]
struct Header {
    config: TransformerConfig,
    strategy: PlacementStrategy,
    params: usize,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)
        .map_err(|e| bad(format!("truncated checkpoint: {e}")))?;
    Ok(u64::from_le_bytes(b))
}

fn read_bytes(r: &mut impl Read, n: usize) -> Result<Vec<u8>> {
    if n > 1 << 32 {
        return Err(bad(format!("implausible field length {n}")));
    }
    let mut b = vec![0u8; n];
    r.read_exact(&mut b)
        .map_err(|e| bad(format!("truncated checkpoint: {e}")))?;
    Ok(b)
}

/// Writes config, strategy, and every parameter. Values are stored as
/// little-endian f64, which round-trips f32 and f64 exactly.
pub fn write_checkpoint<T: Scalar>(state: &ModelState<T>, w: &mut impl Write) -> Result<()> {
    let header = serde_json::to_vec(&Header {
        config: state.config,
        strategy: state.strategy,
        params: state.params.len(),
    })?;
    let io = |e: std::io::Error| bad(e.to_string());
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&(header.len() as u64).to_le_bytes()).map_err(io)?;
    w.write_all(&header).map_err(io)?;
    for p in &state.params {
        w.write_all(&(p.name.len() as u64).to_le_bytes()).map_err(io)?;
        w.write_all(p.name.as_bytes()).map_err(io)?;
        w.write_all(&(p.value.shape().len() as u64).to_le_bytes()).map_err(io)?;
        for &d in p.value.shape() {
            w.write_all(&(d as u64).to_le_bytes()).map_err(io)?;
        }
        let mut buf = Vec::with_capacity(p.value.len() * 8);
        for v in p.value.data() {
            buf.extend_from_slice(&v.to_f64_lossy().to_le_bytes());
        }
        w.write_all(&buf).map_err(io)?;
    }
    Ok(())
}

pub fn read_checkpoint<T: Scalar>(r: &mut impl Read) -> Result<ModelState<T>> {
    let magic = read_bytes(r, MAGIC.len())?;
    if magic != MAGIC {
        return Err(bad("not a normlab checkpoint (bad magic)"));
    }
    let len = read_u64(r)? as usize;
    let header: Header = serde_json::from_slice(&read_bytes(r, len)?)?;
    header.config.validate()?;
    header.strategy.validate()?;
    let mut state = init_parameters::<T>(&header.config, &header.strategy, 0)?;
    if header.params != state.params.len() {
        return Err(bad(format!(
            "checkpoint has {} parameters, architecture expects {}",
            header.params,
            state.params.len()
        )));
    }
    for p in &mut state.params {
        let n = read_u64(r)? as usize;
        let name = String::from_utf8(read_bytes(r, n)?).map_err(|_| bad("parameter name is not utf-8"))?;
        if name != p.name {
            return Err(bad(format!("expected parameter `{}`, found `{name}`", p.name)));
        }
        let rank = read_u64(r)? as usize;
        let shape = (0..rank)
            .map(|_| read_u64(r).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        if shape != p.value.shape() {
            return Err(bad(format!(
                "`{name}` has shape {shape:?}, expected {:?}",
                p.value.shape()
            )));
        }
        let raw = read_bytes(r, p.value.len() * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| T::from_f64_lossy(f64::from_le_bytes(c.try_into().unwrap())))
            .collect();
        p.value = Tensor::new(shape, data)?;
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest).map_err(|e| bad(e.to_string()))? != 0 {
        return Err(bad("trailing bytes after last parameter"));
    }
    Ok(state)
}

pub fn save_checkpoint<T: Scalar>(state: &ModelState<T>, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    write_checkpoint(state, &mut w)?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<ModelState<T>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&mut std::io::BufReader::new(file))
}
