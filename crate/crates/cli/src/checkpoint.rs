//! Checkpoint container: an 8-byte magic, a little-endian `u64` header
//! length, a JSON header, then every parameter as little-endian `f64`s in
//! header order.

use std::fs;
use std::io::Write;
use std::path::Path;

use crossfuse_core::training::NamedArray;
use crossfuse_core::{Checkpoint, NetworkConfig, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::{CliError, CliResult};

pub const MAGIC: &[u8; 8] = b"XFUSECKP";

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    version: u32,
    network: NetworkConfig,
    train: TrainConfig,
    step: u64,
    params: Vec<ArrayHeader>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ArrayHeader {
    name: String,
    shape: Vec<usize>,
}

fn corrupt(path: &Path, what: &str) -> CliError {
    CliError::data(anyhow::anyhow!("{}: corrupt checkpoint ({what})", path.display()))
}

pub fn encode(ckpt: &Checkpoint) -> CliResult<Vec<u8>> {
    let header = Header {
        version: ckpt.version,
        network: ckpt.network.clone(),
        train: ckpt.train.clone(),
        step: ckpt.step,
        params: ckpt
            .params
            .iter()
            .map(|p| ArrayHeader {
                name: p.name.clone(),
                shape: p.shape.clone(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let n: usize = ckpt.params.iter().map(|p| p.data.len()).sum();
    let mut out = Vec::with_capacity(16 + json.len() + 8 * n);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for p in &ckpt.params {
        for v in &p.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8], path: &Path) -> CliResult<Checkpoint> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(corrupt(path, "bad magic"));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let json = bytes.get(16..16 + len).ok_or_else(|| corrupt(path, "truncated header"))?;
    let header: Header = serde_json::from_slice(json).map_err(|e| corrupt(path, &e.to_string()))?;
    let mut body = bytes[16 + len..].chunks_exact(8);
    let mut params = Vec::with_capacity(header.params.len());
    for a in header.params {
        let count: usize = a.shape.iter().product();
        let data: Vec<f64> = body
            .by_ref()
            .take(count)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if data.len() != count {
            return Err(corrupt(path, "truncated parameter data"));
        }
        params.push(NamedArray {
            name: a.name,
            shape: a.shape,
            data,
        });
    }
    if body.next().is_some() || !body.remainder().is_empty() {
        return Err(corrupt(path, "trailing bytes"));
    }
    Ok(Checkpoint {
        version: header.version,
        network: header.network,
        train: header.train,
        step: header.step,
        params,
    })
}

pub fn save(path: &Path, ckpt: &Checkpoint) -> CliResult<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let mut f = fs::File::create(path).map_err(|e| CliError::data(anyhow::anyhow!("cannot create {}: {e}", path.display())))?;
    f.write_all(&encode(ckpt)?)?;
    Ok(())
}

pub fn load(path: &Path) -> CliResult<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| CliError::data(anyhow::anyhow!("cannot read checkpoint {}: {e}", path.display())))?;
    decode(&bytes, path)
}
