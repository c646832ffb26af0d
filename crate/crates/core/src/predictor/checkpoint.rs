//! Checkpoint container.
//!
//! Layout: the 8-byte magic `DICKPT\0\0`, a little-endian `u32` header
//! length, a JSON header, then for every tensor a `u32` name length, the
//! name, a `u32` rank, `u64` dims and the values as little-endian `f64` bits.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::network::{NetConfig, TrainableParams};
use crate::error::{Error, Result};
use crate::tokens::Layout;

pub const CHECKPOINT_VERSION: u32 = 1;

const MAGIC: &[u8; 8] = b"DICKPT\0\0";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    version: u32,
    layout: Layout,
    seq_len: usize,
    num_classes: usize,
    net: NetConfig,
    tensors: usize,
}

pub fn save_checkpoint(params: &TrainableParams, path: impl AsRef<Path>) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(params, &mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<TrainableParams> {
    let bytes = fs::read(path)?;
    read_checkpoint(&mut bytes.as_slice())
}

pub fn write_checkpoint<W: Write>(params: &TrainableParams, out: &mut W) -> Result<()> {
    use super::Predictor;
    let header = Header {
        version: CHECKPOINT_VERSION,
        layout: params.layout().clone(),
        seq_len: params.layout().len(),
        num_classes: params.num_classes(),
        net: params.config().clone(),
        tensors: params.tensors().count(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Validation(e.to_string()))?;
    out.write_all(MAGIC)?;
    out.write_all(&(json.len() as u32).to_le_bytes())?;
    out.write_all(&json)?;
    for (name, shape, data) in params.tensors() {
        out.write_all(&(name.len() as u32).to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        out.write_all(&(shape.len() as u32).to_le_bytes())?;
        for &dim in shape {
            out.write_all(&(dim as u64).to_le_bytes())?;
        }
        for v in data {
            out.write_all(&v.to_bits().to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(input: &mut R) -> Result<TrainableParams> {
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Validation("not a checkpoint file".into()));
    }
    let header_len = read_u32(input)? as usize;
    let mut json = vec![0u8; header_len];
    input.read_exact(&mut json)?;
    let header: Header = serde_json::from_slice(&json)
        .map_err(|e| Error::Validation(format!("checkpoint header: {e}")))?;
    if header.version != CHECKPOINT_VERSION {
        return Err(Error::Validation(format!(
            "unsupported checkpoint version {}",
            header.version
        )));
    }
    if header.seq_len != header.layout.len() {
        return Err(Error::Validation(
            "checkpoint header length disagrees with its layout".into(),
        ));
    }
    let mut params = TrainableParams::zeros(header.net, header.layout, header.num_classes)?;
    let expected = params.tensors().count();
    if header.tensors != expected {
        return Err(Error::Validation(format!(
            "checkpoint has {} tensors, expected {expected}",
            header.tensors
        )));
    }
    for _ in 0..expected {
        let name_len = read_u32(input)? as usize;
        let mut name = vec![0u8; name_len];
        input.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Validation("tensor name is not UTF-8".into()))?;
        let rank = read_u32(input)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut b = [0u8; 8];
            input.read_exact(&mut b)?;
            shape.push(u64::from_le_bytes(b) as usize);
        }
        let count: usize = shape.iter().product();
        let mut raw = vec![0u8; count * 8];
        input.read_exact(&mut raw)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_bits(u64::from_le_bytes(c.try_into().expect("8-byte chunk"))))
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "tensor `{name}` has non-finite values"
            )));
        }
        params.set_tensor(&name, &shape, &data)?;
    }
    let mut rest = Vec::new();
    input.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(Error::Validation(
            "trailing bytes after the last tensor".into(),
        ));
    }
    Ok(params)
}

fn read_u32<R: Read>(input: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    input.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}
