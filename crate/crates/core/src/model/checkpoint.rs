//! Binary checkpoint format.
//!
//! ```text
//! "IKNT" | version: u32 | header_len: u64 | header: JSON ModelConfig
//!        | f64 blobs, little-endian, in IkModel::params() order
//!        | running mean, running var per trunk layer
//! ```

use std::io::{Read, Write};
use std::path::Path;

use super::{IkModel, ModelConfig};
use crate::error::{IkError, Result};

pub const MAGIC: &[u8; 4] = b"IKNT";
pub const VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(model: &IkModel, mut w: W) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let header = serde_json::to_vec(&model.config)?;
    w.write_all(&(header.len() as u64).to_le_bytes())?;
    w.write_all(&header)?;
    let mut buf = Vec::new();
    for p in model.params() {
        push_f64s(&mut buf, p.data());
    }
    for layer in &model.trunk {
        push_f64s(&mut buf, &layer.norm.running_mean);
        push_f64s(&mut buf, &layer.norm.running_var);
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<IkModel> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(IkError::Format("not an IKNT checkpoint".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(IkError::Format(format!("unsupported checkpoint version {version}")));
    }
    let len = read_u64(&mut r)? as usize;
    let mut header = vec![0u8; len];
    r.read_exact(&mut header)?;
    let config: ModelConfig = serde_json::from_slice(&header)?;
    let mut model = IkModel::new(config, 0)?;

    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    let expected: usize = model.param_count()
        + model
            .trunk
            .iter()
            .map(|l| 2 * l.norm.dim())
            .sum::<usize>();
    if rest.len() != expected * 8 {
        return Err(IkError::Format(format!(
            "checkpoint body holds {} bytes, expected {}",
            rest.len(),
            expected * 8
        )));
    }
    let mut values = rest
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    for p in model.params_mut() {
        for v in p.data_mut() {
            *v = values.next().expect("length checked");
        }
    }
    for layer in &mut model.trunk {
        for v in layer.norm.running_mean.iter_mut() {
            *v = values.next().expect("length checked");
        }
        for v in layer.norm.running_var.iter_mut() {
            *v = values.next().expect("length checked");
        }
    }
    Ok(model)
}

pub fn save(model: &IkModel, path: impl AsRef<Path>) -> Result<()> {
    let f = std::fs::File::create(path)?;
    write_checkpoint(model, std::io::BufWriter::new(f))
}

pub fn load(path: impl AsRef<Path>) -> Result<IkModel> {
    let f = std::fs::File::open(path)?;
    read_checkpoint(std::io::BufReader::new(f))
}

pub fn to_bytes(model: &IkModel) -> Vec<u8> {
    let mut buf = Vec::new();
    write_checkpoint(model, &mut buf).expect("writing to a Vec cannot fail");
    buf
}

fn push_f64s(buf: &mut Vec<u8>, values: &[f64]) {
    buf.reserve(values.len() * 8);
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}
