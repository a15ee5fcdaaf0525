//! Single-file model checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! | bytes | content |
//! |-------|---------|
//! | 8 | magic `BEACKPT\0` |
//! | 4 | format version (`u32`, currently 1) |
//! | 4 | header length `L` (`u32`) |
//! | L | UTF-8 JSON header: `{"model": ModelConfig, "extra": any}` |
//! | 8 | parameter count `P` (`u64`) |
//! | 8·P | parameters as `f64`, in [`Detector::layers`] order, weights then bias |

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{Detector, ModelConfig};
use crate::error::{BeaError, Result};

const MAGIC: &[u8; 8] = b"BEACKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    #[serde(default)]
    extra: serde_json::Value,
}

pub fn write_checkpoint<W: Write>(
    mut w: W,
    model: &Detector,
    extra: &serde_json::Value,
) -> Result<()> {
    let header = serde_json::to_vec(&Header {
        model: model.config.clone(),
        extra: extra.clone(),
    })?;
    let len =
        u32::try_from(header.len()).map_err(|_| BeaError::Checkpoint("header too large".into()))?;
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&len.to_le_bytes())?;
    w.write_all(&header)?;
    let params = model.params();
    w.write_all(&(params.len() as u64).to_le_bytes())?;
    for p in params {
        w.write_all(&p.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<(Detector, serde_json::Value)> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(BeaError::Checkpoint("not a checkpoint file".into()));
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word)?;
    let version = u32::from_le_bytes(word);
    if version != FORMAT_VERSION {
        return Err(BeaError::Checkpoint(format!(
            "unsupported format version {version}"
        )));
    }
    r.read_exact(&mut word)?;
    let mut header = vec![0u8; u32::from_le_bytes(word) as usize];
    r.read_exact(&mut header)?;
    let header: Header = serde_json::from_slice(&header)?;
    // parameters are overwritten below; the seed is irrelevant
    let mut model = Detector::new(header.model, 0)?;
    let mut count = [0u8; 8];
    r.read_exact(&mut count)?;
    let count = u64::from_le_bytes(count) as usize;
    if count != model.num_params() {
        return Err(BeaError::Checkpoint(format!(
            "config implies {} parameters, file holds {count}",
            model.num_params()
        )));
    }
    let mut buf = vec![0u8; 8 * count];
    r.read_exact(&mut buf)?;
    let params: Vec<f64> = buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    model.set_params(&params)?;
    Ok((model, header.extra))
}

pub fn save_checkpoint(path: &Path, model: &Detector, extra: &serde_json::Value) -> Result<()> {
    let f = std::fs::File::create(path)?;
    write_checkpoint(std::io::BufWriter::new(f), model, extra)
}

pub fn load_checkpoint(path: &Path) -> Result<(Detector, serde_json::Value)> {
    read_checkpoint(std::io::BufReader::new(std::fs::File::open(path)?))
}
