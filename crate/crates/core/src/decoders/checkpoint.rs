//! Head checkpoints.
//!
//! ```text
//! magic       8 bytes "PPHEAD01"
//! version     u32 LE  (1)
//! config_len  u32 LE
//! config      JSON ModelConfig
//! n_params    u64 LE
//! params      n_params × f64 LE, in PatchModel::flat_params order
//! ```
//!
//! Parameters are stored at full precision, so reloading is bit-exact.

use std::path::Path;

use super::model::{ModelConfig, PatchModel};
use super::DecoderError;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"PPHEAD01";
const VERSION: u32 = 1;

pub fn save_checkpoint(model: &PatchModel) -> Vec<u8> {
    let config = serde_json::to_vec(&model.config).expect("config serializes");
    let params = model.flat_params();
    let mut out = Vec::with_capacity(24 + config.len() + 8 * params.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(&config);
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for p in params {
        out.extend_from_slice(&p.to_le_bytes());
    }
    out
}

pub fn load_checkpoint(bytes: &[u8]) -> Result<PatchModel, DecoderError> {
    let bad = |m: &str| DecoderError::BadCheckpoint(m.to_owned());
    if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(bad("bad magic"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let clen = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let cfg_end = 16usize.checked_add(clen).filter(|&e| e + 8 <= bytes.len()).ok_or_else(|| bad("truncated"))?;
    let config: ModelConfig =
        serde_json::from_slice(&bytes[16..cfg_end]).map_err(|e| bad(&format!("config: {e}")))?;
    let n = u64::from_le_bytes(bytes[cfg_end..cfg_end + 8].try_into().unwrap()) as usize;
    let body = &bytes[cfg_end + 8..];
    if body.len() != n.checked_mul(8).ok_or_else(|| bad("size overflow"))? {
        return Err(bad("parameter block size mismatch"));
    }
    let params: Vec<f64> = body.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
    let mut model = PatchModel::new(config)?;
    model.set_flat_params(&params)?;
    Ok(model)
}

pub fn write_checkpoint(model: &PatchModel, path: &Path) -> Result<(), DecoderError> {
    std::fs::write(path, save_checkpoint(model))?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<PatchModel, DecoderError> {
    load_checkpoint(&std::fs::read(path)?)
}
