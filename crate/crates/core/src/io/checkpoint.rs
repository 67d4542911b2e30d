//! Checkpoint container: magic, format version, a JSON header with the
//! network config and parameter table, then the parameters as f64 LE.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{read_bytes, write_bytes};
use crate::deblur_net::{DeblurNet, NetConfig, ParamEntry};
use crate::error::{LdpError, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"LDPCKPT\0";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub net: NetConfig,
    pub params: Vec<f64>,
    /// Free-form run information (step, objective, seed, ...).
    pub meta: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    net: NetConfig,
    param_count: usize,
    entries: Vec<ParamEntry>,
    #[serde(default)]
    meta: serde_json::Value,
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let net = DeblurNet::new(ckpt.net.clone())?;
    if ckpt.params.len() != net.param_count() {
        return Err(LdpError::shape(format!(
            "checkpoint has {} parameters, config needs {}",
            ckpt.params.len(),
            net.param_count()
        )));
    }
    let header = Header {
        net: ckpt.net.clone(),
        param_count: ckpt.params.len(),
        entries: net.entries().to_vec(),
        meta: ckpt.meta.clone(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| LdpError::Data(format!("checkpoint header: {e}")))?;
    let mut out = Vec::with_capacity(20 + json.len() + 8 * ckpt.params.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for v in &ckpt.params {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Decode and check that the stored parameter table matches the one the
/// config would build today.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let bad = |m: String| LdpError::Data(format!("checkpoint: {m}"));
    if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(bad("not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(bad(format!("format version {version}, expected {FORMAT_VERSION}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let json = bytes.get(20..20 + hlen).ok_or_else(|| bad("truncated header".into()))?;
    let header: Header = serde_json::from_slice(json).map_err(|e| bad(format!("header: {e}")))?;
    let net = DeblurNet::new(header.net.clone())?;
    if header.entries != net.entries() || header.param_count != net.param_count() {
        return Err(bad("parameter table does not match the network config".into()));
    }
    let body = &bytes[20 + hlen..];
    if body.len() != 8 * header.param_count {
        return Err(bad(format!(
            "{} bytes of parameters, expected {}",
            body.len(),
            8 * header.param_count
        )));
    }
    let params: Vec<f64> = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if !params.iter().all(|v| v.is_finite()) {
        return Err(LdpError::Numeric("checkpoint contains non-finite parameters".into()));
    }
    Ok(Checkpoint {
        net: header.net,
        params,
        meta: header.meta,
    })
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    write_bytes(path, &encode_checkpoint(ckpt)?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&read_bytes(path)?)
}
