//! Versioned binary checkpoint: a JSON header with the shape manifest and
//! embedded run configuration, followed by raw little-endian f64 arrays
//! (parameters, Adam moments, EMA shadow).

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Overlay, ParamManifestEntry, ParamStore};

use super::optim::Adam;

const MAGIC: &[u8; 8] = b"ASRCKPT\0";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    /// The full training configuration, as TOML, so decoding needs only
    /// the checkpoint.
    pub config_toml: String,
    /// Vocabulary characters in id order (reserved block implied).
    pub vocab_chars: String,
    pub norm_mean: Option<Vec<f64>>,
    pub norm_std: Option<Vec<f64>>,
    pub step: usize,
    pub seed: u64,
    pub skipped_steps: usize,
    pub adam_t: usize,
    pub has_ema: bool,
    pub params: Vec<ParamManifestEntry>,
}

pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub param_values: Vec<Vec<f64>>,
    pub adam_m: Vec<Option<Vec<f64>>>,
    pub adam_v: Vec<Option<Vec<f64>>>,
    pub ema: Option<Overlay>,
}

fn push_f64s(buf: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

fn read_f64s(bytes: &[u8], offset: &mut usize, n: usize) -> Result<Vec<f64>> {
    let need = n * 8;
    if *offset + need > bytes.len() {
        return Err(Error::invalid("checkpoint: truncated data blob"));
    }
    let out = bytes[*offset..*offset + need]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    *offset += need;
    Ok(out)
}

/// Serializes the full training state.
pub fn save(
    path: &Path,
    store: &ParamStore,
    adam: &Adam,
    ema: Option<&Overlay>,
    mut header: CheckpointHeader,
) -> Result<()> {
    header.version = VERSION;
    header.params = store.manifest();
    header.adam_t = adam.t;
    header.has_ema = ema.is_some();

    let mut blob = Vec::new();
    for (_, e) in store.iter() {
        push_f64s(&mut blob, e.tensor.data());
    }
    for (id, e) in store.iter() {
        if !e.trainable {
            continue;
        }
        let zero = vec![0.0; e.tensor.numel()];
        push_f64s(&mut blob, adam.m[id.0].as_deref().unwrap_or(&zero));
        push_f64s(&mut blob, adam.v[id.0].as_deref().unwrap_or(&zero));
    }
    if let Some(shadow) = ema {
        for (id, e) in store.iter() {
            if e.trainable {
                let s = shadow[id.0]
                    .as_ref()
                    .ok_or_else(|| Error::invalid("checkpoint: EMA missing a trainable entry"))?;
                push_f64s(&mut blob, s);
            }
        }
    }

    let header_json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(16 + header_json.len() + blob.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_json);
    out.extend_from_slice(&blob);
    let mut f = std::fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

/// Reads a checkpoint back into raw arrays; model reconstruction happens
/// in the recognizer.
pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes =
        std::fs::read(path).map_err(|e| Error::data(path.display().to_string(), e.to_string()))?;
    let err = |msg: &str| Error::data(path.display().to_string(), msg);
    if bytes.len() < 20 || &bytes[0..8] != MAGIC {
        return Err(err("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(err(&format!("unsupported checkpoint version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    if 20 + hlen > bytes.len() {
        return Err(err("truncated header"));
    }
    let header: CheckpointHeader = serde_json::from_slice(&bytes[20..20 + hlen])
        .map_err(|e| err(&format!("bad header: {e}")))?;

    let mut offset = 20 + hlen;
    let mut param_values = Vec::with_capacity(header.params.len());
    for p in &header.params {
        let n: usize = p.shape.iter().product();
        param_values.push(read_f64s(&bytes, &mut offset, n)?);
    }
    let mut adam_m = vec![None; header.params.len()];
    let mut adam_v = vec![None; header.params.len()];
    for (i, p) in header.params.iter().enumerate() {
        if !p.trainable {
            continue;
        }
        let n: usize = p.shape.iter().product();
        adam_m[i] = Some(read_f64s(&bytes, &mut offset, n)?);
        adam_v[i] = Some(read_f64s(&bytes, &mut offset, n)?);
    }
    let ema = if header.has_ema {
        let mut shadow: Overlay = vec![None; header.params.len()];
        for (i, p) in header.params.iter().enumerate() {
            if p.trainable {
                let n: usize = p.shape.iter().product();
                shadow[i] = Some(read_f64s(&bytes, &mut offset, n)?);
            }
        }
        Some(shadow)
    } else {
        None
    };
    if offset != bytes.len() {
        return Err(err("trailing bytes after checkpoint data"));
    }
    Ok(Checkpoint {
        header,
        param_values,
        adam_m,
        adam_v,
        ema,
    })
}

/// Architecture agreement check; on mismatch the error carries both shape
/// manifests in full.
pub fn check_manifests(expected: &[ParamManifestEntry], found: &[ParamManifestEntry]) -> Result<()> {
    if expected == found {
        return Ok(());
    }
    let exp = serde_json::to_string_pretty(expected).expect("manifest serializes");
    let got = serde_json::to_string_pretty(found).expect("manifest serializes");
    Err(Error::invalid(format!(
        "checkpoint/config architecture mismatch\n-- expected (from config) --\n{exp}\n-- found (in checkpoint) --\n{got}"
    )))
}
