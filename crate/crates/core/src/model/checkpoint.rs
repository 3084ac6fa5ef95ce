//! Weights checkpoint (`.edkd`) reader and writer.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "EDKD"            magic, 4 bytes
//! u16               format version (1)
//! u32 × 7           layers, embed_dim, heads, mlp_dim, patch_size, image_size, num_classes
//! u8                cls_token (must be 1)
//! u32               tensor count
//! per tensor, in declaration order:
//!   u32 name length, UTF-8 name, u32 rank, rank × u32 dims,
//!   product(dims) × f32 values, row-major
//! ```

use std::path::Path;

use ndarray::ArrayD;

use super::{ModelConfig, ModelWeights};
use crate::binio::{read_file, write_file_atomic, Reader};
use crate::error::{Error, Result};
use crate::real::Real;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"EDKD";
pub const CHECKPOINT_VERSION: u16 = 1;

fn encode_config(cfg: &ModelConfig, out: &mut Vec<u8>) {
    for v in [
        cfg.layers,
        cfg.embed_dim,
        cfg.heads,
        cfg.mlp_dim,
        cfg.patch_size,
        cfg.image_size,
        cfg.num_classes,
    ] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.push(cfg.cls_token as u8);
}

/// Serializes weights (values rounded to `f32`).
pub fn encode_checkpoint<T: Real>(weights: &ModelWeights<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + weights.element_count() as usize * 4);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    encode_config(&weights.config, &mut out);
    let tensors = weights.tensors();
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.iter() {
            out.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<ModelWeights<f32>> {
    let mut r = Reader::new(bytes, path);
    if r.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::format(path, "bad magic, not an EDKD checkpoint"));
    }
    let version = r.u16("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(path, format!("unsupported version {version}")));
    }
    let mut dims = [0usize; 7];
    for d in &mut dims {
        *d = r.u32("config")? as usize;
    }
    let cls = r.u8("config")?;
    let config = ModelConfig {
        layers: dims[0],
        embed_dim: dims[1],
        heads: dims[2],
        mlp_dim: dims[3],
        patch_size: dims[4],
        image_size: dims[5],
        num_classes: dims[6],
        cls_token: cls == 1,
    };
    config
        .validate()
        .map_err(|e| Error::format(path, format!("invalid stored config: {e}")))?;

    let mut weights = ModelWeights::<f32>::zeros(&config);
    let count = r.u32("tensor count")? as usize;
    let mut slots = weights.tensors_mut();
    if count != slots.len() {
        return Err(Error::format(
            path,
            format!("{count} tensors stored, configuration implies {}", slots.len()),
        ));
    }
    for (expected_name, slot) in slots.iter_mut() {
        let len = r.u32("tensor name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "tensor name")?)
            .map_err(|_| Error::format(path, "tensor name is not UTF-8"))?;
        if name != expected_name {
            return Err(Error::format(
                path,
                format!("expected tensor {expected_name}, found {name}"),
            ));
        }
        let rank = r.u32("tensor rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("tensor dims")? as usize);
        }
        if shape != slot.shape() {
            return Err(Error::format(
                path,
                format!("tensor {name} has shape {shape:?}, expected {:?}", slot.shape()),
            ));
        }
        let values = r.f32s(slot.len(), name)?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::format(path, format!("tensor {name} has non-finite values")));
        }
        let arr = ArrayD::from_shape_vec(shape, values).expect("length checked");
        slot.assign(&arr);
    }
    drop(slots);
    r.finish()?;
    Ok(weights)
}

pub fn save_checkpoint<T: Real>(weights: &ModelWeights<T>, path: impl AsRef<Path>) -> Result<()> {
    write_file_atomic(path.as_ref(), &encode_checkpoint(weights))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelWeights<f32>> {
    let path = path.as_ref();
    decode_checkpoint(&read_file(path)?, path)
}
