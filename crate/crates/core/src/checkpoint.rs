//! Model checkpoints, optionally carrying optimizer state for resuming.
//!
//! Layout (little-endian):
//!
//! ```text
//! "MAGP" u16 version u32 D u32 K
//! u8 n, n x { u8 len, name }          training modalities, registry order
//! u8 p, p x u32                       pooling sizes
//! u8 switches                         bit 0 residual, 1 pooling, 2 mlp
//! u32 count, count x tensor
//! [ "MAGS" u64 step u64 epoch u64 seed u32 count, count x tensor ]
//!
//! tensor = u16 len, name, u8 ndim, ndim x u32, prod(dims) x f32
//! ```
//!
//! Optimizer moments are stored as tensors named `m/<param>` and `v/<param>`.

use std::fs;
use std::path::Path;

use crate::binio::Reader;
use crate::error::{MagicError, Result};
use crate::mam::MamSwitches;
use crate::modality::{Modality, ModalitySet};
use crate::model::{MagicModel, ModelConfig};
use crate::tensor::Param;

pub const MODEL_MAGIC: &[u8; 4] = b"MAGP";
pub const STATE_MAGIC: &[u8; 4] = b"MAGS";
pub const CHECKPOINT_VERSION: u16 = 1;

/// Optimizer state saved alongside the model.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingBlock {
    pub step: u64,
    pub epoch: u64,
    pub seed: u64,
    /// First moments, shaped like the model.
    pub m: MagicModel,
    /// Second moments, shaped like the model.
    pub v: MagicModel,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: MagicModel,
    pub training: Option<TrainingBlock>,
}

fn put_tensor(buf: &mut Vec<u8>, name: &str, p: &Param) {
    buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.push(p.shape.len() as u8);
    for d in &p.shape {
        buf.extend_from_slice(&(*d as u32).to_le_bytes());
    }
    for v in &p.data {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
}

fn put_tensors(buf: &mut Vec<u8>, tensors: &[(String, &Param)]) {
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, p) in tensors {
        put_tensor(buf, name, p);
    }
}

fn switch_bits(s: MamSwitches) -> u8 {
    s.use_residual as u8 | (s.use_pooling as u8) << 1 | (s.use_mlp as u8) << 2
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let cfg = &ckpt.model.config;
    let mut buf = Vec::new();
    buf.extend_from_slice(MODEL_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(cfg.feature_dim as u32).to_le_bytes());
    buf.extend_from_slice(&(cfg.classes as u32).to_le_bytes());
    buf.push(cfg.modalities.len() as u8);
    for m in cfg.modalities.iter() {
        buf.push(m.name().len() as u8);
        buf.extend_from_slice(m.name().as_bytes());
    }
    buf.push(cfg.pooling_sizes.len() as u8);
    for s in &cfg.pooling_sizes {
        buf.extend_from_slice(&(*s as u32).to_le_bytes());
    }
    buf.push(switch_bits(cfg.switches));
    put_tensors(&mut buf, &ckpt.model.params());

    if let Some(t) = &ckpt.training {
        buf.extend_from_slice(STATE_MAGIC);
        buf.extend_from_slice(&t.step.to_le_bytes());
        buf.extend_from_slice(&t.epoch.to_le_bytes());
        buf.extend_from_slice(&t.seed.to_le_bytes());
        let mut moments: Vec<(String, &Param)> = Vec::new();
        moments.extend(t.m.params().into_iter().map(|(n, p)| (format!("m/{n}"), p)));
        moments.extend(t.v.params().into_iter().map(|(n, p)| (format!("v/{n}"), p)));
        put_tensors(&mut buf, &moments);
    }
    buf
}

fn read_tensor(r: &mut Reader, path: &Path) -> Result<(String, Param)> {
    let name = r.string_u16()?;
    let ndim = r.u8()? as usize;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(r.u32()? as usize);
    }
    let n: usize = shape.iter().product();
    if n > 1 << 28 {
        return Err(MagicError::format(
            path,
            format!("tensor '{name}' is implausibly large"),
        ));
    }
    let data = r.f32s(n)?.into_iter().map(f64::from).collect();
    Ok((name, Param { shape, data }))
}

/// Overwrite every parameter of `target` from the stream, requiring the same
/// names, order and shapes.
fn fill(
    r: &mut Reader,
    path: &Path,
    target: &mut [(String, &mut Param)],
    prefix: &str,
) -> Result<()> {
    for (name, p) in target.iter_mut() {
        let (got, t) = read_tensor(r, path)?;
        let want = format!("{prefix}{name}");
        if got != want {
            return Err(MagicError::format(
                path,
                format!("expected tensor '{want}', found '{got}'"),
            ));
        }
        if t.shape != p.shape {
            return Err(MagicError::format(
                path,
                format!(
                    "tensor '{got}' has shape {:?}, expected {:?}",
                    t.shape, p.shape
                ),
            ));
        }
        p.data = t.data;
    }
    Ok(())
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let mut r = Reader::new(bytes, path);
    if r.take(4)? != MODEL_MAGIC {
        return Err(MagicError::format(path, "not a model checkpoint"));
    }
    let version = r.u16()?;
    if version != CHECKPOINT_VERSION {
        return Err(MagicError::format(
            path,
            format!("unsupported checkpoint version {version}"),
        ));
    }
    let feature_dim = r.u32()? as usize;
    let classes = r.u32()? as usize;
    let n = r.u8()?;
    let mut modalities = ModalitySet::EMPTY;
    for _ in 0..n {
        let name = r.string_u8()?;
        let m = Modality::from_name(&name)
            .ok_or_else(|| MagicError::format(path, format!("unknown modality '{name}'")))?;
        modalities.insert(m);
    }
    let np = r.u8()?;
    let mut pooling_sizes = Vec::with_capacity(np as usize);
    for _ in 0..np {
        pooling_sizes.push(r.u32()? as usize);
    }
    let bits = r.u8()?;
    let config = ModelConfig {
        feature_dim,
        classes,
        modalities,
        pooling_sizes,
        switches: MamSwitches {
            use_residual: bits & 1 != 0,
            use_pooling: bits & 2 != 0,
            use_mlp: bits & 4 != 0,
        },
    };
    let mut model =
        MagicModel::new(config, 0).map_err(|e| MagicError::format(path, e.to_string()))?;
    let count = r.u32()? as usize;
    {
        let mut params = model.params_mut();
        if count != params.len() {
            return Err(MagicError::format(
                path,
                format!("expected {} tensors, found {count}", params.len()),
            ));
        }
        fill(&mut r, path, &mut params, "")?;
    }

    let training = if r.is_at_end() {
        None
    } else {
        if r.take(4)? != STATE_MAGIC {
            return Err(MagicError::format(
                path,
                "unexpected data after model tensors",
            ));
        }
        let step = r.u64()?;
        let epoch = r.u64()?;
        let seed = r.u64()?;
        let count = r.u32()? as usize;
        let mut m = model.zeros_like();
        let mut v = model.zeros_like();
        let expected = 2 * model.params().len();
        if count != expected {
            return Err(MagicError::format(
                path,
                format!("expected {expected} optimizer tensors, found {count}"),
            ));
        }
        fill(&mut r, path, &mut m.params_mut(), "m/")?;
        fill(&mut r, path, &mut v.params_mut(), "v/")?;
        Some(TrainingBlock {
            step,
            epoch,
            seed,
            m,
            v,
        })
    };
    if !r.is_at_end() {
        return Err(MagicError::format(path, "trailing bytes after checkpoint"));
    }
    Ok(Checkpoint { model, training })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    fs::write(path, encode_checkpoint(ckpt)).map_err(|e| MagicError::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| MagicError::io(path, e))?;
    decode_checkpoint(&bytes, path)
}
