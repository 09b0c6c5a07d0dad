//! Binary sample files and the directory manifest.
//!
//! Sample file layout (all integers little-endian):
//!
//! ```text
//! "MAGC"                  4 bytes
//! version                 u16
//! classes (K)             u16
//! height (H)              u32
//! width (W)               u32
//! modality count (n)      u8
//! n x { len u8, name }    modality names in registry order
//! n x 3*H*W f32           planar images, registry order
//! H*W i32                 label plane
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use super::{CorruptionSpec, Image, LabelMap, ModalitySample, SampleMeta, CHANNELS};
use crate::binio::Reader;
use crate::error::{MagicError, Result};
use crate::modality::Modality;

pub const SAMPLE_MAGIC: &[u8; 4] = b"MAGC";
pub const FORMAT_VERSION: u16 = 1;
pub const MANIFEST_NAME: &str = "manifest.txt";

/// Byte length of the fixed header plus the name table.
pub fn header_len<'a>(names: impl IntoIterator<Item = &'a str>) -> usize {
    4 + 2 + 2 + 4 + 4 + 1 + names.into_iter().map(|n| 1 + n.len()).sum::<usize>()
}

pub fn encode_sample(sample: &ModalitySample) -> Vec<u8> {
    let (h, w) = (sample.height(), sample.width());
    let names: Vec<&str> = sample.images().map(|(m, _)| m.name()).collect();
    let n = names.len();
    let mut buf = Vec::with_capacity(
        header_len(names.iter().copied()) + n * CHANNELS * h * w * 4 + h * w * 4,
    );
    buf.extend_from_slice(SAMPLE_MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(sample.classes() as u16).to_le_bytes());
    buf.extend_from_slice(&(h as u32).to_le_bytes());
    buf.extend_from_slice(&(w as u32).to_le_bytes());
    buf.push(n as u8);
    for name in &names {
        buf.push(name.len() as u8);
        buf.extend_from_slice(name.as_bytes());
    }
    for (_, img) in sample.images() {
        for v in &img.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    for &l in &sample.label().data {
        buf.extend_from_slice(&(l as i32).to_le_bytes());
    }
    buf
}

pub fn decode_sample(bytes: &[u8], path: &Path) -> Result<ModalitySample> {
    let mut r = Reader::new(bytes, path);
    if r.take(4)? != SAMPLE_MAGIC {
        return Err(MagicError::format(path, "bad magic bytes"));
    }
    let version = r.u16()?;
    if version != FORMAT_VERSION {
        return Err(MagicError::format(
            path,
            format!("unsupported version {version}, expected {FORMAT_VERSION}"),
        ));
    }
    let classes = r.u16()?;
    let h = r.u32()? as usize;
    let w = r.u32()? as usize;
    let n = r.u8()? as usize;
    let mut mods = Vec::with_capacity(n);
    for _ in 0..n {
        let len = r.u8()? as usize;
        let raw = r.take(len)?;
        let name = std::str::from_utf8(raw)
            .map_err(|_| MagicError::format(path, "modality name is not utf-8"))?;
        let m = Modality::from_name(name)
            .ok_or_else(|| MagicError::format(path, format!("unknown modality '{name}'")))?;
        if mods.last().is_some_and(|prev| *prev >= m) {
            return Err(MagicError::format(path, "modalities not in registry order"));
        }
        mods.push(m);
    }
    let plane = h * w;
    let body = n * CHANNELS * plane * 4 + plane * 4;
    if bytes.len() != r.pos + body {
        return Err(MagicError::format(
            path,
            format!("expected {} bytes, found {}", r.pos + body, bytes.len()),
        ));
    }
    let mut images = BTreeMap::new();
    for m in mods {
        let raw = r.take(CHANNELS * plane * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        images.insert(m, Image { h, w, data });
    }
    let raw = r.take(plane * 4)?;
    let mut labels = Vec::with_capacity(plane);
    for c in raw.chunks_exact(4) {
        let v = i32::from_le_bytes(c.try_into().unwrap());
        if v < 0 || v >= classes as i32 {
            return Err(MagicError::format(path, format!("label {v} out of range")));
        }
        labels.push(v as u16);
    }
    let label = LabelMap { h, w, data: labels };
    ModalitySample::new(classes, images, label, SampleMeta::default())
        .map_err(|e| MagicError::format(path, e.to_string()))
}

pub fn save_sample(sample: &ModalitySample, path: &Path) -> Result<()> {
    fs::write(path, encode_sample(sample)).map_err(|e| MagicError::io(path, e))
}

pub fn load_sample(path: &Path) -> Result<ModalitySample> {
    let bytes = fs::read(path).map_err(|e| MagicError::io(path, e))?;
    decode_sample(&bytes, path)
}

fn sample_file_name(i: usize) -> String {
    format!("sample_{i:05}.magc")
}

/// One row of the manifest: file name plus the metadata the binary format
/// does not carry.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub file: String,
    pub meta: SampleMeta,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Manifest {
    pub config_hash: Option<String>,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn to_text(&self) -> String {
        let mut out = String::from("# magic sample manifest v1\n");
        out.push_str(&format!(
            "config_sha256 = {}\n",
            self.config_hash.as_deref().unwrap_or("-")
        ));
        out.push_str("file,seed,corruption_target,corruption_kind,severity,corruption_seed\n");
        for e in &self.entries {
            match &e.meta.corruption {
                Some(c) => out.push_str(&format!(
                    "{},{},{},{},{},{}\n",
                    e.file, e.meta.seed, c.target, c.kind, c.severity, c.seed
                )),
                None => out.push_str(&format!("{},{},-,-,-,-\n", e.file, e.meta.seed)),
            }
        }
        out
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let bad = |msg: String| MagicError::format(path, msg);
        let mut manifest = Manifest::default();
        let mut lines = text
            .lines()
            .filter(|l| !l.trim().is_empty() && !l.starts_with('#'));
        let hash_line = lines
            .next()
            .ok_or_else(|| bad("missing config hash line".into()))?;
        let hash = hash_line
            .split_once('=')
            .filter(|(k, _)| k.trim() == "config_sha256")
            .map(|(_, v)| v.trim().to_string())
            .ok_or_else(|| bad("missing config_sha256".into()))?;
        manifest.config_hash = (hash != "-").then_some(hash);
        let header = lines
            .next()
            .ok_or_else(|| bad("missing column header".into()))?;
        if !header.starts_with("file,") {
            return Err(bad("bad column header".into()));
        }
        for line in lines {
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 6 {
                return Err(bad(format!("bad manifest row '{line}'")));
            }
            let seed = cols[1]
                .parse()
                .map_err(|_| bad(format!("bad seed in '{line}'")))?;
            let corruption = if cols[2] == "-" {
                None
            } else {
                Some(CorruptionSpec {
                    target: Modality::from_name(cols[2])
                        .ok_or_else(|| bad(format!("bad modality in '{line}'")))?,
                    kind: cols[3]
                        .parse()
                        .map_err(|_| bad(format!("bad kind in '{line}'")))?,
                    severity: cols[4]
                        .parse()
                        .map_err(|_| bad(format!("bad severity in '{line}'")))?,
                    seed: cols[5]
                        .parse()
                        .map_err(|_| bad(format!("bad seed in '{line}'")))?,
                })
            };
            manifest.entries.push(ManifestEntry {
                file: cols[0].to_string(),
                meta: SampleMeta { seed, corruption },
            });
        }
        Ok(manifest)
    }
}

pub fn write_manifest(dir: &Path, manifest: &Manifest) -> Result<PathBuf> {
    let path = dir.join(MANIFEST_NAME);
    fs::write(&path, manifest.to_text()).map_err(|e| MagicError::io(&path, e))?;
    Ok(path)
}

pub fn read_manifest(dir: &Path) -> Result<Option<Manifest>> {
    let path = dir.join(MANIFEST_NAME);
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path).map_err(|e| MagicError::io(&path, e))?;
    Manifest::parse(&text, &path).map(Some)
}

/// Write one file per sample plus a manifest; returns the manifest.
pub fn save_samples(
    samples: &[ModalitySample],
    dir: &Path,
    config_hash: Option<String>,
) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| MagicError::io(dir, e))?;
    let mut manifest = Manifest {
        config_hash,
        entries: Vec::with_capacity(samples.len()),
    };
    for (i, s) in samples.iter().enumerate() {
        let file = sample_file_name(i);
        save_sample(s, &dir.join(&file))?;
        manifest.entries.push(ManifestEntry { file, meta: s.meta });
    }
    write_manifest(dir, &manifest)?;
    Ok(manifest)
}

/// Load every sample of a directory. With a manifest, files and metadata come
/// from it in manifest order; without one, all `*.magc` files are read in
/// name order.
pub fn load_samples(dir: &Path) -> Result<Vec<ModalitySample>> {
    match read_manifest(dir)? {
        Some(manifest) => manifest
            .entries
            .iter()
            .map(|e| {
                let mut s = load_sample(&dir.join(&e.file))?;
                s.meta = e.meta;
                Ok(s)
            })
            .collect(),
        None => {
            let mut files: Vec<PathBuf> = fs::read_dir(dir)
                .map_err(|e| MagicError::io(dir, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "magc"))
                .collect();
            files.sort();
            files.iter().map(|p| load_sample(p)).collect()
        }
    }
}
