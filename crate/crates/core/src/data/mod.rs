//! Multi-modal scene samples: the in-memory types, the procedural generator
//! and the on-disk format.

mod format;
mod synth;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{MagicError, Result};
use crate::modality::{Modality, ModalitySet};
use crate::tensor::Map;

pub use format::{
    decode_sample, encode_sample, header_len, load_sample, load_samples, read_manifest,
    save_sample, save_samples, write_manifest, Manifest, ManifestEntry, FORMAT_VERSION,
    SAMPLE_MAGIC,
};
pub use synth::{apply_corruption, render_scene, synthesize, synthesize_one, SceneConfig};

/// Every modality is stored with this many channels.
pub const CHANNELS: usize = 3;

/// A 3-channel planar image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn zeros(h: usize, w: usize) -> Self {
        Image {
            h,
            w,
            data: vec![0.0; CHANNELS * h * w],
        }
    }

    pub fn to_map(&self) -> Map {
        Map {
            c: CHANNELS,
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|&v| v as f64).collect(),
        }
    }

    #[inline]
    pub fn idx(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.h + y) * self.w + x
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub h: usize,
    pub w: usize,
    pub data: Vec<u16>,
}

impl LabelMap {
    #[inline]
    pub fn at(&self, y: usize, x: usize) -> u16 {
        self.data[y * self.w + x]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CorruptionKind {
    GaussianNoise,
    Blackout,
    BlurProxy,
    DownsampleProxy,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 4] = [
        CorruptionKind::GaussianNoise,
        CorruptionKind::Blackout,
        CorruptionKind::BlurProxy,
        CorruptionKind::DownsampleProxy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CorruptionKind::GaussianNoise => "gaussian-noise",
            CorruptionKind::Blackout => "blackout",
            CorruptionKind::BlurProxy => "blur-proxy",
            CorruptionKind::DownsampleProxy => "downsample-proxy",
        }
    }
}

impl fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CorruptionKind {
    type Err = MagicError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|k| k.name() == s)
            .ok_or_else(|| MagicError::arg(format!("unknown corruption kind '{s}'")))
    }
}

/// A degradation applied to one modality of a sample. `seed` drives the
/// randomness of the degradation itself (noise, blackout band position).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CorruptionSpec {
    pub target: Modality,
    pub kind: CorruptionKind,
    pub severity: f32,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct SampleMeta {
    pub seed: u64,
    pub corruption: Option<CorruptionSpec>,
}

/// One scene: per-modality images sharing `(H, W)` plus the label map.
#[derive(Clone, Debug, PartialEq)]
pub struct ModalitySample {
    classes: u16,
    modalities: BTreeMap<Modality, Image>,
    label: LabelMap,
    pub meta: SampleMeta,
}

impl ModalitySample {
    pub fn new(
        classes: u16,
        modalities: BTreeMap<Modality, Image>,
        label: LabelMap,
        meta: SampleMeta,
    ) -> Result<Self> {
        if modalities.is_empty() {
            return Err(MagicError::arg("sample has no modalities"));
        }
        if classes == 0 {
            return Err(MagicError::arg("sample must have at least one class"));
        }
        let (h, w) = (label.h, label.w);
        if label.data.len() != h * w {
            return Err(MagicError::arg("label length does not match its shape"));
        }
        for (m, img) in &modalities {
            if img.h != h || img.w != w || img.data.len() != CHANNELS * h * w {
                return Err(MagicError::arg(format!(
                    "modality {m} has shape ({}, {}) but label is ({h}, {w})",
                    img.h, img.w
                )));
            }
        }
        if let Some(bad) = label.data.iter().find(|&&v| v >= classes) {
            return Err(MagicError::arg(format!(
                "label id {bad} out of range for {classes} classes"
            )));
        }
        Ok(ModalitySample {
            classes,
            modalities,
            label,
            meta,
        })
    }

    pub fn classes(&self) -> usize {
        self.classes as usize
    }

    pub fn height(&self) -> usize {
        self.label.h
    }

    pub fn width(&self) -> usize {
        self.label.w
    }

    pub fn label(&self) -> &LabelMap {
        &self.label
    }

    pub fn modality_set(&self) -> ModalitySet {
        self.modalities.keys().copied().collect()
    }

    pub fn image(&self, m: Modality) -> Option<&Image> {
        self.modalities.get(&m)
    }

    /// Images in registry order.
    pub fn images(&self) -> impl Iterator<Item = (Modality, &Image)> {
        self.modalities.iter().map(|(m, i)| (*m, i))
    }
}

/// Keep only the modalities in `subset`; the label is untouched.
pub fn restrict(sample: &ModalitySample, subset: ModalitySet) -> Result<ModalitySample> {
    if subset.is_empty() {
        return Err(MagicError::arg(
            "cannot restrict to an empty modality subset",
        ));
    }
    if !subset.is_subset_of(sample.modality_set()) {
        return Err(MagicError::arg(format!(
            "subset {subset} is not contained in the sample's modalities {}",
            sample.modality_set()
        )));
    }
    let modalities = sample
        .modalities
        .iter()
        .filter(|(m, _)| subset.contains(**m))
        .map(|(m, i)| (*m, i.clone()))
        .collect();
    Ok(ModalitySample {
        classes: sample.classes,
        modalities,
        label: sample.label.clone(),
        meta: sample.meta,
    })
}
