//! Procedural multi-modal scenes.
//!
//! A scene is a set of filled shapes over a ground plane. Every modality is
//! a different rendering of the same scene: RGB shows class colours, depth
//! a per-class depth band, event the label boundaries, and lidar a sparse
//! scan of depth plus per-class reflectance. The class of a shape also fixes
//! its geometry, so shape outlines carry class information on their own.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use super::{
    CorruptionKind, CorruptionSpec, Image, LabelMap, ModalitySample, SampleMeta, CHANNELS,
};
use crate::config::KvFile;
use crate::error::{MagicError, Result};
use crate::modality::Modality;

#[derive(Clone, Debug, PartialEq)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    pub corruption_prob: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            height: 32,
            width: 32,
            classes: 5,
            min_shapes: 2,
            max_shapes: 5,
            corruption_prob: 0.5,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height < 16 || self.width < 16 {
            return Err(MagicError::config(format!(
                "height and width must be at least 16, got {}x{}",
                self.height, self.width
            )));
        }
        if !self.height.is_multiple_of(4) || !self.width.is_multiple_of(4) {
            return Err(MagicError::config(
                "height and width must be multiples of 4",
            ));
        }
        if self.classes < 2 || self.classes > u16::MAX as usize {
            return Err(MagicError::config("classes must be in [2, 65535]"));
        }
        if self.min_shapes == 0 || self.min_shapes > self.max_shapes {
            return Err(MagicError::config("need 1 <= min_shapes <= max_shapes"));
        }
        if !(0.0..=1.0).contains(&self.corruption_prob) {
            return Err(MagicError::config("corruption_prob must be in [0, 1]"));
        }
        Ok(())
    }

    pub fn from_kv(mut kv: KvFile) -> Result<Self> {
        let d = SceneConfig::default();
        let cfg = SceneConfig {
            height: kv.take_or("height", d.height)?,
            width: kv.take_or("width", d.width)?,
            classes: kv.take_or("classes", d.classes)?,
            min_shapes: kv.take_or("min_shapes", d.min_shapes)?,
            max_shapes: kv.take_or("max_shapes", d.max_shapes)?,
            corruption_prob: kv.take_or("corruption_prob", d.corruption_prob)?,
        };
        kv.finish()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_kv(KvFile::read(path)?)
    }

    /// Canonical text form; also what the manifest hash is computed over.
    pub fn to_kv_string(&self) -> String {
        format!(
            "height = {}\nwidth = {}\nclasses = {}\nmin_shapes = {}\nmax_shapes = {}\ncorruption_prob = {}\n",
            self.height,
            self.width,
            self.classes,
            self.min_shapes,
            self.max_shapes,
            self.corruption_prob
        )
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Seed of the `index`-th sample of a generation run.
pub fn sample_seed(seed: u64, index: u64) -> u64 {
    splitmix64(seed ^ splitmix64(index.wrapping_add(1)))
}

pub fn synthesize(seed: u64, count: usize, config: &SceneConfig) -> Result<Vec<ModalitySample>> {
    config.validate()?;
    if count == 0 {
        return Err(MagicError::config("count must be at least 1"));
    }
    (0..count as u64)
        .into_par_iter()
        .map(|i| synthesize_one(sample_seed(seed, i), config))
        .collect()
}

pub fn synthesize_one(seed: u64, config: &SceneConfig) -> Result<ModalitySample> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut images, label) = render_with(&mut rng, config);

    let mut corruption = None;
    if rng.gen::<f64>() < config.corruption_prob {
        let target = Modality::ALL[rng.gen_range(0..Modality::ALL.len())];
        let kind = CorruptionKind::ALL[rng.gen_range(0..CorruptionKind::ALL.len())];
        let severity = rng.gen_range(0.5f32..=1.0f32);
        let spec = CorruptionSpec {
            target,
            kind,
            severity,
            seed: rng.gen(),
        };
        if let Some(img) = images.get_mut(&target) {
            *img = apply_corruption(img, &spec);
        }
        corruption = Some(spec);
    }
    ModalitySample::new(
        config.classes as u16,
        images,
        label,
        SampleMeta { seed, corruption },
    )
}

/// The clean (uncorrupted) rendering of the scene for `seed`.
pub fn render_scene(
    seed: u64,
    config: &SceneConfig,
) -> Result<(BTreeMap<Modality, Image>, LabelMap)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(render_with(&mut rng, config))
}

#[derive(Clone, Copy)]
struct Shape {
    class: u16,
    cy: f64,
    cx: f64,
    radius: f64,
    depth: f64,
    color: [f64; 3],
}

impl Shape {
    fn covers(&self, y: f64, x: f64) -> bool {
        let dy = y - self.cy;
        let dx = x - self.cx;
        let r = self.radius;
        match (self.class - 1) % 4 {
            0 => dx * dx + dy * dy <= r * r,
            1 => dx.abs() <= 0.85 * r && dy.abs() <= 0.85 * r,
            2 => dy >= -r && dy <= r && dx.abs() <= 0.5 * (dy + r),
            _ => dx.abs() + dy.abs() <= r,
        }
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let i = h6.floor() as i32;
    let f = h6 - i as f64;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn render_with(rng: &mut ChaCha8Rng, cfg: &SceneConfig) -> (BTreeMap<Modality, Image>, LabelMap) {
    let (h, w, k) = (cfg.height, cfg.width, cfg.classes);
    let fg = (k - 1) as f64;

    let n_shapes = rng.gen_range(cfg.min_shapes..=cfg.max_shapes);
    let mut shapes: Vec<Shape> = (0..n_shapes)
        .map(|_| {
            let class = rng.gen_range(1..k) as u16;
            let c = (class - 1) as f64;
            let band = if k > 2 { c / (k - 2) as f64 } else { 0.5 };
            let base = hsv_to_rgb(c / fg, 0.8, 0.9);
            Shape {
                class,
                cy: rng.gen_range(0.0..h as f64),
                cx: rng.gen_range(0.0..w as f64),
                radius: rng.gen_range(h as f64 / 8.0..=h as f64 / 4.0),
                depth: 0.1 + 0.5 * band + rng.gen_range(-0.04..0.04),
                color: base.map(|v| (v + rng.gen_range(-0.04..0.04)).clamp(0.0, 1.0)),
            }
        })
        .collect();
    // far first, so nearer shapes overwrite
    shapes.sort_by(|a, b| b.depth.total_cmp(&a.depth));

    let bg_color: [f64; 3] = {
        let g = rng.gen_range(0.35..0.55);
        [0, 1, 2].map(|_| g + rng.gen_range(-0.05..0.05))
    };

    let mut label = vec![0u16; h * w];
    let mut depth = vec![0.0f64; h * w];
    let mut color = vec![[0.0f64; 3]; h * w];
    let mut reflect = vec![0.1f64; h * w];
    for y in 0..h {
        let ground = 0.75 + 0.25 * (1.0 - y as f64 / (h - 1) as f64);
        for x in 0..w {
            let i = y * w + x;
            depth[i] = ground;
            let shade = 0.9 + 0.1 * (y as f64 / h as f64);
            color[i] = bg_color.map(|v| v * shade);
        }
    }
    for s in &shapes {
        for y in 0..h {
            for x in 0..w {
                if s.covers(y as f64 + 0.5, x as f64 + 0.5) {
                    let i = y * w + x;
                    label[i] = s.class;
                    depth[i] = s.depth;
                    color[i] = s.color;
                    reflect[i] = 0.2 + 0.7 * s.class as f64 / fg;
                }
            }
        }
    }

    let plane = h * w;
    let mut rgb = Image::zeros(h, w);
    let mut dep = Image::zeros(h, w);
    let mut event = Image::zeros(h, w);
    let mut lidar = Image::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            for c in 0..CHANNELS {
                let n: f64 = rng.sample(StandardNormal);
                rgb.data[c * plane + i] = (color[i][c] + 0.03 * n).clamp(0.0, 1.0) as f32;
            }
            let n: f64 = rng.sample(StandardNormal);
            let d = (depth[i] + 0.01 * n).clamp(0.0, 1.0) as f32;
            for c in 0..CHANNELS {
                dep.data[c * plane + i] = d;
            }

            let l = label[i];
            let boundary = (y > 0 && label[i - w] != l)
                || (y + 1 < h && label[i + w] != l)
                || (x > 0 && label[i - 1] != l)
                || (x + 1 < w && label[i + 1] != l);
            if boundary {
                event.data[i] = 1.0;
                event.data[plane + i] = (l as f64 / fg) as f32;
                event.data[2 * plane + i] = depth[i] as f32;
            }

            let keep = rng.gen::<f64>() < 0.6;
            if y % 2 == 0 && keep {
                lidar.data[i] = depth[i] as f32;
                lidar.data[plane + i] = 1.0;
                lidar.data[2 * plane + i] = reflect[i] as f32;
            }
        }
    }

    let mut images = BTreeMap::new();
    images.insert(Modality::Rgb, rgb);
    images.insert(Modality::Depth, dep);
    images.insert(Modality::Event, event);
    images.insert(Modality::Lidar, lidar);
    (images, LabelMap { h, w, data: label })
}

/// Degrade one image. Severity 0 returns the input unchanged.
pub fn apply_corruption(img: &Image, spec: &CorruptionSpec) -> Image {
    let s = spec.severity.clamp(0.0, 1.0) as f64;
    if s == 0.0 {
        return img.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (h, w) = (img.h, img.w);
    let mut out = img.clone();
    match spec.kind {
        CorruptionKind::GaussianNoise => {
            for v in out.data.iter_mut() {
                let n: f64 = rng.sample(StandardNormal);
                *v = (*v as f64 + 0.5 * s * n).clamp(0.0, 1.0) as f32;
            }
        }
        CorruptionKind::Blackout => {
            let rows = ((s * h as f64).ceil() as usize).min(h);
            let start = rng.gen_range(0..=h - rows);
            for c in 0..CHANNELS {
                for y in start..start + rows {
                    for x in 0..w {
                        let i = out.idx(c, y, x);
                        out.data[i] = 0.0;
                    }
                }
            }
        }
        CorruptionKind::BlurProxy => {
            let r = 2isize;
            for c in 0..CHANNELS {
                for y in 0..h {
                    for x in 0..w {
                        let (mut sum, mut n) = (0.0f64, 0.0f64);
                        for dy in -r..=r {
                            for dx in -r..=r {
                                let (yy, xx) = (y as isize + dy, x as isize + dx);
                                if yy >= 0 && yy < h as isize && xx >= 0 && xx < w as isize {
                                    sum += img.data[img.idx(c, yy as usize, xx as usize)] as f64;
                                    n += 1.0;
                                }
                            }
                        }
                        let i = img.idx(c, y, x);
                        out.data[i] = ((1.0 - s) * img.data[i] as f64 + s * sum / n) as f32;
                    }
                }
            }
        }
        CorruptionKind::DownsampleProxy => {
            let b = 4usize;
            for c in 0..CHANNELS {
                for by in (0..h).step_by(b) {
                    for bx in (0..w).step_by(b) {
                        let (y1, x1) = ((by + b).min(h), (bx + b).min(w));
                        let mut sum = 0.0f64;
                        for y in by..y1 {
                            for x in bx..x1 {
                                sum += img.data[img.idx(c, y, x)] as f64;
                            }
                        }
                        let mean = sum / ((y1 - by) * (x1 - bx)) as f64;
                        for y in by..y1 {
                            for x in bx..x1 {
                                let i = img.idx(c, y, x);
                                out.data[i] = ((1.0 - s) * img.data[i] as f64 + s * mean) as f32;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}
