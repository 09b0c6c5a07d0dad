//! Weight-shared encoder and the segmentation head.
//!
//! Encoder: three conv blocks (stride 2, 2, 1; channels 3 -> D/2 -> D -> D),
//! each conv -> SiLU -> instance norm. Output is `(D, H/4, W/4)`.
//!
//! Head: two (nearest x2 upsample -> 3x3 conv -> SiLU) blocks followed by a
//! 1x1 projection to K logits.

use rand::Rng;

use crate::data::{ModalitySample, CHANNELS};
use crate::error::{MagicError, Result};
use crate::modality::{Modality, ModalitySet};
use crate::nn::{
    silu, silu_backward, upsample2x, upsample2x_backward, Conv2d, InstanceNorm, NormCache,
};
use crate::tensor::{Map, Param};

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderBlock {
    pub conv: Conv2d,
    pub norm: InstanceNorm,
}

pub struct BlockCache {
    input: Map,
    pre: Map,
    norm: NormCache,
}

impl EncoderBlock {
    fn forward(&self, x: &Map) -> (Map, BlockCache) {
        let pre = self.conv.forward(x);
        let act = silu(&pre);
        let (y, norm) = self.norm.forward(&act);
        (
            y,
            BlockCache {
                input: x.clone(),
                pre,
                norm,
            },
        )
    }

    fn backward(&self, cache: &BlockCache, gy: &Map, grads: &mut EncoderBlock) -> Map {
        let g_act = self.norm.backward(&cache.norm, gy, &mut grads.norm);
        let g_pre = silu_backward(&cache.pre, &g_act);
        self.conv.backward(&cache.input, &g_pre, &mut grads.conv)
    }
}

/// One parameter set shared by every modality.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub blocks: Vec<EncoderBlock>,
}

pub struct EncoderCache {
    blocks: Vec<BlockCache>,
}

impl Encoder {
    pub fn new<R: Rng>(dim: usize, rng: &mut R) -> Self {
        let half = (dim / 2).max(1);
        let plan = [(CHANNELS, half, 2usize), (half, dim, 2), (dim, dim, 1)];
        let blocks = plan
            .iter()
            .map(|&(cin, cout, stride)| EncoderBlock {
                conv: Conv2d::new(cin, cout, 3, stride, rng),
                norm: InstanceNorm::new(cout),
            })
            .collect();
        Encoder { blocks }
    }

    pub fn dim(&self) -> usize {
        self.blocks.last().map(|b| b.conv.cout).unwrap_or(0)
    }

    pub fn zeros_like(&self) -> Self {
        Encoder {
            blocks: self
                .blocks
                .iter()
                .map(|b| EncoderBlock {
                    conv: b.conv.zeros_like(),
                    norm: b.norm.zeros_like(),
                })
                .collect(),
        }
    }

    pub fn forward(&self, image: &Map) -> (Map, EncoderCache) {
        let mut x = image.clone();
        let mut caches = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (y, c) = b.forward(&x);
            caches.push(c);
            x = y;
        }
        (x, EncoderCache { blocks: caches })
    }

    /// Accumulates parameter gradients; the image gradient is not needed.
    pub fn backward(&self, cache: &EncoderCache, gy: &Map, grads: &mut Encoder) {
        let mut g = gy.clone();
        for (i, b) in self.blocks.iter().enumerate().rev() {
            g = b.backward(&cache.blocks[i], &g, &mut grads.blocks[i]);
        }
    }

    pub fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.conv.params(&format!("{prefix}/block{i}/conv"), out);
            b.norm.params(&format!("{prefix}/block{i}/norm"), out);
        }
    }

    pub fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.conv.params_mut(&format!("{prefix}/block{i}/conv"), out);
            b.norm.params_mut(&format!("{prefix}/block{i}/norm"), out);
        }
    }
}

/// Per-modality features in registry order.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    features: Vec<(Modality, Map)>,
}

impl FeatureSet {
    pub fn new(mut features: Vec<(Modality, Map)>) -> Result<Self> {
        features.sort_by_key(|(m, _)| *m);
        if features.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(MagicError::arg("duplicate modality in feature set"));
        }
        if let Some((_, first)) = features.first() {
            if features.iter().any(|(_, f)| !f.same_shape(first)) {
                return Err(MagicError::arg("feature tensors must share (D, h, w)"));
            }
        }
        Ok(FeatureSet { features })
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn modalities(&self) -> ModalitySet {
        self.features.iter().map(|(m, _)| *m).collect()
    }

    pub fn get(&self, m: Modality) -> Option<&Map> {
        self.features.iter().find(|(k, _)| *k == m).map(|(_, f)| f)
    }

    pub fn iter(&self) -> impl Iterator<Item = (Modality, &Map)> {
        self.features.iter().map(|(m, f)| (*m, f))
    }
}

fn check_input(sample: &ModalitySample) -> Result<()> {
    let (h, w) = (sample.height(), sample.width());
    if h % 4 != 0 || w % 4 != 0 || h == 0 || w == 0 {
        return Err(MagicError::arg(format!(
            "input size {h}x{w} must be a positive multiple of 4"
        )));
    }
    Ok(())
}

pub(crate) fn encode_with_cache(
    encoder: &Encoder,
    sample: &ModalitySample,
    subset: ModalitySet,
) -> Result<(FeatureSet, Vec<EncoderCache>)> {
    if subset.is_empty() {
        return Err(MagicError::arg("cannot encode an empty modality subset"));
    }
    check_input(sample)?;
    let mut feats = Vec::with_capacity(subset.len());
    let mut caches = Vec::with_capacity(subset.len());
    for m in subset.iter() {
        let img = sample
            .image(m)
            .ok_or_else(|| MagicError::arg(format!("modality {m} absent from input")))?;
        let (f, c) = encoder.forward(&img.to_map());
        feats.push((m, f));
        caches.push(c);
    }
    Ok((FeatureSet { features: feats }, caches))
}

/// Run the shared encoder on every modality of `subset`.
pub fn encode(
    encoder: &Encoder,
    sample: &ModalitySample,
    subset: ModalitySet,
) -> Result<FeatureSet> {
    encode_with_cache(encoder, sample, subset).map(|(f, _)| f)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegHead {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub proj: Conv2d,
}

pub struct SegHeadCache {
    up1: Map,
    pre1: Map,
    up2: Map,
    pre2: Map,
    act2: Map,
}

impl SegHead {
    pub fn new<R: Rng>(dim: usize, classes: usize, rng: &mut R) -> Self {
        SegHead {
            conv1: Conv2d::new(dim, dim, 3, 1, rng),
            conv2: Conv2d::new(dim, dim, 3, 1, rng),
            proj: Conv2d::new(dim, classes, 1, 1, rng),
        }
    }

    pub fn classes(&self) -> usize {
        self.proj.cout
    }

    pub fn zeros_like(&self) -> Self {
        SegHead {
            conv1: self.conv1.zeros_like(),
            conv2: self.conv2.zeros_like(),
            proj: self.proj.zeros_like(),
        }
    }

    pub(crate) fn forward_cached(&self, f: &Map) -> (Map, SegHeadCache) {
        let up1 = upsample2x(f);
        let pre1 = self.conv1.forward(&up1);
        let act1 = silu(&pre1);
        let up2 = upsample2x(&act1);
        let pre2 = self.conv2.forward(&up2);
        let act2 = silu(&pre2);
        let logits = self.proj.forward(&act2);
        (
            logits,
            SegHeadCache {
                up1,
                pre1,
                up2,
                pre2,
                act2,
            },
        )
    }

    /// Logits `(K, 4h, 4w)` for a `(D, h, w)` feature.
    pub fn forward(&self, f: &Map) -> Result<Map> {
        if f.c != self.conv1.cin {
            return Err(MagicError::arg(format!(
                "seghead expects {} channels, got {}",
                self.conv1.cin, f.c
            )));
        }
        Ok(self.forward_cached(f).0)
    }

    /// Like [`SegHead::forward`], additionally checking the output matches
    /// the image size `(h, w)`.
    pub fn forward_for(&self, f: &Map, image_hw: (usize, usize)) -> Result<Map> {
        if (f.h * 4, f.w * 4) != image_hw {
            return Err(MagicError::arg(format!(
                "feature size {}x{} does not match image size {}x{}",
                f.h, f.w, image_hw.0, image_hw.1
            )));
        }
        self.forward(f)
    }

    /// Accumulates parameter gradients, returns the feature gradient.
    pub(crate) fn backward(
        &self,
        cache: &SegHeadCache,
        g_logits: &Map,
        grads: &mut SegHead,
    ) -> Map {
        let g_act2 = self.proj.backward(&cache.act2, g_logits, &mut grads.proj);
        let g_pre2 = silu_backward(&cache.pre2, &g_act2);
        let g_up2 = self.conv2.backward(&cache.up2, &g_pre2, &mut grads.conv2);
        let g_act1 = upsample2x_backward(&g_up2);
        let g_pre1 = silu_backward(&cache.pre1, &g_act1);
        let g_up1 = self.conv1.backward(&cache.up1, &g_pre1, &mut grads.conv1);
        upsample2x_backward(&g_up1)
    }

    pub fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        self.conv1.params(&format!("{prefix}/conv1"), out);
        self.conv2.params(&format!("{prefix}/conv2"), out);
        self.proj.params(&format!("{prefix}/proj"), out);
    }

    pub fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        self.conv1.params_mut(&format!("{prefix}/conv1"), out);
        self.conv2.params_mut(&format!("{prefix}/conv2"), out);
        self.proj.params_mut(&format!("{prefix}/proj"), out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthesize, SceneConfig};
    use crate::testutil::{max_rel_err, numeric_grad, numeric_grad4, random_map};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn feature_shape_follows_stride_plan() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let enc = Encoder::new(16, &mut rng);
        let s = &synthesize(1, 1, &SceneConfig::default()).unwrap()[0];
        let fs = encode(&enc, s, ModalitySet::all()).unwrap();
        assert_eq!(fs.len(), 4);
        for (_, f) in fs.iter() {
            assert_eq!(f.shape(), (16, 8, 8));
        }
    }

    #[test]
    fn identical_inputs_give_identical_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let enc = Encoder::new(8, &mut rng);
        let s = &synthesize(2, 1, &SceneConfig::default()).unwrap()[0];
        let img = s.image(Modality::Rgb).unwrap().to_map();
        let (a, _) = enc.forward(&img);
        let (b, _) = enc.forward(&img);
        assert_eq!(a, b);
    }

    #[test]
    fn subset_of_one_and_absent_modality() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let enc = Encoder::new(8, &mut rng);
        let s = &synthesize(3, 1, &SceneConfig::default()).unwrap()[0];
        let one = ModalitySet::from_iter([Modality::Depth]);
        assert_eq!(encode(&enc, s, one).unwrap().len(), 1);
        let r = crate::data::restrict(s, one).unwrap();
        assert!(encode(&enc, &r, ModalitySet::all()).is_err());
        assert!(encode(&enc, s, ModalitySet::EMPTY).is_err());
    }

    #[test]
    fn zero_projection_gives_zero_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut head = SegHead::new(4, 3, &mut rng);
        head.proj = head.proj.zeros_like();
        let logits = head.forward(&Map::zeros(4, 2, 3)).unwrap();
        assert_eq!(logits.shape(), (3, 8, 12));
        assert!(logits.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn seghead_shape_mismatch_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let head = SegHead::new(4, 3, &mut rng);
        assert!(head.forward(&Map::zeros(5, 2, 2)).is_err());
        assert!(head.forward_for(&Map::zeros(4, 2, 2), (16, 8)).is_err());
        assert!(head.forward_for(&Map::zeros(4, 2, 2), (8, 8)).is_ok());
    }

    #[test]
    fn seghead_feature_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let head = SegHead::new(4, 3, &mut rng);
        let f = random_map(&mut rng, 4, 3, 3);
        let mean_logit = |x: &[f64]| {
            let fx = Map::from_vec(4, 3, 3, x.to_vec()).unwrap();
            let l = head.forward(&fx).unwrap();
            l.data.iter().sum::<f64>() / l.data.len() as f64
        };
        let (logits, cache) = head.forward_cached(&f);
        let n = logits.data.len() as f64;
        let mut g = logits.zeros_like();
        g.data.iter_mut().for_each(|v| *v = 1.0 / n);
        let analytic = head.backward(&cache, &g, &mut head.zeros_like());
        let numeric = numeric_grad(&f.data, 1e-3, mean_logit);
        assert!(max_rel_err(&analytic.data, &numeric) < 1e-4);
    }

    #[test]
    fn encoder_and_head_parameter_gradients_match_finite_differences() {
        // 16x16 input, so the encoder output is 4x4.
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let enc = Encoder::new(4, &mut rng);
        let head = SegHead::new(4, 3, &mut rng);
        let image = random_map(&mut rng, 3, 16, 16);
        let weights = random_map(&mut rng, 3, 16, 16);
        let loss = |enc: &Encoder, head: &SegHead| {
            let (f, _) = enc.forward(&image);
            let l = head.forward(&f).unwrap();
            l.data
                .iter()
                .zip(&weights.data)
                .map(|(a, b)| a * b)
                .sum::<f64>()
        };
        let (f, ecache) = enc.forward(&image);
        let (_, hcache) = head.forward_cached(&f);
        let mut genc = enc.zeros_like();
        let mut ghead = head.zeros_like();
        let gf = head.backward(&hcache, &weights, &mut ghead);
        enc.backward(&ecache, &gf, &mut genc);

        let mut gparams = Vec::new();
        genc.params("encoder", &mut gparams);
        for (pi, (name, g)) in gparams.iter().enumerate() {
            let x = {
                let mut ps = Vec::new();
                enc.params("encoder", &mut ps);
                ps[pi].1.data.clone()
            };
            let numeric = numeric_grad4(&x, 1e-3, |v| {
                let mut e = enc.clone();
                let mut ps = Vec::new();
                e.params_mut("encoder", &mut ps);
                ps[pi].1.data.copy_from_slice(v);
                drop(ps);
                loss(&e, &head)
            });
            let err = max_rel_err(&g.data, &numeric);
            assert!(err < 1e-4, "{name}: {err}");
        }
        let mut gparams = Vec::new();
        ghead.params("seghead", &mut gparams);
        for (pi, (name, g)) in gparams.iter().enumerate() {
            let x = {
                let mut ps = Vec::new();
                head.params("seghead", &mut ps);
                ps[pi].1.data.clone()
            };
            let numeric = numeric_grad4(&x, 1e-3, |v| {
                let mut h = head.clone();
                let mut ps = Vec::new();
                h.params_mut("seghead", &mut ps);
                ps[pi].1.data.copy_from_slice(v);
                drop(ps);
                loss(&enc, &h)
            });
            let err = max_rel_err(&g.data, &numeric);
            assert!(err < 1e-4, "{name}: {err}");
        }
    }
}
