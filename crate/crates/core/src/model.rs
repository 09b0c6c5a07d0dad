//! The full network: shared encoder, semantic and salient aggregators, and
//! the shared segmentation head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{encode, Encoder, SegHead};
use crate::data::ModalitySample;
use crate::error::{MagicError, Result};
use crate::mam::{
    mam_forward, rank_slot_names, validate_pooling_sizes, Mam, MamSwitches, DEFAULT_POOLING_SIZES,
};
use crate::modality::ModalitySet;
use crate::tensor::{Map, Param};

pub const DEFAULT_FEATURE_DIM: usize = 16;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub feature_dim: usize,
    pub classes: usize,
    /// Training modalities. Inference accepts any non-empty subset.
    pub modalities: ModalitySet,
    pub pooling_sizes: Vec<usize>,
    pub switches: MamSwitches,
}

impl ModelConfig {
    pub fn new(classes: usize) -> Self {
        ModelConfig {
            feature_dim: DEFAULT_FEATURE_DIM,
            classes,
            modalities: ModalitySet::all(),
            pooling_sizes: DEFAULT_POOLING_SIZES.to_vec(),
            switches: MamSwitches::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_dim < 2 || !self.feature_dim.is_multiple_of(2) {
            return Err(MagicError::config(format!(
                "feature_dim must be even and at least 2, got {}",
                self.feature_dim
            )));
        }
        if self.classes < 2 {
            return Err(MagicError::config(format!(
                "need at least 2 classes, got {}",
                self.classes
            )));
        }
        if self.modalities.len() < 2 {
            return Err(MagicError::config("need at least 2 training modalities"));
        }
        validate_pooling_sizes(&self.pooling_sizes)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MagicModel {
    pub config: ModelConfig,
    pub encoder: Encoder,
    /// Aggregator over the modalities present, one MLP per modality.
    pub semantic: Mam,
    /// Aggregator over the ranked robust/fragile pair.
    pub salient: Mam,
    pub seghead: SegHead,
}

impl MagicModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.feature_dim;
        let encoder = Encoder::new(d, &mut rng);
        let slots = config
            .modalities
            .iter()
            .map(|m| m.name().to_string())
            .collect();
        let semantic = Mam::new(
            d,
            slots,
            config.pooling_sizes.clone(),
            config.switches,
            &mut rng,
        )?;
        let salient = Mam::new(
            d,
            rank_slot_names(),
            config.pooling_sizes.clone(),
            config.switches,
            &mut rng,
        )?;
        let seghead = SegHead::new(d, config.classes, &mut rng);
        let mut model = MagicModel {
            config,
            encoder,
            semantic,
            salient,
            seghead,
        };
        model.round_to_f32();
        Ok(model)
    }

    pub fn zeros_like(&self) -> Self {
        MagicModel {
            config: self.config.clone(),
            encoder: self.encoder.zeros_like(),
            semantic: self.semantic.zeros_like(),
            salient: self.salient.zeros_like(),
            seghead: self.seghead.zeros_like(),
        }
    }

    /// Named parameters in a fixed order.
    pub fn params(&self) -> Vec<(String, &Param)> {
        let mut out = Vec::new();
        self.encoder.params("encoder", &mut out);
        self.semantic.params("mam/semantic", &mut out);
        self.salient.params("mam/salient", &mut out);
        self.seghead.params("seghead", &mut out);
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Param)> {
        let mut out = Vec::new();
        self.encoder.params_mut("encoder", &mut out);
        self.semantic.params_mut("mam/semantic", &mut out);
        self.salient.params_mut("mam/salient", &mut out);
        self.seghead.params_mut("seghead", &mut out);
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, p)| p.len()).sum()
    }

    pub fn round_to_f32(&mut self) {
        for (_, p) in self.params_mut() {
            p.round_to_f32();
        }
    }

    pub fn is_finite(&self) -> bool {
        self.params()
            .iter()
            .all(|(_, p)| p.data.iter().all(|v| v.is_finite()))
    }

    /// Logits `(K, H, W)` from the modalities in `subset`. Uses only the
    /// encoder, the semantic aggregator and the head.
    pub fn predict(&self, sample: &ModalitySample, subset: ModalitySet) -> Result<Map> {
        if !subset.is_subset_of(self.config.modalities) {
            return Err(MagicError::arg(format!(
                "subset {subset} is not within the training modalities {}",
                self.config.modalities
            )));
        }
        let features = encode(&self.encoder, sample, subset)?;
        let semantic = mam_forward(&features, &self.semantic)?;
        self.seghead
            .forward_for(&semantic.feature, (sample.height(), sample.width()))
    }

    /// Per-pixel argmax of [`MagicModel::predict`].
    pub fn predict_labels(&self, sample: &ModalitySample, subset: ModalitySet) -> Result<Vec<u16>> {
        Ok(self.predict(sample, subset)?.argmax_channels())
    }
}
