//! Multi-modal aggregation.
//!
//! Each branch transforms one feature `f`:
//!
//! ```text
//! u = pre_conv(f)                         3x3, D -> D
//! p = sum_s avg_pool_s(u)                 stride 1, zero padded, s in pooling_sizes
//! g = sigmoid(post_conv(p))               1x1, D -> D, shared by all branches
//! v = g * f + f                           residual
//! z = mlp[slot](v)                        1x1, D -> D, one per slot
//! ```
//!
//! and the module output is the mean of `z` over the branches present. The
//! semantic aggregator has one slot per registry modality; the salient
//! aggregator has two rank slots (robust, fragile).

use rand::Rng;

use crate::backbone::FeatureSet;
use crate::error::{MagicError, Result};
use crate::modality::ModalitySet;
use crate::nn::{avg_pool_same, Conv2d};
use crate::tensor::{sigmoid, Map, Param};

pub const DEFAULT_POOLING_SIZES: [usize; 3] = [3, 7, 11];

/// Ablation switches. Turning one off reduces the branch to:
/// pooling off -> `p = u`; residual off -> `v = g * f`; mlp off -> `z = v`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MamSwitches {
    pub use_residual: bool,
    pub use_pooling: bool,
    pub use_mlp: bool,
}

impl Default for MamSwitches {
    fn default() -> Self {
        MamSwitches {
            use_residual: true,
            use_pooling: true,
            use_mlp: true,
        }
    }
}

pub fn validate_pooling_sizes(sizes: &[usize]) -> Result<()> {
    if sizes.is_empty() {
        return Err(MagicError::config("pooling sizes must not be empty"));
    }
    if sizes.iter().any(|s| s % 2 == 0) {
        return Err(MagicError::config(format!(
            "pooling sizes must be odd: {sizes:?}"
        )));
    }
    if sizes.windows(2).any(|w| w[0] >= w[1]) {
        return Err(MagicError::config(format!(
            "pooling sizes must be strictly increasing: {sizes:?}"
        )));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mam {
    pub pre_conv: Conv2d,
    pub post_conv: Conv2d,
    pub mlps: Vec<Conv2d>,
    pub slots: Vec<String>,
    pub pooling_sizes: Vec<usize>,
    pub switches: MamSwitches,
}

pub(crate) struct BranchCache {
    slot: usize,
    f: Map,
    p: Map,
    gate: Map,
    v: Map,
}

impl Mam {
    pub fn new<R: Rng>(
        dim: usize,
        slots: Vec<String>,
        pooling_sizes: Vec<usize>,
        switches: MamSwitches,
        rng: &mut R,
    ) -> Result<Self> {
        validate_pooling_sizes(&pooling_sizes)?;
        if slots.is_empty() {
            return Err(MagicError::config("aggregator needs at least one slot"));
        }
        let pre_conv = Conv2d::new(dim, dim, 3, 1, rng);
        let post_conv = Conv2d::new(dim, dim, 1, 1, rng);
        let mlps = slots
            .iter()
            .map(|_| Conv2d::near_identity(dim, 0.1, rng))
            .collect();
        Ok(Mam {
            pre_conv,
            post_conv,
            mlps,
            slots,
            pooling_sizes,
            switches,
        })
    }

    pub fn dim(&self) -> usize {
        self.pre_conv.cout
    }

    pub fn slot_of(&self, name: &str) -> Option<usize> {
        self.slots.iter().position(|s| s == name)
    }

    pub fn zeros_like(&self) -> Self {
        Mam {
            pre_conv: self.pre_conv.zeros_like(),
            post_conv: self.post_conv.zeros_like(),
            mlps: self.mlps.iter().map(Conv2d::zeros_like).collect(),
            slots: self.slots.clone(),
            pooling_sizes: self.pooling_sizes.clone(),
            switches: self.switches,
        }
    }

    fn pool(&self, x: &Map) -> Map {
        let mut acc = x.zeros_like();
        for &s in &self.pooling_sizes {
            acc.add_assign(&avg_pool_same(x, s));
        }
        acc
    }

    fn branch_forward(&self, slot: usize, f: &Map) -> (Map, BranchCache) {
        let u = self.pre_conv.forward(f);
        let p = if self.switches.use_pooling {
            self.pool(&u)
        } else {
            u
        };
        let mut gate = self.post_conv.forward(&p);
        gate.data.iter_mut().for_each(|v| *v = sigmoid(*v));
        let mut v = f.clone();
        for ((vi, gi), fi) in v.data.iter_mut().zip(&gate.data).zip(&f.data) {
            *vi = if self.switches.use_residual {
                gi * fi + fi
            } else {
                gi * fi
            };
        }
        let z = if self.switches.use_mlp {
            self.mlps[slot].forward(&v)
        } else {
            v.clone()
        };
        (
            z,
            BranchCache {
                slot,
                f: f.clone(),
                p,
                gate,
                v,
            },
        )
    }

    fn branch_backward(&self, c: &BranchCache, gz: &Map, grads: &mut Mam) -> Map {
        let gv = if self.switches.use_mlp {
            self.mlps[c.slot].backward(&c.v, gz, &mut grads.mlps[c.slot])
        } else {
            gz.clone()
        };
        let mut gf = gv.zeros_like();
        let mut ga = gv.zeros_like();
        for i in 0..gv.data.len() {
            let (g, f, d) = (c.gate.data[i], c.f.data[i], gv.data[i]);
            gf.data[i] = if self.switches.use_residual {
                d * g + d
            } else {
                d * g
            };
            ga.data[i] = d * f * g * (1.0 - g);
        }
        let gp = self.post_conv.backward(&c.p, &ga, &mut grads.post_conv);
        let gu = if self.switches.use_pooling {
            self.pool(&gp)
        } else {
            gp
        };
        gf.add_assign(&self.pre_conv.backward(&c.f, &gu, &mut grads.pre_conv));
        gf
    }

    /// Mean of the branch outputs for `(slot, feature)` pairs, in the given
    /// order.
    pub(crate) fn aggregate(&self, inputs: &[(usize, &Map)]) -> Result<(Map, Vec<BranchCache>)> {
        let first = inputs
            .first()
            .ok_or_else(|| MagicError::arg("aggregator needs at least one input feature"))?
            .1;
        if first.c != self.dim() {
            return Err(MagicError::arg(format!(
                "aggregator expects {} channels, got {}",
                self.dim(),
                first.c
            )));
        }
        let mut acc = first.zeros_like();
        let mut caches = Vec::with_capacity(inputs.len());
        for &(slot, f) in inputs {
            if slot >= self.mlps.len() {
                return Err(MagicError::arg(format!("no MLP for slot {slot}")));
            }
            if !f.same_shape(first) {
                return Err(MagicError::arg("aggregator inputs must share a shape"));
            }
            let (z, c) = self.branch_forward(slot, f);
            acc.add_assign(&z);
            caches.push(c);
        }
        acc.scale(1.0 / inputs.len() as f64);
        Ok((acc, caches))
    }

    /// Gradients w.r.t. each aggregated input, in input order.
    pub(crate) fn aggregate_backward(
        &self,
        caches: &[BranchCache],
        g_out: &Map,
        grads: &mut Mam,
    ) -> Vec<Map> {
        let mut gz = g_out.clone();
        gz.scale(1.0 / caches.len() as f64);
        caches
            .iter()
            .map(|c| self.branch_backward(c, &gz, grads))
            .collect()
    }

    pub fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        self.pre_conv.params(&format!("{prefix}/pre_conv"), out);
        self.post_conv.params(&format!("{prefix}/post_conv"), out);
        for (slot, mlp) in self.slots.iter().zip(&self.mlps) {
            mlp.params(&format!("{prefix}/mlp/{slot}"), out);
        }
    }

    pub fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        self.pre_conv.params_mut(&format!("{prefix}/pre_conv"), out);
        self.post_conv
            .params_mut(&format!("{prefix}/post_conv"), out);
        for (slot, mlp) in self.slots.iter().zip(self.mlps.iter_mut()) {
            mlp.params_mut(&format!("{prefix}/mlp/{slot}"), out);
        }
    }
}

/// The aggregate over the modalities present (`f_se`).
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticFeature {
    pub feature: Map,
    pub contributing: ModalitySet,
}

/// The aggregate over the selected robust/fragile pair (`f_sa`).
#[derive(Clone, Debug, PartialEq)]
pub struct SalientFeature {
    pub feature: Map,
}

pub(crate) fn semantic_inputs<'a>(
    features: &'a FeatureSet,
    mam: &Mam,
) -> Result<Vec<(usize, &'a Map)>> {
    if features.is_empty() {
        return Err(MagicError::arg("empty feature set"));
    }
    features
        .iter()
        .map(|(m, f)| {
            mam.slot_of(m.name())
                .map(|slot| (slot, f))
                .ok_or_else(|| MagicError::arg(format!("no MLP registered for modality {m}")))
        })
        .collect()
}

/// Aggregate any non-empty subset of modality features. Only the MLPs of the
/// modalities present are used.
pub fn mam_forward(features: &FeatureSet, mam: &Mam) -> Result<SemanticFeature> {
    let inputs = semantic_inputs(features, mam)?;
    let (feature, _) = mam.aggregate(&inputs)?;
    Ok(SemanticFeature {
        feature,
        contributing: features.modalities(),
    })
}

/// Aggregate the `(robust, fragile)` pair with rank-slot MLPs.
pub fn mam_forward_ranked(selected: &[&Map], mam: &Mam) -> Result<SalientFeature> {
    if selected.len() != 2 {
        return Err(MagicError::arg(format!(
            "ranked aggregation needs exactly 2 inputs, got {}",
            selected.len()
        )));
    }
    if mam.mlps.len() != 2 {
        return Err(MagicError::arg(
            "ranked aggregator must have exactly 2 slots",
        ));
    }
    let (feature, _) = mam.aggregate(&[(0, selected[0]), (1, selected[1])])?;
    Ok(SalientFeature { feature })
}

pub fn rank_slot_names() -> Vec<String> {
    vec!["robust".to_string(), "fragile".to_string()]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::modality::Modality;
    use crate::testutil::{max_rel_err, numeric_grad, random_map};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn modality_mam(rng: &mut ChaCha8Rng, dim: usize, switches: MamSwitches) -> Mam {
        let slots = Modality::ALL.iter().map(|m| m.name().to_string()).collect();
        Mam::new(dim, slots, DEFAULT_POOLING_SIZES.to_vec(), switches, rng).unwrap()
    }

    fn feature_set(rng: &mut ChaCha8Rng, mods: &[Modality]) -> FeatureSet {
        FeatureSet::new(
            mods.iter()
                .map(|m| (*m, random_map(rng, 4, 5, 5)))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn default_pooling_sizes() {
        assert_eq!(DEFAULT_POOLING_SIZES, [3, 7, 11]);
        assert!(validate_pooling_sizes(&[3, 7, 11]).is_ok());
        assert!(validate_pooling_sizes(&[3, 4]).is_err());
        assert!(validate_pooling_sizes(&[7, 3]).is_err());
        assert!(validate_pooling_sizes(&[]).is_err());
    }

    #[test]
    fn single_modality_is_its_own_branch() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mam = modality_mam(&mut rng, 4, MamSwitches::default());
        let fs = feature_set(&mut rng, &[Modality::Depth]);
        let out = mam_forward(&fs, &mam).unwrap();
        let slot = mam.slot_of("depth").unwrap();
        let (z, _) = mam.branch_forward(slot, fs.get(Modality::Depth).unwrap());
        assert_eq!(out.feature, z);
    }

    #[test]
    fn equal_branches_average_to_one_branch() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut mam = modality_mam(&mut rng, 4, MamSwitches::default());
        mam.mlps[1] = mam.mlps[0].clone();
        let f = random_map(&mut rng, 4, 5, 5);
        let fs = FeatureSet::new(vec![
            (Modality::Rgb, f.clone()),
            (Modality::Depth, f.clone()),
        ])
        .unwrap();
        let out = mam_forward(&fs, &mam).unwrap();
        let (z, _) = mam.branch_forward(0, &f);
        for (a, b) in out.feature.data.iter().zip(&z.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn reordering_inputs_does_not_change_the_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mam = modality_mam(&mut rng, 4, MamSwitches::default());
        let fs = feature_set(&mut rng, &Modality::ALL);
        let mut inputs = semantic_inputs(&fs, &mam).unwrap();
        let (a, _) = mam.aggregate(&inputs).unwrap();
        inputs.reverse();
        inputs.swap(0, 2);
        let (b, _) = mam.aggregate(&inputs).unwrap();
        for (x, y) in a.data.iter().zip(&b.data) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn absent_modality_mlps_are_unused() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mam = modality_mam(&mut rng, 4, MamSwitches::default());
        let fs = feature_set(&mut rng, &[Modality::Rgb, Modality::Lidar]);
        let before = mam_forward(&fs, &mam).unwrap();
        let mut zeroed = mam.clone();
        for m in [Modality::Depth, Modality::Event] {
            let slot = zeroed.slot_of(m.name()).unwrap();
            zeroed.mlps[slot] = zeroed.mlps[slot].zeros_like();
        }
        assert_eq!(mam_forward(&fs, &zeroed).unwrap(), before);
    }

    #[test]
    fn switches_change_output_and_reduce_as_documented() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let full = modality_mam(&mut rng, 4, MamSwitches::default());
        let f = random_map(&mut rng, 4, 6, 6);
        let (z_full, c) = full.branch_forward(0, &f);

        let mut no_mlp = full.clone();
        no_mlp.switches.use_mlp = false;
        let (z, _) = no_mlp.branch_forward(0, &f);
        assert_ne!(z, z_full);
        assert_eq!(z, c.v);

        let mut no_res = full.clone();
        no_res.switches.use_residual = false;
        let (z, cr) = no_res.branch_forward(0, &f);
        assert_ne!(z, z_full);
        for i in 0..f.data.len() {
            assert!((cr.v.data[i] - cr.gate.data[i] * f.data[i]).abs() < 1e-15);
        }

        let mut no_pool = full.clone();
        no_pool.switches.use_pooling = false;
        let (z, cp) = no_pool.branch_forward(0, &f);
        assert_ne!(z, z_full);
        assert_eq!(cp.p, full.pre_conv.forward(&f));
    }

    #[test]
    fn error_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mam = modality_mam(&mut rng, 4, MamSwitches::default());
        assert!(mam_forward(&FeatureSet::new(vec![]).unwrap(), &mam).is_err());

        let ranked = Mam::new(
            4,
            rank_slot_names(),
            vec![3],
            MamSwitches::default(),
            &mut rng,
        )
        .unwrap();
        let fs = feature_set(&mut rng, &[Modality::Rgb]);
        assert!(mam_forward(&fs, &ranked).is_err());
        let f = random_map(&mut rng, 4, 3, 3);
        assert!(mam_forward_ranked(&[&f], &ranked).is_err());
        assert!(mam_forward_ranked(&[&f, &f, &f], &ranked).is_err());
        assert!(mam_forward_ranked(&[&f, &f], &ranked).is_ok());
    }

    #[test]
    fn ranked_slots_swap_symmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mam = Mam::new(
            4,
            rank_slot_names(),
            vec![3, 7],
            MamSwitches::default(),
            &mut rng,
        )
        .unwrap();
        let a = random_map(&mut rng, 4, 4, 4);
        let b = random_map(&mut rng, 4, 4, 4);
        let out = mam_forward_ranked(&[&a, &b], &mam).unwrap();
        let mut swapped = mam.clone();
        swapped.mlps.swap(0, 1);
        let out2 = mam_forward_ranked(&[&b, &a], &swapped).unwrap();
        for (x, y) in out.feature.data.iter().zip(&out2.feature.data) {
            assert!((x - y).abs() < 1e-12);
        }

        let mut equal = mam.clone();
        equal.mlps[1] = equal.mlps[0].clone();
        let both = mam_forward_ranked(&[&a, &a], &equal).unwrap();
        let (z, _) = equal.branch_forward(0, &a);
        for (x, y) in both.feature.data.iter().zip(&z.data) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn slot_input_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mam = modality_mam(&mut rng, 3, MamSwitches::default());
        let inputs: Vec<Map> = (0..3).map(|_| random_map(&mut rng, 3, 6, 6)).collect();
        let weights = random_map(&mut rng, 3, 6, 6);
        let slots = [0usize, 2, 3];
        let loss = |xs: &[Map]| {
            let pairs: Vec<(usize, &Map)> = slots.iter().copied().zip(xs.iter()).collect();
            let (out, _) = mam.aggregate(&pairs).unwrap();
            out.data
                .iter()
                .zip(&weights.data)
                .map(|(a, b)| a * b)
                .sum::<f64>()
        };
        let pairs: Vec<(usize, &Map)> = slots.iter().copied().zip(inputs.iter()).collect();
        let (_, caches) = mam.aggregate(&pairs).unwrap();
        let analytic = mam.aggregate_backward(&caches, &weights, &mut mam.zeros_like());
        for k in 0..inputs.len() {
            let numeric = numeric_grad(&inputs[k].data, 1e-3, |v| {
                let mut xs = inputs.clone();
                xs[k].data.copy_from_slice(v);
                loss(&xs)
            });
            let err = max_rel_err(&analytic[k].data, &numeric);
            assert!(err < 1e-4, "slot {}: {err}", slots[k]);
        }
    }
}
