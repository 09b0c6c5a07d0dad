//! Finite-difference check of the full training objective on a toy network.
//!
//! The toy has D=2 features, K=3 classes and all four modalities on 12x12
//! inputs, so the encoder output is 3x3. Every parameter is perturbed by
//! +-h and +-2h (h = 1e-3) and the fourth-order central difference of the
//! total loss is compared with the analytic gradient. The ranking and supervision mask are frozen at their
//! unperturbed values, matching how the backward pass treats them.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::asm::ConsistencyReference;
use crate::data::{Image, LabelMap, ModalitySample, SampleMeta, CHANNELS};
use crate::error::Result;
use crate::losses::{DEFAULT_BETA, DEFAULT_LAMBDA};
use crate::modality::Modality;
use crate::model::{MagicModel, ModelConfig};
use crate::trainer::{objective_with, Objective};

pub const TOY_DIM: usize = 2;
pub const TOY_CLASSES: usize = 3;
pub const TOY_SIZE: usize = 12;
pub const FD_STEP: f64 = 1e-3;
pub const TOLERANCE: f64 = 1e-4;
/// Denominator floor for the relative error, so entries whose gradient is
/// essentially zero are judged by absolute error.
pub const RELATIVE_FLOOR: f64 = 1e-3;

pub const GROUPS: [&str; 4] = ["encoder", "mam/semantic", "mam/salient", "seghead"];

#[derive(Clone, Copy, Debug, Default)]
pub struct GradcheckOptions {
    pub seed: u64,
    pub reference: ConsistencyReference,
    /// Negate the consistency gradient; used to confirm the check can fail.
    pub flip_consistency_grad: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupResult {
    pub group: &'static str,
    pub params: usize,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub groups: Vec<GroupResult>,
    /// Whether the toy objective had a consistency term (four modalities
    /// always leave two unselected, so this is expected to be true).
    pub consistency_active: bool,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.max_rel_error < TOLERANCE)
    }

    pub fn lines(&self) -> Vec<String> {
        self.groups
            .iter()
            .map(|g| {
                format!(
                    "{} params={} max_rel_error={:.3e} {}",
                    g.group,
                    g.params,
                    g.max_rel_error,
                    if g.max_rel_error < TOLERANCE {
                        "ok"
                    } else {
                        "FAIL"
                    }
                )
            })
            .collect()
    }
}

/// Fourth-order central difference from `f(x+h), f(x-h), f(x+2h), f(x-2h)`.
/// Truncation error is `O(h^4)`, against `O(h^2)` for the two-point form.
pub fn central_difference(p1: f64, m1: f64, p2: f64, m2: f64, h: f64) -> f64 {
    (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h)
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

pub fn toy_sample(seed: u64) -> Result<ModalitySample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let n = TOY_SIZE * TOY_SIZE;
    let images: BTreeMap<Modality, Image> = Modality::ALL
        .iter()
        .map(|&m| {
            let data = (0..CHANNELS * n).map(|_| rng.gen::<f32>()).collect();
            (
                m,
                Image {
                    h: TOY_SIZE,
                    w: TOY_SIZE,
                    data,
                },
            )
        })
        .collect();
    let label = LabelMap {
        h: TOY_SIZE,
        w: TOY_SIZE,
        data: (0..n)
            .map(|_| rng.gen_range(0..TOY_CLASSES as u16))
            .collect(),
    };
    ModalitySample::new(TOY_CLASSES as u16, images, label, SampleMeta::default())
}

pub fn toy_model(seed: u64) -> Result<MagicModel> {
    let mut cfg = ModelConfig::new(TOY_CLASSES);
    cfg.feature_dim = TOY_DIM;
    let mut model = MagicModel::new(cfg, seed)?;
    // Move parameters off the f32 grid so nothing about the check depends on
    // rounding.
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    for (_, p) in model.params_mut() {
        p.data
            .iter_mut()
            .for_each(|v| *v += rng.gen_range(-1e-4..1e-4));
    }
    Ok(model)
}

pub fn run_gradcheck(opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let sample = toy_sample(opts.seed)?;
    let mut model = toy_model(opts.seed)?;
    let mut obj = Objective::new(DEFAULT_LAMBDA, DEFAULT_BETA, opts.reference);
    obj.flip_consistency_grad = opts.flip_consistency_grad;
    let base = objective_with(&model, &sample, &obj, 0, None)?;
    let frozen = base.frozen.clone();
    let consistency_active = base.ranking.remaining.len() == 2;
    let analytic: Vec<(String, Vec<f64>)> = base
        .grads
        .params()
        .into_iter()
        .map(|(n, p)| (n, p.data.clone()))
        .collect();

    let mut worst: BTreeMap<&'static str, (usize, f64)> =
        GROUPS.iter().map(|g| (*g, (0, 0.0))).collect();
    for (pi, (name, grad)) in analytic.iter().enumerate() {
        let group = GROUPS
            .iter()
            .find(|g| name.starts_with(&format!("{g}/")))
            .copied()
            .expect("every parameter belongs to a group");
        for (i, &a) in grad.iter().enumerate() {
            let original = model.params()[pi].1.data[i];
            let eval = |model: &mut MagicModel, v: f64| -> Result<f64> {
                model.params_mut()[pi].1.data[i] = v;
                Ok(objective_with(model, &sample, &obj, 0, Some(&frozen))?
                    .breakdown
                    .total)
            };
            let mut at = |k: f64| eval(&mut model, original + k * FD_STEP);
            let (p1, m1, p2, m2) = (at(1.0)?, at(-1.0)?, at(2.0)?, at(-2.0)?);
            model.params_mut()[pi].1.data[i] = original;
            let numeric = central_difference(p1, m1, p2, m2, FD_STEP);
            let e = worst.get_mut(group).expect("known group");
            e.0 += 1;
            e.1 = e.1.max(relative_error(a, numeric));
        }
    }
    Ok(GradcheckReport {
        groups: GROUPS
            .iter()
            .map(|g| GroupResult {
                group: g,
                params: worst[g].0,
                max_rel_error: worst[g].1,
            })
            .collect(),
        consistency_active,
    })
}
