//! Training: the composed objective with its backward pass, AdamW, the
//! warmup + poly schedule, and the epoch loop with checkpoints and resume.
//!
//! All learned state (parameters and both Adam moments) is rounded to f32
//! after every update, so a checkpoint holds the state exactly and a resumed
//! run continues bit-for-bit.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::asm::{
    build_mask, channel_cosines_backward, consistency_pair, rank_against, ConsistencyReference,
    RankingResult, SupervisionMask,
};
use crate::backbone::encode_with_cache;
use crate::checkpoint::{save_checkpoint, Checkpoint, TrainingBlock};
use crate::config::{parse_bool, KvFile};
use crate::data::ModalitySample;
use crate::error::{MagicError, Result};
use crate::losses::{
    loss_c, loss_m, loss_s, total_loss, LossBreakdown, DEFAULT_BETA, DEFAULT_LAMBDA,
};
use crate::mam::{semantic_inputs, MamSwitches, DEFAULT_POOLING_SIZES};
use crate::modality::ModalitySet;
use crate::model::{MagicModel, ModelConfig, DEFAULT_FEATURE_DIM};
use crate::tensor::Map;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: u64,
    pub warmup_epochs: u64,
    pub warmup_factor: f64,
    pub base_lr: f64,
    pub poly_power: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub lambda: f64,
    pub beta: f64,
    pub seed: u64,
    pub switches: MamSwitches,
    pub consistency_reference: ConsistencyReference,
    pub feature_dim: usize,
    pub pooling_sizes: Vec<usize>,
    pub modalities: ModalitySet,
    /// Write a checkpoint every this many steps; 0 writes only the final one.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            warmup_epochs: 10,
            warmup_factor: 0.1,
            base_lr: 6e-5,
            poly_power: 0.9,
            epsilon: 1e-8,
            weight_decay: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            batch_size: 1,
            lambda: DEFAULT_LAMBDA,
            beta: DEFAULT_BETA,
            seed: 0,
            switches: MamSwitches::default(),
            consistency_reference: ConsistencyReference::Salient,
            feature_dim: DEFAULT_FEATURE_DIM,
            pooling_sizes: DEFAULT_POOLING_SIZES.to_vec(),
            modalities: ModalitySet::all(),
            checkpoint_every: 0,
        }
    }
}

fn join_sizes(sizes: &[usize]) -> String {
    sizes
        .iter()
        .map(|s| s.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(MagicError::config("epochs must be at least 1"));
        }
        if self.warmup_epochs >= self.epochs {
            return Err(MagicError::config(format!(
                "warmup_epochs ({}) must be below epochs ({})",
                self.warmup_epochs, self.epochs
            )));
        }
        for (name, v) in [
            ("base_lr", self.base_lr),
            ("warmup_factor", self.warmup_factor),
            ("poly_power", self.poly_power),
            ("epsilon", self.epsilon),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(MagicError::config(format!(
                    "{name} must be positive, got {v}"
                )));
            }
        }
        for (name, v) in [
            ("weight_decay", self.weight_decay),
            ("lambda", self.lambda),
            ("beta", self.beta),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(MagicError::config(format!(
                    "{name} must be non-negative, got {v}"
                )));
            }
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(MagicError::config(format!(
                    "{name} must be in [0, 1), got {v}"
                )));
            }
        }
        if self.batch_size == 0 {
            return Err(MagicError::config("batch_size must be at least 1"));
        }
        self.model_config(2).validate()
    }

    pub fn model_config(&self, classes: usize) -> ModelConfig {
        ModelConfig {
            feature_dim: self.feature_dim,
            classes,
            modalities: self.modalities,
            pooling_sizes: self.pooling_sizes.clone(),
            switches: self.switches,
        }
    }

    pub fn from_kv(mut kv: KvFile) -> Result<Self> {
        let d = TrainConfig::default();
        let flag = |kv: &mut KvFile, key: &str, default: bool| -> Result<bool> {
            kv.take_str(key).map_or(Ok(default), |v| parse_bool(&v))
        };
        let switches = MamSwitches {
            use_residual: flag(&mut kv, "use_residual", d.switches.use_residual)?,
            use_pooling: flag(&mut kv, "use_pooling", d.switches.use_pooling)?,
            use_mlp: flag(&mut kv, "use_mlp", d.switches.use_mlp)?,
        };
        let consistency_reference = match kv.take_str("consistency_reference") {
            Some(v) => ConsistencyReference::parse(&v)?,
            None => d.consistency_reference,
        };
        let pooling_sizes = match kv.take_str("pooling_sizes") {
            Some(v) => v
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse::<usize>()
                        .map_err(|_| MagicError::config(format!("bad pooling size '{s}'")))
                })
                .collect::<Result<Vec<_>>>()?,
            None => d.pooling_sizes.clone(),
        };
        let modalities = match kv.take_str("modalities") {
            Some(v) => ModalitySet::parse(&v).map_err(|e| MagicError::config(e.to_string()))?,
            None => d.modalities,
        };
        let cfg = TrainConfig {
            epochs: kv.take_or("epochs", d.epochs)?,
            warmup_epochs: kv.take_or("warmup_epochs", d.warmup_epochs)?,
            warmup_factor: kv.take_or("warmup_factor", d.warmup_factor)?,
            base_lr: kv.take_or("base_lr", d.base_lr)?,
            poly_power: kv.take_or("poly_power", d.poly_power)?,
            epsilon: kv.take_or("epsilon", d.epsilon)?,
            weight_decay: kv.take_or("weight_decay", d.weight_decay)?,
            beta1: kv.take_or("beta1", d.beta1)?,
            beta2: kv.take_or("beta2", d.beta2)?,
            batch_size: kv.take_or("batch_size", d.batch_size)?,
            lambda: kv.take_or("lambda", d.lambda)?,
            beta: kv.take_or("beta", d.beta)?,
            seed: kv.take_or("seed", d.seed)?,
            switches,
            consistency_reference,
            feature_dim: kv.take_or("feature_dim", d.feature_dim)?,
            pooling_sizes,
            modalities,
            checkpoint_every: kv.take_or("checkpoint_every", d.checkpoint_every)?,
        };
        kv.finish()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_kv(KvFile::parse(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_kv(KvFile::read(path)?)
    }

    /// `(key, value)` pairs in a fixed order; parsing them back gives the
    /// same config.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("epochs", self.epochs.to_string()),
            ("warmup_epochs", self.warmup_epochs.to_string()),
            ("warmup_factor", self.warmup_factor.to_string()),
            ("base_lr", self.base_lr.to_string()),
            ("poly_power", self.poly_power.to_string()),
            ("epsilon", self.epsilon.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("beta1", self.beta1.to_string()),
            ("beta2", self.beta2.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("lambda", self.lambda.to_string()),
            ("beta", self.beta.to_string()),
            ("seed", self.seed.to_string()),
            ("use_residual", self.switches.use_residual.to_string()),
            ("use_pooling", self.switches.use_pooling.to_string()),
            ("use_mlp", self.switches.use_mlp.to_string()),
            (
                "consistency_reference",
                self.consistency_reference.name().to_string(),
            ),
            ("feature_dim", self.feature_dim.to_string()),
            ("pooling_sizes", join_sizes(&self.pooling_sizes)),
            ("modalities", self.modalities.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
        ]
    }

    pub fn to_kv_string(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }
}

/// Learning rate at `step` of `total_steps`: a constant `warmup_factor *
/// base_lr` for the first `warmup_epochs` worth of steps, then
/// `base_lr * (1 - step/total)^poly_power`.
pub fn lr_at(step: u64, total_steps: u64, config: &TrainConfig) -> Result<f64> {
    if total_steps == 0 {
        return Err(MagicError::arg("total_steps must be positive"));
    }
    if step > total_steps {
        return Err(MagicError::arg(format!(
            "step {step} beyond total_steps {total_steps}"
        )));
    }
    let warmup_steps = warmup_steps(total_steps, config);
    if step < warmup_steps {
        return Ok(config.warmup_factor * config.base_lr);
    }
    let t = step as f64 / total_steps as f64;
    Ok(config.base_lr * (1.0 - t).powf(config.poly_power))
}

pub fn warmup_steps(total_steps: u64, config: &TrainConfig) -> u64 {
    ((total_steps as u128 * config.warmup_epochs as u128) / config.epochs.max(1) as u128) as u64
}

/// Loss weights and switches for one evaluation of the objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Objective {
    pub lambda: f64,
    pub beta: f64,
    pub reference: ConsistencyReference,
    /// Fault injection for the gradient checker: negate the consistency
    /// gradient. Never set in training.
    pub(crate) flip_consistency_grad: bool,
}

impl Objective {
    pub fn new(lambda: f64, beta: f64, reference: ConsistencyReference) -> Self {
        Objective {
            lambda,
            beta,
            reference,
            flip_consistency_grad: false,
        }
    }

    pub fn from_config(config: &TrainConfig) -> Self {
        Self::new(config.lambda, config.beta, config.consistency_reference)
    }
}

/// The discrete choices of a forward pass. Holding them fixed makes the
/// objective a smooth function of the parameters.
#[derive(Clone, Debug)]
pub(crate) struct Frozen {
    pub ranking: RankingResult,
    pub mask: SupervisionMask,
}

pub struct ObjectiveOutput {
    pub breakdown: LossBreakdown,
    pub ranking: RankingResult,
    pub grads: MagicModel,
    pub(crate) frozen: Frozen,
}

fn tag(term: &'static str, step: u64) -> impl Fn(MagicError) -> MagicError {
    move |e| match e {
        MagicError::Numeric(_) => MagicError::NonFinite { term, step },
        other => other,
    }
}

/// Forward and backward of the full objective on one sample. The ranking and
/// the supervision mask are treated as constants; if `frozen` is given they
/// are taken from it instead of being recomputed.
pub(crate) fn objective_with(
    model: &MagicModel,
    sample: &ModalitySample,
    obj: &Objective,
    step: u64,
    frozen: Option<&Frozen>,
) -> Result<ObjectiveOutput> {
    let label = sample.label();
    let (features, enc_caches) =
        encode_with_cache(&model.encoder, sample, model.config.modalities)?;
    let se_inputs = semantic_inputs(&features, &model.semantic)?;
    let (f_se, se_caches) = model.semantic.aggregate(&se_inputs)?;
    let (pm, head_m) = model.seghead.forward_cached(&f_se);
    let lm = loss_m(&pm, label).map_err(tag("l_m", step))?;

    let ranking = match frozen {
        Some(f) => f.ranking.clone(),
        None => rank_against(&features, &f_se)?,
    };
    let (robust, fragile) = ranking.selected;
    let f_robust = features.get(robust).expect("ranked modality has a feature");
    let f_fragile = features
        .get(fragile)
        .expect("ranked modality has a feature");
    let (f_sa, sa_caches) = model.salient.aggregate(&[(0, f_robust), (1, f_fragile)])?;
    let (ps, head_s) = model.seghead.forward_cached(&f_sa);
    let mask = match frozen {
        Some(f) => f.mask.clone(),
        None => build_mask(&pm, label)?,
    };
    let ls = loss_s(&ps, &mask).map_err(tag("l_s", step))?;

    let reference = match obj.reference {
        ConsistencyReference::Salient => &f_sa,
        ConsistencyReference::Semantic => &f_se,
    };
    let consistency = if ranking.remaining.len() == 2 {
        let r0 = features
            .get(ranking.remaining[0])
            .expect("remaining modality has a feature");
        let r1 = features
            .get(ranking.remaining[1])
            .expect("remaining modality has a feature");
        let pair = consistency_pair(&[r0, r1], reference)?;
        let lc = loss_c(&pair).map_err(tag("l_c", step))?;
        Some((r0, r1, lc))
    } else {
        None
    };
    let l_c = consistency.as_ref().map_or(0.0, |c| c.2.value);
    let breakdown = total_loss(lm.value, ls.value, l_c, obj.lambda, obj.beta);
    for (term, v) in [
        ("l_m", breakdown.l_m),
        ("l_s", breakdown.l_s),
        ("l_c", breakdown.l_c),
        ("total", breakdown.total),
    ] {
        if !v.is_finite() {
            return Err(MagicError::NonFinite { term, step });
        }
    }

    // backward
    let mut grads = model.zeros_like();
    let mut g_feat: Vec<Map> = features.iter().map(|(_, f)| f.zeros_like()).collect();
    let slot_of = |m| {
        features
            .iter()
            .position(|(k, _)| k == m)
            .expect("modality present")
    };

    let mut g_se = model
        .seghead
        .backward(&head_m, &lm.grad, &mut grads.seghead);
    let mut g_sa = f_sa.zeros_like();
    let mut salient_used = false;
    if obj.lambda > 0.0 {
        let mut g = ls.grad.clone();
        g.scale(obj.lambda);
        g_sa = model.seghead.backward(&head_s, &g, &mut grads.seghead);
        salient_used = true;
    }
    if obj.beta > 0.0 {
        if let Some((r0, r1, lc)) = &consistency {
            let sign = if obj.flip_consistency_grad {
                -obj.beta
            } else {
                obj.beta
            };
            let g1: Vec<f64> = lc.grad_c1.iter().map(|g| g * sign).collect();
            let g2: Vec<f64> = lc.grad_c2.iter().map(|g| g * sign).collect();
            let (gx0, mut gref) = channel_cosines_backward(r0, reference, &g1);
            let (gx1, gref1) = channel_cosines_backward(r1, reference, &g2);
            gref.add_assign(&gref1);
            g_feat[slot_of(ranking.remaining[0])].add_assign(&gx0);
            g_feat[slot_of(ranking.remaining[1])].add_assign(&gx1);
            match obj.reference {
                ConsistencyReference::Salient => {
                    g_sa.add_assign(&gref);
                    salient_used = true;
                }
                ConsistencyReference::Semantic => g_se.add_assign(&gref),
            }
        }
    }
    if salient_used {
        let g = model
            .salient
            .aggregate_backward(&sa_caches, &g_sa, &mut grads.salient);
        g_feat[slot_of(robust)].add_assign(&g[0]);
        g_feat[slot_of(fragile)].add_assign(&g[1]);
    }
    let g_inputs = model
        .semantic
        .aggregate_backward(&se_caches, &g_se, &mut grads.semantic);
    for (i, g) in g_inputs.iter().enumerate() {
        g_feat[i].add_assign(g);
    }
    for (cache, g) in enc_caches.iter().zip(&g_feat) {
        model.encoder.backward(cache, g, &mut grads.encoder);
    }

    Ok(ObjectiveOutput {
        breakdown,
        ranking: ranking.clone(),
        grads,
        frozen: Frozen { ranking, mask },
    })
}

/// Loss breakdown, ranking and parameter gradients for one sample.
pub fn objective(
    model: &MagicModel,
    sample: &ModalitySample,
    obj: &Objective,
) -> Result<ObjectiveOutput> {
    objective_with(model, sample, obj, 0, None)
}

/// Everything needed to continue training exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub model: MagicModel,
    pub m: MagicModel,
    pub v: MagicModel,
    /// Optimizer steps taken so far.
    pub step: u64,
    /// Epoch of the next step.
    pub epoch: u64,
    pub seed: u64,
}

impl TrainState {
    pub fn new(config: &TrainConfig, classes: usize) -> Result<Self> {
        config.validate()?;
        let model = MagicModel::new(config.model_config(classes), config.seed)?;
        Ok(TrainState {
            m: model.zeros_like(),
            v: model.zeros_like(),
            model,
            step: 0,
            epoch: 0,
            seed: config.seed,
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            training: Some(TrainingBlock {
                step: self.step,
                epoch: self.epoch,
                seed: self.seed,
                m: self.m.clone(),
                v: self.v.clone(),
            }),
        }
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        let t = ckpt
            .training
            .ok_or_else(|| MagicError::arg("checkpoint has no optimizer state to resume from"))?;
        Ok(TrainState {
            model: ckpt.model,
            m: t.m,
            v: t.v,
            step: t.step,
            epoch: t.epoch,
            seed: t.seed,
        })
    }
}

/// One AdamW update (decoupled weight decay), then rounding to f32.
pub fn adamw_update(state: &mut TrainState, grads: &MagicModel, lr: f64, config: &TrainConfig) {
    let t = (state.step + 1) as i32;
    let bc1 = 1.0 - config.beta1.powi(t);
    let bc2 = 1.0 - config.beta2.powi(t);
    let decay = 1.0 - lr * config.weight_decay;
    let params = state.model.params_mut();
    let ms = state.m.params_mut();
    let vs = state.v.params_mut();
    let gs = grads.params();
    for ((((_, p), (_, m)), (_, v)), (_, g)) in params.into_iter().zip(ms).zip(vs).zip(gs) {
        for i in 0..p.data.len() {
            let gi = g.data[i];
            let mi = config.beta1 * m.data[i] + (1.0 - config.beta1) * gi;
            let vi = config.beta2 * v.data[i] + (1.0 - config.beta2) * gi * gi;
            let update = (mi / bc1) / ((vi / bc2).sqrt() + config.epsilon);
            let pi = p.data[i] * decay - lr * update;
            p.data[i] = pi as f32 as f64;
            m.data[i] = mi as f32 as f64;
            v.data[i] = vi as f32 as f64;
        }
    }
}

/// Steps per epoch for `n` samples.
pub fn steps_per_epoch(n: usize, config: &TrainConfig) -> u64 {
    n.div_ceil(config.batch_size) as u64
}

pub fn total_steps(n: usize, config: &TrainConfig) -> u64 {
    config.epochs * steps_per_epoch(n, config)
}

/// Sample visiting order for `epoch`; a pure function of `(seed, epoch)`.
pub fn epoch_order(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// One optimizer step on `batch`; gradients and losses are averaged over it.
pub fn train_step(
    state: &mut TrainState,
    batch: &[&ModalitySample],
    config: &TrainConfig,
    total_steps: u64,
) -> Result<(LossBreakdown, Vec<RankingResult>)> {
    if batch.is_empty() {
        return Err(MagicError::arg("empty batch"));
    }
    let obj = Objective::from_config(config);
    let mut grads: Option<MagicModel> = None;
    let mut rankings = Vec::with_capacity(batch.len());
    let (mut lm, mut ls, mut lc) = (0.0, 0.0, 0.0);
    for sample in batch {
        if sample.classes() != state.model.config.classes {
            return Err(MagicError::arg(format!(
                "sample has {} classes, model has {}",
                sample.classes(),
                state.model.config.classes
            )));
        }
        let out = objective_with(&state.model, sample, &obj, state.step, None)?;
        lm += out.breakdown.l_m;
        ls += out.breakdown.l_s;
        lc += out.breakdown.l_c;
        rankings.push(out.ranking);
        match &mut grads {
            None => grads = Some(out.grads),
            Some(acc) => {
                for ((_, a), (_, g)) in acc.params_mut().into_iter().zip(out.grads.params()) {
                    a.data.iter_mut().zip(&g.data).for_each(|(x, y)| *x += y);
                }
            }
        }
    }
    let mut grads = grads.expect("non-empty batch");
    let n = batch.len() as f64;
    if batch.len() > 1 {
        for (_, p) in grads.params_mut() {
            p.data.iter_mut().for_each(|x| *x /= n);
        }
    }
    let breakdown = total_loss(lm / n, ls / n, lc / n, config.lambda, config.beta);
    let lr = lr_at(state.step, total_steps, config)?;
    adamw_update(state, &grads, lr, config);
    if !state.model.is_finite() {
        return Err(MagicError::NonFinite {
            term: "parameters",
            step: state.step,
        });
    }
    state.step += 1;
    Ok((breakdown, rankings))
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub step: u64,
    pub loss: LossBreakdown,
    pub lr: f64,
}

pub const LOG_COLUMNS: &str = "step,l_m,l_s,l_c,total,lr";

impl LogRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{:e},{:e},{:e},{:e},{:e}",
            self.step, self.loss.l_m, self.loss.l_s, self.loss.l_c, self.loss.total, self.lr
        )
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
    /// `(step, ranking)` for every sample visited.
    pub rankings: Vec<(u64, RankingResult)>,
}

impl TrainLog {
    /// `# key=value` config lines, the column header, then one row per step.
    pub fn to_csv(&self, config: &TrainConfig) -> String {
        let mut s = log_header(config);
        for r in &self.rows {
            s.push_str(&r.csv());
            s.push('\n');
        }
        s
    }

    pub fn rankings_csv(&self, config: &TrainConfig) -> String {
        let mods: Vec<_> = config.modalities.iter().collect();
        let mut s = RankingResult::csv_header(&mods);
        s.push('\n');
        for (step, r) in &self.rankings {
            s.push_str(&r.csv_row(*step));
            s.push('\n');
        }
        s
    }
}

pub fn log_header(config: &TrainConfig) -> String {
    let mut s = String::new();
    for (k, v) in config.entries() {
        let _ = writeln!(s, "# {k}={v}");
    }
    s.push_str(LOG_COLUMNS);
    s.push('\n');
    s
}

/// Where checkpoints go during [`train`].
pub struct CheckpointSink<'a> {
    pub dir: &'a Path,
}

impl CheckpointSink<'_> {
    pub fn step_path(&self, step: u64) -> std::path::PathBuf {
        self.dir.join(format!("step_{step:07}.magp"))
    }

    pub fn final_path(&self) -> std::path::PathBuf {
        self.dir.join("final.magp")
    }
}

/// Run (or continue) training over `dataset` until `config.epochs` are done.
pub fn train(
    dataset: &[ModalitySample],
    config: &TrainConfig,
    resume: Option<TrainState>,
    checkpoints: Option<&CheckpointSink>,
) -> Result<(TrainState, TrainLog)> {
    config.validate()?;
    let first = dataset
        .first()
        .ok_or_else(|| MagicError::arg("dataset is empty"))?;
    if !config.modalities.is_subset_of(first.modality_set()) {
        return Err(MagicError::arg(format!(
            "training modalities {} missing from the data ({})",
            config.modalities,
            first.modality_set()
        )));
    }
    let mut state = match resume {
        Some(s) => {
            if s.model.config != config.model_config(first.classes()) {
                return Err(MagicError::arg(
                    "checkpoint model does not match the training config",
                ));
            }
            if s.seed != config.seed {
                return Err(MagicError::arg(format!(
                    "checkpoint seed {} differs from config seed {}",
                    s.seed, config.seed
                )));
            }
            s
        }
        None => TrainState::new(config, first.classes())?,
    };
    let spe = steps_per_epoch(dataset.len(), config);
    let total = total_steps(dataset.len(), config);
    if state.step > total {
        return Err(MagicError::arg(format!(
            "checkpoint step {} beyond the run length {total}",
            state.step
        )));
    }
    let mut log = TrainLog::default();
    while state.step < total {
        let epoch = state.step / spe;
        let order = epoch_order(config.seed, epoch, dataset.len());
        let k = (state.step % spe) as usize;
        let lo = k * config.batch_size;
        let hi = (lo + config.batch_size).min(dataset.len());
        let batch: Vec<&ModalitySample> = order[lo..hi].iter().map(|&i| &dataset[i]).collect();
        let lr = lr_at(state.step, total, config)?;
        let step = state.step;
        let (loss, rankings) = train_step(&mut state, &batch, config, total)?;
        state.epoch = state.step / spe;
        log.rows.push(LogRow { step, loss, lr });
        log.rankings.extend(rankings.into_iter().map(|r| (step, r)));
        if let Some(sink) = checkpoints {
            if config.checkpoint_every > 0
                && state.step % config.checkpoint_every == 0
                && state.step < total
            {
                save_checkpoint(&state.to_checkpoint(), &sink.step_path(state.step))?;
            }
        }
    }
    if let Some(sink) = checkpoints {
        save_checkpoint(&state.to_checkpoint(), &sink.final_path())?;
    }
    Ok((state, log))
}
