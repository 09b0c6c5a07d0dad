//! Brute-force reference implementations shared by the integration tests.
#![allow(dead_code)]

use magic::asm::{build_mask, channel_cosines, rank_modalities, ConsistencyPair};
use magic::backbone::FeatureSet;
use magic::data::LabelMap;
use magic::eval::{metrics, ConfusionMatrix};
use magic::losses::{loss_c, loss_m, loss_s};
use magic::mam::SemanticFeature;
use magic::nn::avg_pool_same;
use magic::tensor::Map;
use magic::{Modality, ModalitySet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const INSTANCES: usize = 100;
pub const ORACLE_TOL: f64 = 1e-6;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_map(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize, scale: f64) -> Map {
    Map::from_vec(
        c,
        h,
        w,
        (0..c * h * w)
            .map(|_| rng.gen_range(-scale..scale))
            .collect(),
    )
    .unwrap()
}

pub fn random_label(rng: &mut ChaCha8Rng, k: usize, h: usize, w: usize) -> LabelMap {
    LabelMap {
        h,
        w,
        data: (0..h * w).map(|_| rng.gen_range(0..k as u16)).collect(),
    }
}

fn logit(m: &Map, c: usize, y: usize, x: usize) -> f64 {
    m.data[(c * m.h + y) * m.w + x]
}

/// Plain softmax at one pixel, without the max shift.
fn softmax_naive(m: &Map, y: usize, x: usize) -> Vec<f64> {
    let e: Vec<f64> = (0..m.c).map(|c| logit(m, c, y, x).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub fn oracle_loss_m(logits: &Map, label: &LabelMap) -> f64 {
    let mut total = 0.0;
    for y in 0..label.h {
        for x in 0..label.w {
            let p = softmax_naive(logits, y, x);
            total -= p[label.at(y, x) as usize].ln();
        }
    }
    total / (label.h * label.w) as f64
}

pub fn oracle_mask(logits: &Map, label: &LabelMap) -> Map {
    let mut t = logits.zeros_like();
    for y in 0..label.h {
        for x in 0..label.w {
            let p = softmax_naive(logits, y, x);
            let mut best = 0;
            for c in 1..logits.c {
                if p[c] > p[best] {
                    best = c;
                }
            }
            let truth = label.at(y, x) as usize;
            for c in 0..logits.c {
                let v = if best == truth {
                    p[c]
                } else {
                    f64::from(c == truth)
                };
                t.data[(c * logits.h + y) * logits.w + x] = v;
            }
        }
    }
    t
}

pub fn oracle_loss_s(logits: &Map, targets: &Map) -> f64 {
    let mut total = 0.0;
    for y in 0..logits.h {
        for x in 0..logits.w {
            let p = softmax_naive(logits, y, x);
            for (c, pc) in p.iter().enumerate() {
                total -= logit(targets, c, y, x) * pc.ln();
            }
        }
    }
    total / (logits.h * logits.w) as f64
}

pub fn oracle_cosine(a: &[f64], b: &[f64]) -> f64 {
    let mut ab = 0.0;
    let mut aa = 0.0;
    let mut bb = 0.0;
    for i in 0..a.len() {
        ab += a[i] * b[i];
        aa += a[i] * a[i];
        bb += b[i] * b[i];
    }
    ab / (aa.sqrt() * bb.sqrt())
}

pub fn oracle_channel_cosines(x: &Map, r: &Map) -> Vec<f64> {
    let n = x.h * x.w;
    (0..x.c)
        .map(|d| oracle_cosine(&x.data[d * n..(d + 1) * n], &r.data[d * n..(d + 1) * n]))
        .collect()
}

pub fn oracle_loss_c(c1: &[f64], c2: &[f64]) -> f64 {
    let dist = |c: &[f64]| {
        let t: Vec<f64> = c.iter().map(|v| (v + 1.0) / 2.0 + 1e-8).collect();
        let s: f64 = t.iter().sum();
        t.into_iter().map(|v| v / s).collect::<Vec<_>>()
    };
    let (q1, q2) = (dist(c1), dist(c2));
    let mut js = 0.0;
    for i in 0..q1.len() {
        let m = (q1[i] + q2[i]) / 2.0;
        js += q1[i] * (q1[i] / m).ln() + q2[i] * (q2[i] / m).ln();
    }
    js
}

/// Zero-padded window mean with divisor `size^2`, one output at a time.
pub fn oracle_pool(x: &Map, size: usize) -> Map {
    let r = (size / 2) as i64;
    let mut out = x.zeros_like();
    for c in 0..x.c {
        for y in 0..x.h as i64 {
            for xx in 0..x.w as i64 {
                let mut s = 0.0;
                for dy in -r..=r {
                    for dx in -r..=r {
                        let (yy, xw) = (y + dy, xx + dx);
                        if yy >= 0 && xw >= 0 && yy < x.h as i64 && xw < x.w as i64 {
                            s += logit(x, c, yy as usize, xw as usize);
                        }
                    }
                }
                out.data[(c * x.h + y as usize) * x.w + xx as usize] = s / (size * size) as f64;
            }
        }
    }
    out
}

/// Scores, then a selection sort by (score desc, registry index asc).
pub fn oracle_ranking(features: &[(Modality, Map)], reference: &Map) -> (Vec<f64>, Vec<Modality>) {
    let scores: Vec<f64> = features
        .iter()
        .map(|(_, f)| oracle_cosine(&f.data, &reference.data))
        .collect();
    let mut left: Vec<usize> = (0..features.len()).collect();
    let mut order = Vec::new();
    while !left.is_empty() {
        let mut best = 0;
        for j in 1..left.len() {
            let (a, b) = (left[j], left[best]);
            if scores[a] > scores[b]
                || (scores[a] == scores[b] && features[a].0.index() < features[b].0.index())
            {
                best = j;
            }
        }
        order.push(features[left.remove(best)].0);
    }
    (scores, order)
}

pub struct OracleMetrics {
    pub iou: Vec<Option<f64>>,
    pub f1: Vec<Option<f64>>,
    pub acc: Vec<Option<f64>>,
    pub pixel_acc: f64,
}

/// Precision/recall route to F1, as a spreadsheet would compute it.
pub fn oracle_metrics(counts: &[Vec<u64>]) -> OracleMetrics {
    let k = counts.len();
    let mut out = OracleMetrics {
        iou: vec![],
        f1: vec![],
        acc: vec![],
        pixel_acc: 0.0,
    };
    let (mut trace, mut total) = (0u64, 0u64);
    for c in 0..k {
        let tp = counts[c][c] as f64;
        let mut fp = 0.0;
        let mut fn_ = 0.0;
        for i in 0..k {
            if i != c {
                fp += counts[i][c] as f64;
                fn_ += counts[c][i] as f64;
            }
        }
        trace += counts[c][c];
        total += counts[c].iter().sum::<u64>();
        out.iou
            .push((tp + fp + fn_ > 0.0).then(|| tp / (tp + fp + fn_)));
        out.acc.push((tp + fn_ > 0.0).then(|| tp / (tp + fn_)));
        let f1 = if tp + fp + fn_ == 0.0 {
            None
        } else if tp == 0.0 {
            Some(0.0)
        } else {
            let p = tp / (tp + fp);
            let r = tp / (tp + fn_);
            Some(2.0 * p * r / (p + r))
        };
        out.f1.push(f1);
    }
    out.pixel_acc = trace as f64 / total as f64;
    out
}

fn opt_err(a: Option<f64>, b: Option<f64>) -> f64 {
    match (a, b) {
        (Some(x), Some(y)) => (x - y).abs(),
        (None, None) => 0.0,
        _ => f64::INFINITY,
    }
}

/// Outcome of one oracle family: instances checked and the worst deviation.
#[derive(Debug)]
pub struct OracleResult {
    pub name: &'static str,
    pub instances: usize,
    pub max_error: f64,
}

impl OracleResult {
    pub fn passed(&self) -> bool {
        self.instances >= INSTANCES && self.max_error <= ORACLE_TOL
    }
}

fn family(
    name: &'static str,
    seed: u64,
    mut one: impl FnMut(&mut ChaCha8Rng) -> f64,
) -> OracleResult {
    let mut r = rng(seed);
    let max_error = (0..INSTANCES).map(|_| one(&mut r)).fold(0.0, f64::max);
    OracleResult {
        name,
        instances: INSTANCES,
        max_error,
    }
}

pub fn check_loss_m(seed: u64) -> OracleResult {
    family("loss_m", seed, |r| {
        let (k, h, w) = (r.gen_range(2..6), r.gen_range(1..6), r.gen_range(1..6));
        let logits = random_map(r, k, h, w, 4.0);
        let label = random_label(r, k, h, w);
        (loss_m(&logits, &label).unwrap().value - oracle_loss_m(&logits, &label)).abs()
    })
}

pub fn check_loss_s(seed: u64) -> OracleResult {
    family("loss_s", seed, |r| {
        let (k, h, w) = (r.gen_range(2..6), r.gen_range(1..6), r.gen_range(1..6));
        let pm = random_map(r, k, h, w, 4.0);
        let ps = random_map(r, k, h, w, 4.0);
        let label = random_label(r, k, h, w);
        let mask = build_mask(&pm, &label).unwrap();
        let want = oracle_mask(&pm, &label);
        let mask_err = mask
            .targets
            .data
            .iter()
            .zip(&want.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        let loss_err = (loss_s(&ps, &mask).unwrap().value - oracle_loss_s(&ps, &want)).abs();
        mask_err.max(loss_err)
    })
}

pub fn check_loss_c(seed: u64) -> OracleResult {
    family("loss_c", seed, |r| {
        let (d, h, w) = (r.gen_range(1..8), r.gen_range(1..5), r.gen_range(1..5));
        let f1 = random_map(r, d, h, w, 1.0);
        let f2 = random_map(r, d, h, w, 1.0);
        let reference = random_map(r, d, h, w, 1.0);
        let c1 = channel_cosines(&f1, &reference);
        let c2 = channel_cosines(&f2, &reference);
        let cos_err = c1
            .iter()
            .chain(&c2)
            .zip(
                oracle_channel_cosines(&f1, &reference)
                    .iter()
                    .chain(&oracle_channel_cosines(&f2, &reference)),
            )
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        let v = loss_c(&ConsistencyPair {
            c1: c1.clone(),
            c2: c2.clone(),
        })
        .unwrap()
        .value;
        cos_err.max((v - oracle_loss_c(&c1, &c2)).abs())
    })
}

pub fn check_pooling(seed: u64) -> OracleResult {
    family("pooling", seed, |r| {
        let (c, h, w) = (r.gen_range(1..4), r.gen_range(1..14), r.gen_range(1..14));
        let size = [1, 3, 5, 7, 11][r.gen_range(0..5)];
        let x = random_map(r, c, h, w, 2.0);
        avg_pool_same(&x, size)
            .data
            .iter()
            .zip(&oracle_pool(&x, size).data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    })
}

pub fn check_ranking(seed: u64) -> OracleResult {
    family("cosine ranking", seed, |r| {
        let n = r.gen_range(2..=4);
        let (d, h, w) = (r.gen_range(1..5), r.gen_range(1..5), r.gen_range(1..5));
        let mut mods: Vec<Modality> = Modality::ALL.to_vec();
        while mods.len() > n {
            mods.remove(r.gen_range(0..mods.len()));
        }
        let mut feats: Vec<(Modality, Map)> = mods
            .iter()
            .map(|&m| (m, random_map(r, d, h, w, 1.0)))
            .collect();
        if n > 2 && r.gen_bool(0.3) {
            // exact tie between two modalities exercises the tie-break
            feats[1].1 = feats[0].1.clone();
        }
        let reference = random_map(r, d, h, w, 1.0);
        let (scores, order) = oracle_ranking(&feats, &reference);
        let got = rank_modalities(
            &FeatureSet::new(feats.clone()).unwrap(),
            &SemanticFeature {
                feature: reference,
                contributing: mods.iter().copied().collect::<ModalitySet>(),
            },
        )
        .unwrap();
        let structure_ok = got.order == order
            && got.selected == (order[0], order[n - 1])
            && got.remaining == order[1..n - 1].to_vec();
        if !structure_ok {
            return f64::INFINITY;
        }
        feats
            .iter()
            .zip(&scores)
            .map(|((m, _), s)| (got.score(*m).unwrap() - s).abs())
            .fold(0.0, f64::max)
    })
}

pub fn check_confusion(seed: u64) -> OracleResult {
    family("confusion metrics", seed, |r| {
        let k = r.gen_range(2..6);
        let (h, w) = (r.gen_range(1..7), r.gen_range(1..7));
        let label = random_label(r, k, h, w);
        let pred: Vec<u16> = (0..h * w).map(|_| r.gen_range(0..k as u16)).collect();
        let mut cm = ConfusionMatrix::new(k);
        cm.accumulate(&pred, &label).unwrap();
        let mut counts = vec![vec![0u64; k]; k];
        for y in 0..h {
            for x in 0..w {
                counts[label.at(y, x) as usize][pred[y * w + x] as usize] += 1;
            }
        }
        for (t, row) in counts.iter().enumerate() {
            for (p, &n) in row.iter().enumerate() {
                if cm.get(t, p) != n {
                    return f64::INFINITY;
                }
            }
        }
        let m = metrics(&cm).unwrap();
        let o = oracle_metrics(&counts);
        let mut err = (m.pixel_acc - o.pixel_acc).abs();
        for c in 0..k {
            err = err
                .max(opt_err(m.per_class[c].iou, o.iou[c]))
                .max(opt_err(m.per_class[c].f1, o.f1[c]))
                .max(opt_err(m.per_class[c].acc, o.acc[c]));
        }
        err
    })
}

pub fn all_oracles(seed: u64) -> Vec<OracleResult> {
    vec![
        check_loss_m(seed),
        check_loss_s(seed + 1),
        check_loss_c(seed + 2),
        check_pooling(seed + 3),
        check_ranking(seed + 4),
        check_confusion(seed + 5),
    ]
}

/// A small model trained for two epochs on four modalities, with held-out
/// samples to evaluate on.
pub fn tiny_trained() -> (magic::MagicModel, Vec<magic::data::ModalitySample>) {
    use magic::data::{synthesize, SceneConfig};
    use magic::trainer::{train, TrainConfig};
    let scene = SceneConfig {
        height: 16,
        width: 16,
        classes: 4,
        ..SceneConfig::default()
    };
    let mut all = synthesize(31, 10, &scene).unwrap();
    let eval = all.split_off(6);
    let cfg = TrainConfig {
        epochs: 2,
        warmup_epochs: 1,
        base_lr: 2e-3,
        feature_dim: 4,
        seed: 3,
        ..TrainConfig::default()
    };
    let (state, _) = train(&all, &cfg, None, None).unwrap();
    (state.model, eval)
}
