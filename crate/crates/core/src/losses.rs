//! Supervision, selection and consistency losses.
//!
//! The two cross-entropies average over pixels so that the loss weights do
//! not depend on image size.

use crate::asm::{ConsistencyPair, SupervisionMask};
use crate::data::LabelMap;
use crate::error::{MagicError, Result};
use crate::tensor::Map;

pub const DEFAULT_LAMBDA: f64 = 0.05;
pub const DEFAULT_BETA: f64 = 2.0;
/// Added to each channel weight before normalising in the consistency loss.
pub const CONSISTENCY_EPS: f64 = 1e-8;

/// Softmax over channels at flat pixel index `i`.
pub fn softmax_at(logits: &Map, i: usize, out: &mut [f64]) {
    let n = logits.plane();
    let max = (0..logits.c)
        .map(|c| logits.data[c * n + i])
        .fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (c, o) in out.iter_mut().enumerate().take(logits.c) {
        *o = (logits.data[c * n + i] - max).exp();
        sum += *o;
    }
    out.iter_mut().take(logits.c).for_each(|o| *o /= sum);
}

/// A scalar loss and its gradient w.r.t. the logits.
#[derive(Clone, Debug)]
pub struct LossGrad {
    pub value: f64,
    pub grad: Map,
}

fn check_finite(logits: &Map) -> Result<()> {
    if !logits.is_finite() {
        return Err(MagicError::Numeric("non-finite logits".into()));
    }
    Ok(())
}

/// Mean over pixels of `-sum_k t_k log softmax(logits)_k`.
pub fn soft_cross_entropy(logits: &Map, targets: &Map) -> Result<LossGrad> {
    check_finite(logits)?;
    if !logits.same_shape(targets) {
        return Err(MagicError::arg("logits and targets differ in shape"));
    }
    let n = logits.plane();
    let inv_n = 1.0 / n as f64;
    let mut grad = logits.zeros_like();
    let mut p = vec![0.0; logits.c];
    let mut total = 0.0;
    for i in 0..n {
        softmax_at(logits, i, &mut p);
        for c in 0..logits.c {
            let t = targets.data[c * n + i];
            if t != 0.0 {
                total -= t * p[c].max(f64::MIN_POSITIVE).ln();
            }
            grad.data[c * n + i] = (p[c] - t) * inv_n;
        }
    }
    Ok(LossGrad {
        value: total * inv_n,
        grad,
    })
}

/// Cross-entropy of the main prediction against the label.
pub fn loss_m(pm_logits: &Map, label: &LabelMap) -> Result<LossGrad> {
    check_finite(pm_logits)?;
    if (pm_logits.h, pm_logits.w) != (label.h, label.w) {
        return Err(MagicError::arg("logits and label differ in size"));
    }
    let k = pm_logits.c;
    let n = pm_logits.plane();
    let inv_n = 1.0 / n as f64;
    let mut grad = pm_logits.zeros_like();
    let mut p = vec![0.0; k];
    let mut total = 0.0;
    for i in 0..n {
        let y = label.data[i] as usize;
        if y >= k {
            return Err(MagicError::arg(format!(
                "label {y} out of range for {k} classes"
            )));
        }
        // log-sum-exp form keeps saturated logits exact
        let max = (0..k)
            .map(|c| pm_logits.data[c * n + i])
            .fold(f64::NEG_INFINITY, f64::max);
        let lse = max
            + (0..k)
                .map(|c| (pm_logits.data[c * n + i] - max).exp())
                .sum::<f64>()
                .ln();
        total += lse - pm_logits.data[y * n + i];
        softmax_at(pm_logits, i, &mut p);
        for c in 0..k {
            let t = if c == y { 1.0 } else { 0.0 };
            grad.data[c * n + i] = (p[c] - t) * inv_n;
        }
    }
    Ok(LossGrad {
        value: total * inv_n,
        grad,
    })
}

/// Cross-entropy of the salient prediction against the supervision mask.
pub fn loss_s(ps_logits: &Map, mask: &SupervisionMask) -> Result<LossGrad> {
    soft_cross_entropy(ps_logits, &mask.targets)
}

/// Consistency loss value and gradients w.r.t. `c1` and `c2`.
#[derive(Clone, Debug)]
pub struct ConsistencyLoss {
    pub value: f64,
    pub grad_c1: Vec<f64>,
    pub grad_c2: Vec<f64>,
}

/// Map cosines in `[-1, 1]` to a distribution over channels.
pub fn correlation_distribution(c: &[f64]) -> Vec<f64> {
    let t: Vec<f64> = c
        .iter()
        .map(|v| (v + 1.0) / 2.0 + CONSISTENCY_EPS)
        .collect();
    let s: f64 = t.iter().sum();
    t.into_iter().map(|v| v / s).collect()
}

/// Symmetric divergence `sum_d q1 log(q1/m) + q2 log(q2/m)`, `m = (q1+q2)/2`,
/// between the channel distributions of the two correlation vectors.
pub fn loss_c(pair: &ConsistencyPair) -> Result<ConsistencyLoss> {
    let d = pair.c1.len();
    if d == 0 || pair.c2.len() != d {
        return Err(MagicError::arg(
            "consistency vectors must be non-empty and equal length",
        ));
    }
    if pair.c1.iter().chain(&pair.c2).any(|v| !v.is_finite()) {
        return Err(MagicError::Numeric("non-finite correlation".into()));
    }
    let t1: Vec<f64> = pair
        .c1
        .iter()
        .map(|v| (v + 1.0) / 2.0 + CONSISTENCY_EPS)
        .collect();
    let t2: Vec<f64> = pair
        .c2
        .iter()
        .map(|v| (v + 1.0) / 2.0 + CONSISTENCY_EPS)
        .collect();
    let (s1, s2): (f64, f64) = (t1.iter().sum(), t2.iter().sum());
    let q1: Vec<f64> = t1.iter().map(|v| v / s1).collect();
    let q2: Vec<f64> = t2.iter().map(|v| v / s2).collect();

    let mut value = 0.0;
    let mut g1 = vec![0.0; d];
    let mut g2 = vec![0.0; d];
    for i in 0..d {
        let m = 0.5 * (q1[i] + q2[i]);
        let (l1, l2) = ((q1[i] / m).ln(), (q2[i] / m).ln());
        value += q1[i] * l1 + q2[i] * l2;
        g1[i] = l1;
        g2[i] = l2;
    }
    // through q = t / sum(t), then dt/dc = 1/2
    let back = |g: &[f64], q: &[f64], s: f64| -> Vec<f64> {
        let inner: f64 = g.iter().zip(q).map(|(a, b)| a * b).sum();
        g.iter().map(|gi| 0.5 * (gi - inner) / s).collect()
    };
    Ok(ConsistencyLoss {
        value,
        grad_c1: back(&g1, &q1, s1),
        grad_c2: back(&g2, &q2, s2),
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub l_m: f64,
    pub l_s: f64,
    pub l_c: f64,
    pub total: f64,
    pub lambda: f64,
    pub beta: f64,
}

pub fn total_loss(l_m: f64, l_s: f64, l_c: f64, lambda: f64, beta: f64) -> LossBreakdown {
    LossBreakdown {
        l_m,
        l_s,
        l_c,
        total: l_m + lambda * l_s + beta * l_c,
        lambda,
        beta,
    }
}
