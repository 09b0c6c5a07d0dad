//! Arbitrary-modal selection: rank modality features against the semantic
//! feature, build the supervision mask for the salient prediction, and the
//! per-channel correlations used by the consistency loss. Training only.

use std::fmt::Write as _;

use crate::backbone::FeatureSet;
use crate::data::LabelMap;
use crate::error::{MagicError, Result};
use crate::losses::softmax_at;
use crate::mam::SemanticFeature;
use crate::modality::Modality;
use crate::tensor::{cosine, dot, norm, Map};

#[derive(Clone, Debug, PartialEq)]
pub struct RankingResult {
    /// Cosine score per modality, registry order.
    pub scores: Vec<(Modality, f64)>,
    /// Modalities by descending score; ties go to the lower registry index.
    pub order: Vec<Modality>,
    /// `(robust, fragile)`: first and last of `order`.
    pub selected: (Modality, Modality),
    /// Everything between the two selected, in rank order.
    pub remaining: Vec<Modality>,
}

impl RankingResult {
    pub fn score(&self, m: Modality) -> Option<f64> {
        self.scores.iter().find(|(k, _)| *k == m).map(|(_, s)| *s)
    }

    pub fn csv_header(modalities: &[Modality]) -> String {
        let mut s = String::from("step");
        for m in modalities {
            let _ = write!(s, ",score_{m}");
        }
        s.push_str(",robust,fragile");
        s
    }

    pub fn csv_row(&self, step: u64) -> String {
        let mut s = step.to_string();
        for (_, v) in &self.scores {
            let _ = write!(s, ",{v}");
        }
        let _ = write!(s, ",{},{}", self.selected.0, self.selected.1);
        s
    }
}

pub(crate) fn rank_against(features: &FeatureSet, reference: &Map) -> Result<RankingResult> {
    if features.len() < 2 {
        return Err(MagicError::arg(format!(
            "ranking needs at least 2 modalities, got {}",
            features.len()
        )));
    }
    let scores: Vec<(Modality, f64)> = features
        .iter()
        .map(|(m, f)| (m, cosine(&f.data, &reference.data)))
        .collect();
    let mut order: Vec<(Modality, f64)> = scores.clone();
    order.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let order: Vec<Modality> = order.into_iter().map(|(m, _)| m).collect();
    let selected = (order[0], order[order.len() - 1]);
    let remaining = order[1..order.len() - 1].to_vec();
    Ok(RankingResult {
        scores,
        order,
        selected,
        remaining,
    })
}

/// Score each modality by whole-tensor cosine similarity to `f_se`.
/// Zero-norm features score 0.
pub fn rank_modalities(features: &FeatureSet, semantic: &SemanticFeature) -> Result<RankingResult> {
    rank_against(features, &semantic.feature)
}

/// Per-pixel targets for the salient prediction.
#[derive(Clone, Debug, PartialEq)]
pub struct SupervisionMask {
    /// `(K, H, W)` probability vectors.
    pub targets: Map,
    /// True where `argmax(P_m)` equals the label.
    pub agree: Vec<bool>,
}

/// Soft targets where the main prediction agrees with the label, one-hot
/// labels elsewhere. The logits are read as constants.
pub fn build_mask(pm_logits: &Map, label: &LabelMap) -> Result<SupervisionMask> {
    if (pm_logits.h, pm_logits.w) != (label.h, label.w) {
        return Err(MagicError::arg(format!(
            "logits are {}x{} but label is {}x{}",
            pm_logits.h, pm_logits.w, label.h, label.w
        )));
    }
    let k = pm_logits.c;
    if let Some(bad) = label.data.iter().find(|&&l| l as usize >= k) {
        return Err(MagicError::arg(format!(
            "label {bad} out of range for {k} classes"
        )));
    }
    let pred = pm_logits.argmax_channels();
    let n = pm_logits.plane();
    let mut targets = pm_logits.zeros_like();
    let mut agree = vec![false; n];
    let mut probs = vec![0.0; k];
    for i in 0..n {
        let y = label.data[i] as usize;
        if pred[i] as usize == y {
            agree[i] = true;
            softmax_at(pm_logits, i, &mut probs);
            for (c, p) in probs.iter().enumerate() {
                targets.data[c * n + i] = *p;
            }
        } else {
            targets.data[y * n + i] = 1.0;
        }
    }
    Ok(SupervisionMask { targets, agree })
}

/// Which aggregate the consistency correlations are measured against.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ConsistencyReference {
    #[default]
    Salient,
    Semantic,
}

impl ConsistencyReference {
    pub fn name(self) -> &'static str {
        match self {
            ConsistencyReference::Salient => "salient",
            ConsistencyReference::Semantic => "semantic",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "salient" => Ok(ConsistencyReference::Salient),
            "semantic" => Ok(ConsistencyReference::Semantic),
            _ => Err(MagicError::config(format!(
                "unknown consistency reference '{s}'"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConsistencyPair {
    pub c1: Vec<f64>,
    pub c2: Vec<f64>,
}

/// Cosine similarity between matching channels of `x` and `reference`.
pub fn channel_cosines(x: &Map, reference: &Map) -> Vec<f64> {
    (0..x.c)
        .map(|d| cosine(x.channel(d), reference.channel(d)))
        .collect()
}

/// Backward of [`channel_cosines`]: returns `(grad_x, grad_reference)`.
pub(crate) fn channel_cosines_backward(x: &Map, reference: &Map, g: &[f64]) -> (Map, Map) {
    let mut gx = x.zeros_like();
    let mut gr = reference.zeros_like();
    for d in 0..x.c {
        let a = x.channel(d);
        let b = reference.channel(d);
        let (na, nb) = (norm(a), norm(b));
        if na == 0.0 || nb == 0.0 {
            continue;
        }
        let c = dot(a, b) / (na * nb);
        let inv = 1.0 / (na * nb);
        let ga = gx.channel_mut(d);
        for i in 0..a.len() {
            ga[i] = g[d] * (b[i] * inv - c * a[i] / (na * na));
        }
        let gb = gr.channel_mut(d);
        for i in 0..a.len() {
            gb[i] = g[d] * (a[i] * inv - c * b[i] / (nb * nb));
        }
    }
    (gx, gr)
}

pub fn consistency_pair(remaining: &[&Map], reference: &Map) -> Result<ConsistencyPair> {
    if remaining.len() != 2 {
        return Err(MagicError::arg(format!(
            "consistency needs exactly 2 remaining features, got {}",
            remaining.len()
        )));
    }
    if remaining.iter().any(|f| !f.same_shape(reference)) {
        return Err(MagicError::arg(
            "remaining features must match the reference shape",
        ));
    }
    if reference.c == 0 {
        return Err(MagicError::arg("feature width must be at least 1"));
    }
    Ok(ConsistencyPair {
        c1: channel_cosines(remaining[0], reference),
        c2: channel_cosines(remaining[1], reference),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::modality::ModalitySet;
    use crate::testutil::{max_rel_err, numeric_grad, random_map};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn semantic(f: Map) -> SemanticFeature {
        SemanticFeature {
            feature: f,
            contributing: ModalitySet::all(),
        }
    }

    #[test]
    fn exact_match_ranks_first_and_negation_last() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let se = random_map(&mut rng, 3, 4, 4);
        let mut neg = se.clone();
        neg.scale(-1.0);
        let fs = FeatureSet::new(vec![
            (Modality::Rgb, random_map(&mut rng, 3, 4, 4)),
            (Modality::Depth, neg),
            (Modality::Event, se.clone()),
            (Modality::Lidar, random_map(&mut rng, 3, 4, 4)),
        ])
        .unwrap();
        let r = rank_modalities(&fs, &semantic(se)).unwrap();
        assert!((r.score(Modality::Event).unwrap() - 1.0).abs() < 1e-12);
        assert!((r.score(Modality::Depth).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(r.selected, (Modality::Event, Modality::Depth));
        assert_eq!(r.remaining.len(), 2);
    }

    #[test]
    fn ties_break_by_registry_index_and_zero_norm_scores_zero() {
        let f = Map::from_vec(1, 1, 2, vec![1.0, 0.0]).unwrap();
        let fs = FeatureSet::new(vec![
            (Modality::Lidar, f.clone()),
            (Modality::Depth, f.clone()),
            (Modality::Rgb, Map::zeros(1, 1, 2)),
        ])
        .unwrap();
        let r = rank_modalities(&fs, &semantic(f)).unwrap();
        assert_eq!(
            r.order,
            vec![Modality::Depth, Modality::Lidar, Modality::Rgb]
        );
        assert_eq!(r.score(Modality::Rgb), Some(0.0));
    }

    #[test]
    fn two_modalities_have_empty_remainder_and_one_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let se = random_map(&mut rng, 2, 2, 2);
        let fs = FeatureSet::new(vec![
            (Modality::Rgb, random_map(&mut rng, 2, 2, 2)),
            (Modality::Event, random_map(&mut rng, 2, 2, 2)),
        ])
        .unwrap();
        let r = rank_modalities(&fs, &semantic(se.clone())).unwrap();
        assert!(r.remaining.is_empty());
        assert_ne!(r.selected.0, r.selected.1);
        let one = FeatureSet::new(vec![(Modality::Rgb, se.clone())]).unwrap();
        assert!(rank_modalities(&one, &semantic(se)).is_err());
    }

    #[test]
    fn mask_agreement_extremes() {
        let label = LabelMap {
            h: 1,
            w: 2,
            data: vec![0, 2],
        };
        // argmax = [0, 2]: agree everywhere
        let logits = Map::from_vec(3, 1, 2, vec![2.0, 0.0, 1.0, 0.5, 0.0, 3.0]).unwrap();
        let m = build_mask(&logits, &label).unwrap();
        assert_eq!(m.agree, vec![true, true]);
        let mut p = vec![0.0; 3];
        softmax_at(&logits, 0, &mut p);
        assert!((m.targets.at(1, 0, 0) - p[1]).abs() < 1e-15);

        // argmax = [1, 0]: disagree everywhere
        let logits = Map::from_vec(3, 1, 2, vec![0.0, 5.0, 3.0, 0.0, 0.0, 1.0]).unwrap();
        let m = build_mask(&logits, &label).unwrap();
        assert_eq!(m.agree, vec![false, false]);
        assert_eq!(m.targets.data, vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn mask_shape_mismatch() {
        let label = LabelMap {
            h: 2,
            w: 2,
            data: vec![0; 4],
        };
        assert!(build_mask(&Map::zeros(3, 2, 3), &label).is_err());
    }

    #[test]
    fn consistency_pair_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let r = random_map(&mut rng, 4, 3, 3);
        let a = random_map(&mut rng, 4, 3, 3);
        let p = consistency_pair(&[&a, &a], &r).unwrap();
        assert_eq!(p.c1, p.c2);

        let mut b = random_map(&mut rng, 4, 3, 3);
        b.channel_mut(2).copy_from_slice(r.channel(2));
        let p = consistency_pair(&[&b, &a], &r).unwrap();
        assert!((p.c1[2] - 1.0).abs() < 1e-12);
        assert!(consistency_pair(&[&a], &r).is_err());
    }

    #[test]
    fn ranking_csv_row() {
        let r = RankingResult {
            scores: vec![(Modality::Rgb, 0.5), (Modality::Depth, -0.25)],
            order: vec![Modality::Rgb, Modality::Depth],
            selected: (Modality::Rgb, Modality::Depth),
            remaining: vec![],
        };
        assert_eq!(
            RankingResult::csv_header(&[Modality::Rgb, Modality::Depth]),
            "step,score_rgb,score_depth,robust,fragile"
        );
        assert_eq!(r.csv_row(3), "3,0.5,-0.25,rgb,depth");
    }

    #[test]
    fn cosine_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = random_map(&mut rng, 3, 4, 4);
        let r = random_map(&mut rng, 3, 4, 4);
        let g: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let weighted = |x: &Map, r: &Map| {
            channel_cosines(x, r)
                .iter()
                .zip(&g)
                .map(|(c, w)| c * w)
                .sum::<f64>()
        };
        let (gx, gr) = channel_cosines_backward(&x, &r, &g);
        let nx = numeric_grad(&x.data, 1e-3, |v| {
            weighted(&Map::from_vec(3, 4, 4, v.to_vec()).unwrap(), &r)
        });
        let nr = numeric_grad(&r.data, 1e-3, |v| {
            weighted(&x, &Map::from_vec(3, 4, 4, v.to_vec()).unwrap())
        });
        assert!(max_rel_err(&gx.data, &nx) < 1e-4);
        assert!(max_rel_err(&gr.data, &nr) < 1e-4);
    }
}
