//! Finite-difference helpers shared by unit tests.

use rand::Rng;

use crate::tensor::Map;

pub(crate) fn random_map<R: Rng>(rng: &mut R, c: usize, h: usize, w: usize) -> Map {
    Map::from_vec(
        c,
        h,
        w,
        (0..c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

/// Two-point central difference of `f` w.r.t. every entry of `x`.
pub(crate) fn numeric_grad(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let plus = f(&probe);
            probe[i] = x[i] - h;
            let minus = f(&probe);
            probe[i] = x[i];
            (plus - minus) / (2.0 * h)
        })
        .collect()
}

/// Max over entries of `|a - n| / max(|a|, |n|, 1e-3)`.
pub(crate) fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-3))
        .fold(0.0, f64::max)
}

/// Fourth-order central difference, for compositions whose curvature makes
/// the two-point form's `O(h^2)` error exceed the tolerance at `h = 1e-3`.
pub(crate) fn numeric_grad4(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let mut at = |k: f64| {
                probe[i] = x[i] + k * h;
                f(&probe)
            };
            let (p1, m1, p2, m2) = (at(1.0), at(-1.0), at(2.0), at(-2.0));
            probe[i] = x[i];
            crate::gradcheck::central_difference(p1, m1, p2, m2, h)
        })
        .collect()
}
