use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkernel::Matrix;

/// Middle value, or the mean of the two middle values. Sorts `values` in place.
pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    })
}

/// Sample Pearson correlation.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::usage(format!(
            "pearson needs two equal-length inputs of length ≥ 2, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::data("pearson is undefined for a constant input"));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LinearProbeConfig {
    pub epochs: usize,
    pub lr: f64,
}

impl Default for LinearProbeConfig {
    fn default() -> Self {
        Self { epochs: 500, lr: 0.5 }
    }
}

/// Signed per-class concept weights, each row scaled to unit L1 norm.
#[derive(Debug, Clone, PartialEq)]
pub struct Contributions {
    /// `classes × k`.
    pub weights: Matrix,
    pub train_accuracy: f64,
}

/// Multinomial logistic regression by full-batch gradient descent from zero weights.
pub fn linear_probe_contributions(
    activations: &Matrix,
    labels: &[usize],
    cfg: &LinearProbeConfig,
) -> Result<Contributions> {
    let (n, k) = activations.shape();
    if labels.len() != n || n == 0 {
        return Err(Error::CountMismatch(format!(
            "{n} activation rows but {} labels",
            labels.len()
        )));
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut present = vec![false; classes];
    labels.iter().for_each(|&l| present[l] = true);
    if present.iter().filter(|p| **p).count() < 2 {
        return Err(Error::data("linear probe needs at least two classes"));
    }
    let mut w = Matrix::zeros(classes, k);
    let mut b = vec![0.0; classes];
    let inv_n = 1.0 / n as f64;
    let mut probs = vec![0.0; classes];
    for _ in 0..cfg.epochs {
        let mut gw = Matrix::zeros(classes, k);
        let mut gb = vec![0.0; classes];
        for (r, &y) in labels.iter().enumerate() {
            let x = activations.row(r);
            logits_into(&w, &b, x, &mut probs);
            softmax_in_place(&mut probs);
            probs[y] -= 1.0;
            for c in 0..classes {
                let g = probs[c] * inv_n;
                gb[c] += g;
                for (gv, &xv) in gw.row_mut(c).iter_mut().zip(x) {
                    *gv += g * xv;
                }
            }
        }
        w.axpy(-cfg.lr, &gw)?;
        for (bv, g) in b.iter_mut().zip(&gb) {
            *bv -= cfg.lr * g;
        }
    }
    if !w.is_finite() {
        return Err(Error::numeric("linear probe diverged"));
    }
    let mut hits = 0;
    for (r, &y) in labels.iter().enumerate() {
        logits_into(&w, &b, activations.row(r), &mut probs);
        let mut best = 0;
        for c in 1..classes {
            if probs[c] > probs[best] {
                best = c;
            }
        }
        hits += usize::from(best == y);
    }
    for c in 0..classes {
        let row = w.row_mut(c);
        let l1: f64 = row.iter().map(|v| v.abs()).sum();
        if l1 > 0.0 {
            row.iter_mut().for_each(|v| *v /= l1);
        }
    }
    Ok(Contributions {
        weights: w,
        train_accuracy: hits as f64 * inv_n,
    })
}

fn logits_into(w: &Matrix, b: &[f64], x: &[f64], out: &mut [f64]) {
    for (c, o) in out.iter_mut().enumerate() {
        *o = b[c] + w.row(c).iter().zip(x).map(|(a, v)| a * v).sum::<f64>();
    }
}

fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        s += *x;
    }
    v.iter_mut().for_each(|x| *x /= s);
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn pearson_anchors() {
        let x = [1.0, 2.0, 4.0, 7.0];
        assert!((pearson(&x, &x).unwrap() - 1.0).abs() < 1e-15);
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!((pearson(&x, &neg).unwrap() + 1.0).abs() < 1e-15);
        assert!(pearson(&x, &[1.0; 4]).is_err());
        assert!(pearson(&[1.0], &[1.0]).is_err());
        assert!(pearson(&x, &[1.0, 2.0]).is_err());
    }

    #[test]
    fn medians() {
        assert_eq!(median(&mut [0.5, 0.1, 0.3]), Some(0.3));
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&mut []), None);
    }

    #[test]
    fn discriminative_concept_dominates() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 200;
        let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let mut data = Vec::new();
        for &l in &labels {
            data.push(if l == 1 { 1.0 } else { 0.0 } + rng.random_range(-0.05..0.05));
            data.push(rng.random_range(0.0..1.0));
            data.push(rng.random_range(0.0..1.0));
        }
        let x = Matrix::new(n, 3, data).unwrap();
        let c = linear_probe_contributions(&x, &labels, &LinearProbeConfig::default()).unwrap();
        for class in 0..2 {
            let row = c.weights.row(class);
            assert!((row.iter().map(|v| v.abs()).sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(row[0].abs() > row[1].abs() && row[0].abs() > row[2].abs(), "{row:?}");
        }
        assert!(c.weights.get(1, 0) > 0.0);
        assert_eq!(c.train_accuracy, 1.0);
        assert!(linear_probe_contributions(&x, &vec![0; n], &LinearProbeConfig::default()).is_err());
    }

    proptest! {
        #[test]
        fn pearson_affine_invariant(
            xs in proptest::collection::vec(-10.0f64..10.0, 3..40),
            a in 0.1f64..10.0, b in -5.0f64..5.0, c in 0.1f64..10.0, d in -5.0f64..5.0,
        ) {
            let ys: Vec<f64> = xs.iter().enumerate().map(|(i, v)| v * 0.5 + (i as f64).sin()).collect();
            if let Ok(base) = pearson(&xs, &ys) {
                let xt: Vec<f64> = xs.iter().map(|v| a * v + b).collect();
                let yt: Vec<f64> = ys.iter().map(|v| c * v + d).collect();
                let moved = pearson(&xt, &yt).unwrap();
                prop_assert!((base - moved).abs() < 1e-10, "{base} vs {moved}");
                prop_assert!((-1.0..=1.0).contains(&base));
            }
        }
    }
}
