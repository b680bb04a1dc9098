use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numkernel::Matrix;

pub const KMEANS_MAX_ITER: usize = 300;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub assignments: Vec<usize>,
    /// `k × d`.
    pub centroids: Matrix,
    /// Within-cluster sum of squares after each assignment step.
    pub objective: Vec<f64>,
    pub converged: bool,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(x: &[f64], centroids: &Matrix) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for c in 0..centroids.rows() {
        let d = sq_dist(x, centroids.row(c));
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn plus_plus_init(x: &Matrix, k: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let n = x.rows();
    let mut centroids = Matrix::zeros(k, x.cols());
    centroids.row_mut(0).copy_from_slice(x.row(rng.random_range(0..n)));
    let mut d2: Vec<f64> = (0..n).map(|r| sq_dist(x.row(r), centroids.row(0))).collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random_range(0.0..total);
            let mut acc = 0.0;
            let mut chosen = n - 1;
            for (r, &d) in d2.iter().enumerate() {
                acc += d;
                if acc > target {
                    chosen = r;
                    break;
                }
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centroids.row_mut(c).copy_from_slice(x.row(pick));
        for (r, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(x.row(r), centroids.row(c)));
        }
    }
    centroids
}

/// Seeded k-means++ followed by Lloyd iterations until assignments stop changing.
pub fn kmeans(x: &Matrix, k: usize, seed: u64, max_iter: usize) -> Result<KMeansResult> {
    if k == 0 || k > x.rows() {
        return Err(Error::usage(format!("k = {k} must lie in 1..={}", x.rows())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = plus_plus_init(x, k, &mut rng);
    let mut assignments: Vec<usize> = Vec::new();
    let mut objective = Vec::new();
    let mut converged = false;
    for _ in 0..max_iter.max(1) {
        let mut wcss = 0.0;
        let next: Vec<usize> = x
            .iter_rows()
            .map(|row| {
                let (c, d) = nearest(row, &centroids);
                wcss += d;
                c
            })
            .collect();
        objective.push(wcss);
        if next == assignments {
            converged = true;
            break;
        }
        assignments = next;
        let mut sums = Matrix::zeros(k, x.cols());
        let mut counts = vec![0usize; k];
        for (r, &c) in assignments.iter().enumerate() {
            counts[c] += 1;
            for (s, v) in sums.row_mut(c).iter_mut().zip(x.row(r)) {
                *s += v;
            }
        }
        for c in 0..k {
            // an emptied cluster keeps its previous centroid
            if counts[c] > 0 {
                let inv = 1.0 / counts[c] as f64;
                for (dst, s) in centroids.row_mut(c).iter_mut().zip(sums.row(c)) {
                    *dst = s * inv;
                }
            }
        }
    }
    Ok(KMeansResult {
        assignments,
        centroids,
        objective,
        converged,
    })
}
