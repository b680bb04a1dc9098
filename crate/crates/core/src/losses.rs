//! Alignment objective: image→location InfoNCE, Gaussian-kernel concept divergence, and their
//! weighted sum, each with analytic gradients.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkernel::{dot, l2_norm, matmul, matmul_nt, matmul_tn, Matrix};

pub const TAU_MIN: f64 = 1e-3;
pub const TAU_MAX: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContrastiveSpace {
    /// Original `d`-dimensional image and location embeddings.
    Raw,
    /// Projected `k`-dimensional concept activations.
    Concept,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DivergenceVariant {
    /// Mean over all pairs of log-kernel terms.
    AsWritten,
    /// Cauchy–Schwarz form on kernel means: `log K̄aa + log K̄bb − 2 log K̄ab`.
    CsDivergence,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KernelConfig {
    pub sigma: f64,
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self { sigma: 1.0 }
    }
}

impl KernelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma.is_finite() && self.sigma > 0.0) {
            return Err(Error::usage(format!(
                "kernel sigma must be positive, got {}",
                self.sigma
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Weight of the concept divergence term.
    pub lambda: f64,
    pub temperature_init: f64,
    pub contrastive_space: ContrastiveSpace,
    pub divergence_variant: DivergenceVariant,
    pub normalize_before_contrastive: bool,
    /// Averages image→location and location→image InfoNCE when set.
    pub symmetric: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 10.0,
            temperature_init: 0.07,
            contrastive_space: ContrastiveSpace::Raw,
            divergence_variant: DivergenceVariant::AsWritten,
            normalize_before_contrastive: true,
            symmetric: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::usage(format!(
                "lambda must be non-negative, got {}",
                self.lambda
            )));
        }
        if !(TAU_MIN..=TAU_MAX).contains(&self.temperature_init) {
            return Err(Error::usage(format!(
                "temperature_init {} outside [{TAU_MIN}, {TAU_MAX}]",
                self.temperature_init
            )));
        }
        Ok(())
    }
}

/// `N` paired rows on both sides, in raw and concept space.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentBatch {
    pub img_raw: Matrix,
    pub loc_raw: Matrix,
    pub img_concept: Matrix,
    pub loc_concept: Matrix,
}

impl AlignmentBatch {
    pub fn new(img_raw: Matrix, loc_raw: Matrix, img_concept: Matrix, loc_concept: Matrix) -> Result<Self> {
        let n = img_raw.rows();
        for (name, m) in [
            ("loc_raw", &loc_raw),
            ("img_concept", &img_concept),
            ("loc_concept", &loc_concept),
        ] {
            if m.rows() != n {
                return Err(Error::Shape {
                    op: if name == "loc_raw" {
                        "batch loc_raw"
                    } else {
                        "batch concept rows"
                    },
                    left: img_raw.shape(),
                    right: m.shape(),
                });
            }
        }
        if img_raw.cols() != loc_raw.cols() {
            return Err(Error::Shape {
                op: "batch raw dims",
                left: img_raw.shape(),
                right: loc_raw.shape(),
            });
        }
        if img_concept.cols() != loc_concept.cols() {
            return Err(Error::Shape {
                op: "batch concept dims",
                left: img_concept.shape(),
                right: loc_concept.shape(),
            });
        }
        Ok(Self {
            img_raw,
            loc_raw,
            img_concept,
            loc_concept,
        })
    }

    pub fn len(&self) -> usize {
        self.img_raw.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Gradients with respect to every matrix of an [`AlignmentBatch`], plus `log τ`.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchGradients {
    pub img_raw: Matrix,
    pub loc_raw: Matrix,
    pub img_concept: Matrix,
    pub loc_concept: Matrix,
    pub log_tau: f64,
}

impl BatchGradients {
    pub fn zeros_like(batch: &AlignmentBatch) -> Self {
        let z = |m: &Matrix| Matrix::zeros(m.rows(), m.cols());
        Self {
            img_raw: z(&batch.img_raw),
            loc_raw: z(&batch.loc_raw),
            img_concept: z(&batch.img_concept),
            loc_concept: z(&batch.loc_concept),
            log_tau: 0.0,
        }
    }

    fn add_scaled(&mut self, alpha: f64, other: &BatchGradients) -> Result<()> {
        self.img_raw.axpy(alpha, &other.img_raw)?;
        self.loc_raw.axpy(alpha, &other.loc_raw)?;
        self.img_concept.axpy(alpha, &other.img_concept)?;
        self.loc_concept.axpy(alpha, &other.loc_concept)?;
        self.log_tau += alpha * other.log_tau;
        Ok(())
    }
}

/// `exp(−‖x−y‖² / 2σ²)`.
pub fn gaussian_kernel(x: &[f64], y: &[f64], cfg: &KernelConfig) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Shape {
            op: "gaussian_kernel",
            left: (1, x.len()),
            right: (1, y.len()),
        });
    }
    cfg.validate()?;
    Ok((-squared_distance(x, y) / (2.0 * cfg.sigma * cfg.sigma)).exp())
}

fn squared_distance(x: &[f64], y: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (a, b) in x.iter().zip(y) {
        let d = a - b;
        acc += d * d;
    }
    acc
}

/// Row-wise softmax cross-entropy with the diagonal as target.
/// Returns the mean loss and `dL/dlogits`.
pub fn infonce_from_logits(logits: &Matrix) -> Result<(f64, Matrix)> {
    let n = logits.rows();
    if n == 0 || logits.cols() != n {
        return Err(Error::Shape {
            op: "infonce logits",
            left: logits.shape(),
            right: (n, n),
        });
    }
    let inv_n = 1.0 / n as f64;
    let mut loss = 0.0;
    let mut grad = Matrix::zeros(n, n);
    for i in 0..n {
        let row = logits.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for &l in row {
            sum += (l - max).exp();
        }
        let lse = max + sum.ln();
        loss += lse - row[i];
        let g = grad.row_mut(i);
        for (j, &l) in row.iter().enumerate() {
            g[j] = ((l - lse).exp() - if i == j { 1.0 } else { 0.0 }) * inv_n;
        }
    }
    Ok((loss * inv_n, grad))
}

/// `dL/d(log τ) = −Σ_ij dL/dl_ij · l_ij`, taken relative to each row's diagonal logit. The
/// row offsets cancel because each row of `dlogits` sums to zero, and a row of equal
/// logits then contributes exactly nothing.
fn log_tau_grad(logits: &Matrix, dlogits: &Matrix) -> f64 {
    let mut g = 0.0;
    for i in 0..logits.rows() {
        let diag = logits.get(i, i);
        g -= logits
            .row(i)
            .iter()
            .zip(dlogits.row(i))
            .map(|(l, d)| d * (l - diag))
            .sum::<f64>();
    }
    g
}

/// Output of [`infonce`].
#[derive(Debug, Clone, PartialEq)]
pub struct InfoNce {
    pub loss: f64,
    pub grad_a: Matrix,
    pub grad_b: Matrix,
    pub grad_log_tau: f64,
}

/// InfoNCE over logits `a bᵀ / τ`, row `i` of `a` paired with row `i` of `b`.
pub fn infonce(a: &Matrix, b: &Matrix, tau: f64, symmetric: bool) -> Result<InfoNce> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::usage(format!("temperature must be positive, got {tau}")));
    }
    if a.shape() != b.shape() {
        return Err(Error::Shape {
            op: "infonce",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let logits = matmul_nt(a, b)?.scale(1.0 / tau);
    let (mut loss, mut dlogits) = infonce_from_logits(&logits)?;
    let mut grad_log_tau = log_tau_grad(&logits, &dlogits);
    if symmetric {
        let transposed = logits.transpose();
        let (loss_t, dlogits_t) = infonce_from_logits(&transposed)?;
        loss = 0.5 * (loss + loss_t);
        grad_log_tau = 0.5 * (grad_log_tau + log_tau_grad(&transposed, &dlogits_t));
        dlogits = dlogits.scale(0.5);
        dlogits.axpy(0.5, &dlogits_t.transpose())?;
    }
    let ds = dlogits.scale(1.0 / tau);
    Ok(InfoNce {
        loss,
        grad_a: matmul(&ds, b)?,
        grad_b: matmul_tn(&ds, a)?,
        grad_log_tau,
    })
}

fn normalize_rows(m: &Matrix) -> Result<(Matrix, Vec<f64>)> {
    let mut out = m.clone();
    let mut norms = Vec::with_capacity(m.rows());
    for r in 0..m.rows() {
        let row = out.row_mut(r);
        let n = l2_norm(row);
        if !(n > 0.0) {
            return Err(Error::numeric(format!("cannot normalize zero row {r}")));
        }
        row.iter_mut().for_each(|v| *v /= n);
        norms.push(n);
    }
    Ok((out, norms))
}

/// Pulls a gradient taken at normalized rows back to the unnormalized rows.
fn normalize_rows_backward(normalized: &Matrix, norms: &[f64], grad: &Matrix) -> Matrix {
    let mut out = grad.clone();
    for r in 0..out.rows() {
        let y = normalized.row(r);
        let g = out.row_mut(r);
        let proj = dot(y, g);
        for (gv, &yv) in g.iter_mut().zip(y) {
            *gv = (*gv - yv * proj) / norms[r];
        }
    }
    out
}

/// InfoNCE in the configured space, gradients routed to the matching batch matrices.
pub fn infonce_loss(batch: &AlignmentBatch, tau: f64, cfg: &LossConfig) -> Result<(f64, BatchGradients)> {
    if batch.is_empty() {
        return Err(Error::usage("InfoNCE on an empty batch"));
    }
    let (a, b) = match cfg.contrastive_space {
        ContrastiveSpace::Raw => (&batch.img_raw, &batch.loc_raw),
        ContrastiveSpace::Concept => (&batch.img_concept, &batch.loc_concept),
    };
    let (out, ga, gb) = if cfg.normalize_before_contrastive {
        let (an, a_norms) = normalize_rows(a)?;
        let (bn, b_norms) = normalize_rows(b)?;
        let out = infonce(&an, &bn, tau, cfg.symmetric)?;
        let ga = normalize_rows_backward(&an, &a_norms, &out.grad_a);
        let gb = normalize_rows_backward(&bn, &b_norms, &out.grad_b);
        (out, ga, gb)
    } else {
        let out = infonce(a, b, tau, cfg.symmetric)?;
        let (ga, gb) = (out.grad_a.clone(), out.grad_b.clone());
        (out, ga, gb)
    };
    let mut grads = BatchGradients::zeros_like(batch);
    match cfg.contrastive_space {
        ContrastiveSpace::Raw => {
            grads.img_raw = ga;
            grads.loc_raw = gb;
        }
        ContrastiveSpace::Concept => {
            grads.img_concept = ga;
            grads.loc_concept = gb;
        }
    }
    grads.log_tau = out.grad_log_tau;
    Ok((out.loss, grads))
}

/// Concept-space divergence between image-side and location-side activations.
pub fn concept_divergence(
    batch: &AlignmentBatch,
    kcfg: &KernelConfig,
    variant: DivergenceVariant,
) -> Result<(f64, BatchGradients)> {
    kcfg.validate()?;
    if batch.is_empty() {
        return Err(Error::usage("divergence on an empty batch"));
    }
    let (loss, ga, gb) = match variant {
        DivergenceVariant::AsWritten => divergence_as_written(&batch.img_concept, &batch.loc_concept, kcfg.sigma),
        DivergenceVariant::CsDivergence => divergence_cs(&batch.img_concept, &batch.loc_concept, kcfg.sigma),
    };
    if !loss.is_finite() {
        return Err(Error::numeric(format!("concept divergence is {loss}")));
    }
    let mut grads = BatchGradients::zeros_like(batch);
    grads.img_concept = ga;
    grads.loc_concept = gb;
    Ok((loss, grads))
}

/// Double sum over all pairs of log-Gaussian terms, evaluated pair by pair.
fn divergence_as_written(a: &Matrix, b: &Matrix, sigma: f64) -> (f64, Matrix, Matrix) {
    let n = a.rows();
    let k = a.cols();
    let inv_2s2 = 1.0 / (2.0 * sigma * sigma);
    let inv_s2 = 1.0 / (sigma * sigma);
    let inv_n2 = 1.0 / (n * n) as f64;
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            let log_aa = -squared_distance(a.row(i), a.row(j)) * inv_2s2;
            let log_bb = -squared_distance(b.row(i), b.row(j)) * inv_2s2;
            let log_ab = -squared_distance(a.row(i), b.row(j)) * inv_2s2;
            total += log_aa + log_bb - 2.0 * log_ab;
        }
    }
    let mut ga = Matrix::zeros(n, k);
    let mut gb = Matrix::zeros(n, k);
    for i in 0..n {
        let (ai, bi) = (a.row(i), b.row(i));
        let mut acc_a = vec![0.0; k];
        let mut acc_b = vec![0.0; k];
        for j in 0..n {
            let (aj, bj) = (a.row(j), b.row(j));
            for c in 0..k {
                // a_i appears in log K(a_i, a_j), log K(a_j, a_i) and −2 log K(a_i, b_j)
                acc_a[c] += -2.0 * (ai[c] - aj[c]) + 2.0 * (ai[c] - bj[c]);
                acc_b[c] += -2.0 * (bi[c] - bj[c]) + 2.0 * (bi[c] - aj[c]);
            }
        }
        for c in 0..k {
            ga.set(i, c, acc_a[c] * inv_s2 * inv_n2);
            gb.set(i, c, acc_b[c] * inv_s2 * inv_n2);
        }
    }
    (total * inv_n2, ga, gb)
}

fn divergence_cs(a: &Matrix, b: &Matrix, sigma: f64) -> (f64, Matrix, Matrix) {
    let n = a.rows();
    let k = a.cols();
    let inv_2s2 = 1.0 / (2.0 * sigma * sigma);
    let inv_s2 = 1.0 / (sigma * sigma);
    let inv_n2 = 1.0 / (n * n) as f64;
    let kern = |x: &[f64], y: &[f64]| (-squared_distance(x, y) * inv_2s2).exp();
    let (mut kaa, mut kbb, mut kab) = (0.0, 0.0, 0.0);
    for i in 0..n {
        for j in 0..n {
            kaa += kern(a.row(i), a.row(j));
            kbb += kern(b.row(i), b.row(j));
            kab += kern(a.row(i), b.row(j));
        }
    }
    kaa *= inv_n2;
    kbb *= inv_n2;
    kab *= inv_n2;
    let loss = kaa.ln() + kbb.ln() - 2.0 * kab.ln();

    // dK(x, y)/dx = −K (x − y) / σ²
    let mut ga = Matrix::zeros(n, k);
    let mut gb = Matrix::zeros(n, k);
    for i in 0..n {
        let (ai, bi) = (a.row(i), b.row(i));
        let mut acc_a = vec![0.0; k];
        let mut acc_b = vec![0.0; k];
        for j in 0..n {
            let (aj, bj) = (a.row(j), b.row(j));
            let k_aa = kern(ai, aj);
            let k_bb = kern(bi, bj);
            let k_ab = kern(ai, bj);
            let k_ba = kern(aj, bi);
            for c in 0..k {
                acc_a[c] += -2.0 * k_aa * (ai[c] - aj[c]) / kaa + 2.0 * k_ab * (ai[c] - bj[c]) / kab;
                acc_b[c] += -2.0 * k_bb * (bi[c] - bj[c]) / kbb + 2.0 * k_ba * (bi[c] - aj[c]) / kab;
            }
        }
        for c in 0..k {
            ga.set(i, c, acc_a[c] * inv_s2 * inv_n2);
            gb.set(i, c, acc_b[c] * inv_s2 * inv_n2);
        }
    }
    (loss, ga, gb)
}

/// Components of the total objective and its gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct TotalLoss {
    pub total: f64,
    pub infonce: f64,
    pub divergence: f64,
    pub grads: BatchGradients,
}

/// `InfoNCE + λ · divergence`.
pub fn total_loss(batch: &AlignmentBatch, cfg: &LossConfig, tau: f64, kcfg: &KernelConfig) -> Result<TotalLoss> {
    cfg.validate()?;
    let (nce, mut grads) = infonce_loss(batch, tau, cfg)?;
    let (div, div_grads) = concept_divergence(batch, kcfg, cfg.divergence_variant)?;
    grads.add_scaled(cfg.lambda, &div_grads)?;
    Ok(TotalLoss {
        total: nce + cfg.lambda * div,
        infonce: nce,
        divergence: div,
        grads,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkernel::{finite_diff_grad, finite_diff_grad_five_point, grad_check};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::new(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn concept_batch(a: Matrix, b: Matrix) -> AlignmentBatch {
        let n = a.rows();
        AlignmentBatch::new(Matrix::zeros(n, 2), Matrix::zeros(n, 2), a, b).unwrap()
    }

    /// Independent closed form of the as-written divergence: ‖mean(a) − mean(b)‖² / σ².
    fn mean_gap_oracle(a: &Matrix, b: &Matrix, sigma: f64) -> f64 {
        let n = a.rows() as f64;
        (0..a.cols())
            .map(|c| {
                let ma: f64 = a.column(c).iter().sum::<f64>() / n;
                let mb: f64 = b.column(c).iter().sum::<f64>() / n;
                (ma - mb) * (ma - mb)
            })
            .sum::<f64>()
            / (sigma * sigma)
    }

    #[test]
    fn kernel_values() {
        let k1 = KernelConfig { sigma: 1.0 };
        assert_eq!(gaussian_kernel(&[1.0, 2.0], &[1.0, 2.0], &k1).unwrap(), 1.0);
        assert!((gaussian_kernel(&[1.0, 1.0], &[0.0, 0.0], &k1).unwrap() - 0.367_879_441_171_442_3).abs() < 1e-15);
        let k2 = KernelConfig { sigma: 2.0 };
        assert!((gaussian_kernel(&[0.0, 0.0], &[2.0, 0.0], &k2).unwrap() - 0.606_530_659_712_633_4).abs() < 1e-15);
        assert!(gaussian_kernel(&[0.0], &[0.0, 1.0], &k1).is_err());
        assert!(gaussian_kernel(&[0.0], &[0.0], &KernelConfig { sigma: 0.0 }).is_err());
    }

    #[test]
    fn infonce_anchors() {
        let single = infonce(&m(&[&[0.3, -0.2]]), &m(&[&[1.5, 0.7]]), 0.07, false).unwrap();
        assert_eq!(single.loss, 0.0);

        let uniform = infonce(
            &m(&[&[1.0, 0.0], &[1.0, 0.0]]),
            &m(&[&[0.5, 0.0], &[0.5, 0.0]]),
            1.0,
            false,
        )
        .unwrap();
        assert!((uniform.loss - 2f64.ln()).abs() < 1e-12);

        let eye = Matrix::identity(2);
        let closed = infonce(&eye, &eye, 1.0, false).unwrap();
        assert!((closed.loss - (1.0 + (-1f64).exp()).ln()).abs() < 1e-12);
        assert!((closed.loss - 0.313_261_687_518_222_8).abs() < 1e-12);

        assert!(infonce(&eye, &eye, 0.0, false).is_err());
        assert!(infonce(&eye, &eye, -1.0, false).is_err());
    }

    #[test]
    fn divergence_anchors() {
        let k = KernelConfig { sigma: 1.0 };
        let a = m(&[&[0.2, -0.4], &[1.0, 0.5], &[0.0, 0.3]]);
        for v in [DivergenceVariant::AsWritten, DivergenceVariant::CsDivergence] {
            let (l, _) = concept_divergence(&concept_batch(a.clone(), a.clone()), &k, v).unwrap();
            assert!(l.abs() < 1e-15, "{v:?}: {l}");
        }
        let (l, _) = concept_divergence(
            &concept_batch(m(&[&[1.0, 0.0]]), m(&[&[0.0, 0.0]])),
            &k,
            DivergenceVariant::AsWritten,
        )
        .unwrap();
        assert!((l - 1.0).abs() < 1e-15);
        let spread = concept_batch(m(&[&[1.0, 0.0], &[-1.0, 0.0]]), m(&[&[0.0, 0.0], &[0.0, 0.0]]));
        let (l, _) = concept_divergence(&spread, &k, DivergenceVariant::AsWritten).unwrap();
        assert!(l.abs() < 1e-15);
    }

    #[test]
    fn total_combines_components() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let batch = AlignmentBatch::new(
            random(&mut rng, 5, 4),
            random(&mut rng, 5, 4),
            random(&mut rng, 5, 3),
            random(&mut rng, 5, 3),
        )
        .unwrap();
        let k = KernelConfig::default();
        let mut cfg = LossConfig {
            lambda: 0.0,
            ..LossConfig::default()
        };
        let (nce, _) = infonce_loss(&batch, 0.07, &cfg).unwrap();
        assert_eq!(total_loss(&batch, &cfg, 0.07, &k).unwrap().total, nce);

        cfg.lambda = 10.0;
        let (div, _) = concept_divergence(&batch, &k, cfg.divergence_variant).unwrap();
        let t = total_loss(&batch, &cfg, 0.07, &k).unwrap();
        assert_eq!(t.total, nce + 10.0 * div);
        assert_eq!((t.infonce, t.divergence), (nce, div));

        let matched = AlignmentBatch::new(
            batch.img_raw.clone(),
            batch.loc_raw.clone(),
            batch.img_concept.clone(),
            batch.img_concept.clone(),
        )
        .unwrap();
        let t = total_loss(&matched, &cfg, 0.07, &k).unwrap();
        assert!((t.total - nce).abs() < 1e-12);
    }

    #[test]
    fn divergence_gradient_matches_central_differences() {
        // random 4×3 batch
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let a = random(&mut rng, 4, 3);
        let b = random(&mut rng, 4, 3);
        let k = KernelConfig { sigma: 0.8 };
        for v in [DivergenceVariant::AsWritten, DivergenceVariant::CsDivergence] {
            let (_, g) = concept_divergence(&concept_batch(a.clone(), b.clone()), &k, v).unwrap();
            let num_a = finite_diff_grad(
                |t| {
                    concept_divergence(&concept_batch(t.clone(), b.clone()), &k, v)
                        .unwrap()
                        .0
                },
                &a,
                1e-5,
            )
            .unwrap();
            let num_b = finite_diff_grad(
                |t| {
                    concept_divergence(&concept_batch(a.clone(), t.clone()), &k, v)
                        .unwrap()
                        .0
                },
                &b,
                1e-5,
            )
            .unwrap();
            let ra = grad_check(&g.img_concept, &num_a, 1e-6).unwrap();
            let rb = grad_check(&g.loc_concept, &num_b, 1e-6).unwrap();
            assert!(ra.passed && rb.passed, "{v:?}: {ra:?} {rb:?}");
        }
    }

    #[test]
    fn infonce_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for trial in 0..100 {
            let n = rng.random_range(1..7);
            let d = rng.random_range(2..7);
            let batch = AlignmentBatch::new(
                random(&mut rng, n, d),
                random(&mut rng, n, d),
                random(&mut rng, n, 2),
                random(&mut rng, n, 2),
            )
            .unwrap();
            let cfg = LossConfig {
                normalize_before_contrastive: trial % 2 == 0,
                symmetric: trial % 3 == 0,
                contrastive_space: if trial % 5 == 0 {
                    ContrastiveSpace::Concept
                } else {
                    ContrastiveSpace::Raw
                },
                ..LossConfig::default()
            };
            let log_tau = rng.random_range(-1.5f64..0.5);
            let (_, g) = infonce_loss(&batch, log_tau.exp(), &cfg).unwrap();
            let with = |f: &dyn Fn(&mut AlignmentBatch, &Matrix), t: &Matrix| {
                let mut b = batch.clone();
                f(&mut b, t);
                infonce_loss(&b, log_tau.exp(), &cfg).unwrap().0
            };
            let (analytic, x): (&Matrix, &Matrix) = match cfg.contrastive_space {
                ContrastiveSpace::Raw => (&g.img_raw, &batch.img_raw),
                ContrastiveSpace::Concept => (&g.img_concept, &batch.img_concept),
            };
            let space = cfg.contrastive_space;
            let numeric = finite_diff_grad_five_point(
                |t| {
                    with(
                        &|b: &mut AlignmentBatch, t: &Matrix| match space {
                            ContrastiveSpace::Raw => b.img_raw = t.clone(),
                            ContrastiveSpace::Concept => b.img_concept = t.clone(),
                        },
                        t,
                    )
                },
                x,
                1e-3,
            )
            .unwrap();
            let r = grad_check(analytic, &numeric, 1e-5).unwrap();
            assert!(r.passed, "trial {trial}: {r:?}");
            let (analytic_b, y) = match space {
                ContrastiveSpace::Raw => (&g.loc_raw, &batch.loc_raw),
                ContrastiveSpace::Concept => (&g.loc_concept, &batch.loc_concept),
            };
            let numeric_b = finite_diff_grad_five_point(
                |t| {
                    with(
                        &|b: &mut AlignmentBatch, t: &Matrix| match space {
                            ContrastiveSpace::Raw => b.loc_raw = t.clone(),
                            ContrastiveSpace::Concept => b.loc_concept = t.clone(),
                        },
                        t,
                    )
                },
                y,
                1e-3,
            )
            .unwrap();
            let r = grad_check(analytic_b, &numeric_b, 1e-5).unwrap();
            assert!(r.passed, "trial {trial} (location side): {r:?}");
            let theta = Matrix::new(1, 1, vec![log_tau]).unwrap();
            let numeric_tau = finite_diff_grad_five_point(
                |t| infonce_loss(&batch, t.data()[0].exp(), &cfg).unwrap().0,
                &theta,
                1e-3,
            )
            .unwrap();
            let r = grad_check(&Matrix::new(1, 1, vec![g.log_tau]).unwrap(), &numeric_tau, 1e-5).unwrap();
            assert!(
                r.passed,
                "trial {trial} (log tau): {r:?} analytic {} numeric {} n {n} cfg {cfg:?}",
                g.log_tau,
                numeric_tau.data()[0]
            );
        }
    }

    #[test]
    fn empty_batch_errors() {
        let e = AlignmentBatch::new(
            Matrix::zeros(0, 2),
            Matrix::zeros(0, 2),
            Matrix::zeros(0, 1),
            Matrix::zeros(0, 1),
        )
        .unwrap();
        assert!(infonce_loss(&e, 1.0, &LossConfig::default()).is_err());
        assert!(concept_divergence(&e, &KernelConfig::default(), DivergenceVariant::AsWritten).is_err());
        assert!(AlignmentBatch::new(
            Matrix::zeros(2, 2),
            Matrix::zeros(1, 2),
            Matrix::zeros(2, 1),
            Matrix::zeros(2, 1)
        )
        .is_err());
    }

    fn batch_strategy() -> impl Strategy<Value = (Matrix, Matrix, f64)> {
        (1usize..=64, 1usize..=6).prop_flat_map(|(n, k)| {
            (
                proptest::collection::vec(-2.0f64..2.0, n * k),
                proptest::collection::vec(-2.0f64..2.0, n * k),
                0.2f64..3.0,
            )
                .prop_map(move |(a, b, s)| (Matrix::new(n, k, a).unwrap(), Matrix::new(n, k, b).unwrap(), s))
        })
    }

    proptest! {
        #[test]
        fn as_written_equals_mean_gap((a, b, sigma) in batch_strategy()) {
            let (l, _) = concept_divergence(&concept_batch(a.clone(), b.clone()), &KernelConfig { sigma }, DivergenceVariant::AsWritten).unwrap();
            let oracle = mean_gap_oracle(&a, &b, sigma);
            prop_assert!((l - oracle).abs() <= 1e-9 * oracle.abs().max(1e-300) || (l - oracle).abs() < 1e-12);
            prop_assert!(l >= -1e-12);
        }

        #[test]
        fn as_written_permutation_invariant((a, b, sigma) in batch_strategy(), seed in 0u64..1000) {
            use rand::seq::SliceRandom;
            let n = a.rows();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut pa: Vec<usize> = (0..n).collect();
            let mut pb: Vec<usize> = (0..n).collect();
            pa.shuffle(&mut rng);
            pb.shuffle(&mut rng);
            let k = KernelConfig { sigma };
            let (l0, _) = concept_divergence(&concept_batch(a.clone(), b.clone()), &k, DivergenceVariant::AsWritten).unwrap();
            let (l1, _) = concept_divergence(&concept_batch(a.select_rows(&pa), b.select_rows(&pb)), &k, DivergenceVariant::AsWritten).unwrap();
            prop_assert!((l0 - l1).abs() <= 1e-9 * l0.abs() + 1e-12);
        }

        #[test]
        fn cs_non_negative((a, b, sigma) in batch_strategy()) {
            let (l, _) = concept_divergence(&concept_batch(a, b), &KernelConfig { sigma }, DivergenceVariant::CsDivergence).unwrap();
            prop_assert!(l >= -1e-10);
        }

        #[test]
        fn infonce_row_shift_invariant(vals in proptest::collection::vec(-5.0f64..5.0, 16), shifts in proptest::collection::vec(-50.0f64..50.0, 4)) {
            let logits = Matrix::new(4, 4, vals).unwrap();
            let mut shifted = logits.clone();
            for (r, s) in shifts.iter().enumerate() {
                shifted.row_mut(r).iter_mut().for_each(|v| *v += s);
            }
            let (l0, _) = infonce_from_logits(&logits).unwrap();
            let (l1, _) = infonce_from_logits(&shifted).unwrap();
            prop_assert!(l0 >= 0.0);
            prop_assert!((l0 - l1).abs() < 1e-10);
        }
    }
}
