//! Small supervised MLPs on frozen embeddings.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{Activation, MlpParams};
use crate::error::{Error, Result};
use crate::numkernel::Matrix;
use crate::params::ParamTensors;
use crate::trainer::{AdamConfig, AdamState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    RSquared,
    Accuracy,
}

impl MetricKind {
    pub fn label(self) -> &'static str {
        match self {
            MetricKind::RSquared => "r_squared",
            MetricKind::Accuracy => "accuracy",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeHyper {
    pub lr: f64,
    /// Hidden layers; 0 is a linear model.
    pub depth: usize,
    pub width: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub seed: u64,
    /// Random-search draws; ignored when `fixed` is set.
    pub trials: usize,
    /// Full-batch Adam steps per fit.
    pub epochs: usize,
    /// Train / validation / test shares.
    pub split: [f64; 3],
    pub lr_range: (f64, f64),
    pub max_depth: usize,
    pub widths: Vec<usize>,
    pub fixed: Option<ProbeHyper>,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            trials: 8,
            epochs: 300,
            split: [0.6, 0.2, 0.2],
            lr_range: (1e-3, 3e-2),
            max_depth: 2,
            widths: vec![16, 32, 64, 128],
            fixed: None,
        }
    }
}

impl ProbeConfig {
    fn validate(&self) -> Result<()> {
        if self.split.iter().any(|s| !(*s > 0.0)) || (self.split.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::usage(format!(
                "probe split {:?} must be positive and sum to 1",
                self.split
            )));
        }
        let (a, b) = self.lr_range;
        if !(a > 0.0 && b >= a) {
            return Err(Error::usage("probe lr_range must be positive and ordered"));
        }
        if self.max_depth > 2 || self.widths.is_empty() || self.widths.iter().any(|&w| w == 0 || w > 128) {
            return Err(Error::usage("probe depth must be ≤ 2 and widths within 1..=128"));
        }
        if self.fixed.is_none() && self.trials == 0 {
            return Err(Error::usage("probe needs at least one trial"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub task: String,
    pub metric: MetricKind,
    /// Held-out test score.
    pub value: f64,
    pub hyper: ProbeHyper,
    pub warnings: Vec<String>,
}

/// Image features first, then location features.
pub fn fuse_features(image: &Matrix, location: &Matrix) -> Result<Matrix> {
    if image.rows() != location.rows() {
        return Err(Error::Shape {
            op: "fuse_features",
            left: image.shape(),
            right: location.shape(),
        });
    }
    let mut data = Vec::with_capacity(image.len() + location.len());
    for r in 0..image.rows() {
        data.extend_from_slice(image.row(r));
        data.extend_from_slice(location.row(r));
    }
    Matrix::new(image.rows(), image.cols() + location.cols(), data)
}

struct Split {
    train: Vec<usize>,
    val: Vec<usize>,
    test: Vec<usize>,
}

fn split_rows(n: usize, cfg: &ProbeConfig) -> Result<Split> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
    let n_train = (cfg.split[0] * n as f64).round() as usize;
    let n_val = (cfg.split[1] * n as f64).round() as usize;
    if n_train == 0 || n_val == 0 || n_train + n_val >= n {
        return Err(Error::data(format!(
            "{n} rows are too few for a train/validation/test split"
        )));
    }
    Ok(Split {
        train: idx[..n_train].to_vec(),
        val: idx[n_train..n_train + n_val].to_vec(),
        test: idx[n_train + n_val..].to_vec(),
    })
}

fn candidates(cfg: &ProbeConfig) -> Vec<ProbeHyper> {
    if let Some(h) = cfg.fixed {
        return vec![h];
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x70_726f_6265);
    let (lo, hi) = (cfg.lr_range.0.ln(), cfg.lr_range.1.ln());
    (0..cfg.trials)
        .map(|_| ProbeHyper {
            lr: if hi > lo {
                rng.random_range(lo..hi).exp()
            } else {
                lo.exp()
            },
            depth: rng.random_range(0..=cfg.max_depth),
            width: cfg.widths[rng.random_range(0..cfg.widths.len())],
        })
        .collect()
}

/// MLP whose last layer starts at zero weights with the given bias, so the untrained probe
/// predicts the prior.
fn init_probe(inputs: usize, outputs: usize, hyper: &ProbeHyper, bias: &[f64], seed: u64) -> Result<MlpParams> {
    let mut dims = vec![inputs];
    dims.extend(std::iter::repeat_n(hyper.width, hyper.depth));
    dims.push(outputs);
    let mut mlp = MlpParams::init(&dims, Activation::Relu, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let last = mlp.layers_mut().last_mut().expect("at least one layer");
    last.weight.fill(0.0);
    last.bias.copy_from_slice(bias);
    Ok(mlp)
}

/// Full-batch Adam; `grad_fn` maps outputs to `dL/doutputs`.
fn fit(mlp: &mut MlpParams, x: &Matrix, epochs: usize, lr: f64, grad_fn: impl Fn(&Matrix) -> Matrix) -> Result<()> {
    let mut adam = AdamState::new(mlp.param_count());
    let cfg = AdamConfig::default();
    for _ in 0..epochs {
        let (out, cache) = mlp.forward_batch(x)?;
        let (grads, _) = mlp.backward_batch(&cache, &grad_fn(&out))?;
        let mut theta = mlp.flatten();
        adam.update(&mut theta, &grads.flatten(), |_| lr, &cfg)?;
        mlp.assign_flat(&theta);
        if !mlp.all_finite() {
            return Err(Error::numeric("probe parameters diverged"));
        }
    }
    Ok(())
}

fn r_squared(pred: &[f64], y: &[f64]) -> Result<f64> {
    let n = y.len() as f64;
    let mean = y.iter().sum::<f64>() / n;
    let ss_tot: f64 = y.iter().map(|v| (v - mean) * (v - mean)).sum();
    if ss_tot == 0.0 {
        return Err(Error::data("targets have zero variance; R² is undefined"));
    }
    let ss_res: f64 = pred.iter().zip(y).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

pub fn probe_regression(task: &str, x: &Matrix, y: &[f64], cfg: &ProbeConfig) -> Result<ProbeResult> {
    cfg.validate()?;
    if x.rows() != y.len() {
        return Err(Error::CountMismatch(format!(
            "{} rows but {} targets",
            x.rows(),
            y.len()
        )));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::data("non-finite regression target"));
    }
    let split = split_rows(x.rows(), cfg)?;
    let pick = |rows: &[usize]| rows.iter().map(|&r| y[r]).collect::<Vec<f64>>();
    let (y_train, y_val, y_test) = (pick(&split.train), pick(&split.val), pick(&split.test));
    let n = y_train.len() as f64;
    let mean = y_train.iter().sum::<f64>() / n;
    let std = (y_train.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
    if std == 0.0 {
        return Err(Error::data("training targets have zero variance"));
    }
    let x_train = x.select_rows(&split.train);
    let z_train: Vec<f64> = y_train.iter().map(|v| (v - mean) / std).collect();
    let predict = |mlp: &MlpParams, rows: &[usize]| -> Result<Vec<f64>> {
        let (out, _) = mlp.forward_batch(&x.select_rows(rows))?;
        Ok(out.data().iter().map(|z| z * std + mean).collect())
    };

    let mut best: Option<(f64, ProbeHyper, MlpParams)> = None;
    for (i, h) in candidates(cfg).into_iter().enumerate() {
        let mut mlp = init_probe(x.cols(), 1, &h, &[0.0], cfg.seed.wrapping_add(i as u64))?;
        fit(&mut mlp, &x_train, cfg.epochs, h.lr, |out| {
            let inv = 1.0 / out.rows() as f64;
            let g: Vec<f64> = out.data().iter().zip(&z_train).map(|(p, t)| (p - t) * inv).collect();
            Matrix::new(out.rows(), 1, g).expect("finite gradient")
        })?;
        let score = r_squared(&predict(&mlp, &split.val)?, &y_val).unwrap_or(f64::NEG_INFINITY);
        if best.as_ref().is_none_or(|(s, _, _)| score > *s) {
            best = Some((score, h, mlp));
        }
    }
    let (_, hyper, mlp) = best.expect("at least one candidate");
    Ok(ProbeResult {
        task: task.to_string(),
        metric: MetricKind::RSquared,
        value: r_squared(&predict(&mlp, &split.test)?, &y_test)?,
        hyper,
        warnings: Vec::new(),
    })
}

fn softmax_rows(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            s += *v;
        }
        row.iter_mut().for_each(|v| *v /= s);
    }
    out
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn probe_classification(task: &str, x: &Matrix, labels: &[usize], cfg: &ProbeConfig) -> Result<ProbeResult> {
    cfg.validate()?;
    if x.rows() != labels.len() {
        return Err(Error::CountMismatch(format!(
            "{} rows but {} labels",
            x.rows(),
            labels.len()
        )));
    }
    let n_classes = labels.iter().max().map_or(0, |m| m + 1);
    let split = split_rows(x.rows(), cfg)?;
    let mut counts = vec![0usize; n_classes];
    for &r in &split.train {
        counts[labels[r]] += 1;
    }
    if counts.iter().filter(|&&c| c > 0).count() < 2 {
        return Err(Error::data(
            "classification probe needs at least two classes in the training split",
        ));
    }
    let mut warnings = Vec::new();
    let mut missing: Vec<usize> = split
        .test
        .iter()
        .map(|&r| labels[r])
        .filter(|&c| counts[c] == 0)
        .collect();
    missing.sort_unstable();
    missing.dedup();
    for c in missing {
        let msg = format!("class {c} appears in the test split but not in training");
        log::warn!("{task}: {msg}");
        warnings.push(msg);
    }
    let n_train = split.train.len() as f64;
    let prior: Vec<f64> = counts
        .iter()
        .map(|&c| ((c as f64 + 1.0) / (n_train + n_classes as f64)).ln())
        .collect();
    let x_train = x.select_rows(&split.train);
    let y_train: Vec<usize> = split.train.iter().map(|&r| labels[r]).collect();
    let accuracy = |mlp: &MlpParams, rows: &[usize]| -> Result<f64> {
        let (out, _) = mlp.forward_batch(&x.select_rows(rows))?;
        let hits = rows
            .iter()
            .enumerate()
            .filter(|(i, &r)| argmax(out.row(*i)) == labels[r])
            .count();
        Ok(hits as f64 / rows.len() as f64)
    };

    let mut best: Option<(f64, ProbeHyper, MlpParams)> = None;
    for (i, h) in candidates(cfg).into_iter().enumerate() {
        let mut mlp = init_probe(x.cols(), n_classes, &h, &prior, cfg.seed.wrapping_add(i as u64))?;
        fit(&mut mlp, &x_train, cfg.epochs, h.lr, |out| {
            let mut g = softmax_rows(out);
            let inv = 1.0 / out.rows() as f64;
            for (r, &y) in y_train.iter().enumerate() {
                let row = g.row_mut(r);
                row[y] -= 1.0;
                row.iter_mut().for_each(|v| *v *= inv);
            }
            g
        })?;
        let score = accuracy(&mlp, &split.val)?;
        if best.as_ref().is_none_or(|(s, _, _)| score > *s) {
            best = Some((score, h, mlp));
        }
    }
    let (_, hyper, mlp) = best.expect("at least one candidate");
    Ok(ProbeResult {
        task: task.to_string(),
        metric: MetricKind::Accuracy,
        value: accuracy(&mlp, &split.test)?,
        hyper,
        warnings,
    })
}
