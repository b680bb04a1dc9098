//! Mini-batch Adam training of the location encoder, `f_img`, `Δ` and `log τ`.

mod adam;
mod checkpoint;
mod model;
mod record;

pub use adam::{AdamConfig, AdamState};
pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use model::{objective, ModelConfig, ModelParams, ModelState, PairedBatch};
pub use record::{EpochRecord, StepRecord, TrainRecord};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::concepts::ConceptSet;
use crate::encoder::ImageEmbedding;
use crate::error::{Error, Result};
use crate::geo::GeoCoordinate;
use crate::losses::{KernelConfig, LossConfig, TAU_MAX, TAU_MIN};
use crate::numkernel::Matrix;
use crate::params::ParamTensors;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr_location_encoder: f64,
    /// Learning rate of `f_img`, `Δ` and `log τ`.
    pub lr_other: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    /// Skip the final short batch of each epoch.
    pub drop_last: bool,
    pub loss: LossConfig,
    pub kernel: KernelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_location_encoder: 3e-5,
            lr_other: 3e-4,
            batch_size: 128,
            epochs: 30,
            seed: 7,
            adam: AdamConfig::default(),
            drop_last: true,
            loss: LossConfig::default(),
            kernel: KernelConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Laptop-sized preset: batch 32, otherwise the defaults.
    pub fn desk() -> Self {
        Self {
            batch_size: 32,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, lr) in [
            ("lr_location_encoder", self.lr_location_encoder),
            ("lr_other", self.lr_other),
        ] {
            if !(lr.is_finite() && lr > 0.0) {
                return Err(Error::usage(format!("{name} must be positive, got {lr}")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::usage("batch_size must be at least 1"));
        }
        if self.batch_size == 1 {
            log::warn!("batch_size 1 makes the contrastive term vacuous");
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return Err(Error::usage("adam betas must lie in [0, 1) and eps must be positive"));
        }
        self.loss.validate()?;
        self.kernel.validate()
    }
}

/// Training pairs as dense matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainData {
    pub ids: Vec<String>,
    pub x_img: Matrix,
    pub coords: Vec<GeoCoordinate>,
}

impl TrainData {
    pub fn new(ids: Vec<String>, x_img: Matrix, coords: Vec<GeoCoordinate>) -> Result<Self> {
        if ids.len() != x_img.rows() || coords.len() != x_img.rows() {
            return Err(Error::CountMismatch(format!(
                "{} ids, {} embeddings, {} coordinates",
                ids.len(),
                x_img.rows(),
                coords.len()
            )));
        }
        Ok(Self { ids, x_img, coords })
    }

    /// Every item must carry its true location.
    pub fn from_embeddings(items: &[ImageEmbedding]) -> Result<Self> {
        let Some(first) = items.first() else {
            return Err(Error::data("training set is empty"));
        };
        let d = first.dim();
        let mut data = Vec::with_capacity(items.len() * d);
        let mut coords = Vec::with_capacity(items.len());
        for it in items {
            if it.dim() != d {
                return Err(Error::data(format!(
                    "{}: dimension {} differs from {d}",
                    it.id,
                    it.dim()
                )));
            }
            let loc = it
                .true_location
                .ok_or_else(|| Error::data(format!("{}: missing true location", it.id)))?;
            data.extend_from_slice(&it.vector);
            coords.push(loc);
        }
        Self::new(
            items.iter().map(|i| i.id.clone()).collect(),
            Matrix::new(items.len(), d, data)?,
            coords,
        )
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn batch(&self, rows: &[usize]) -> PairedBatch {
        PairedBatch {
            x_img: self.x_img.select_rows(rows),
            coords: rows.iter().map(|&r| self.coords[r]).collect(),
        }
    }
}

/// Batches per epoch for `n` items.
pub fn steps_per_epoch(n: usize, cfg: &TrainConfig) -> usize {
    if cfg.drop_last {
        n / cfg.batch_size
    } else {
        n.div_ceil(cfg.batch_size)
    }
}

/// Shuffled row order of one epoch; depends only on `(seed, epoch)`.
pub fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ epoch.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Applies one Adam update with the two learning-rate groups, then clamps `τ`.
pub fn adam_step(state: &mut ModelState, grads: &ModelParams) -> Result<()> {
    let cfg = &state.train_config;
    let split = state.params.location_param_count();
    let (lr_loc, lr_other) = (cfg.lr_location_encoder, cfg.lr_other);
    let mut theta = state.params.flatten();
    let g = grads.flatten();
    state
        .adam
        .update(&mut theta, &g, |i| if i < split { lr_loc } else { lr_other }, &cfg.adam)?;
    state.params.assign_flat(&theta);
    state.params.log_tau = state.params.log_tau.clamp(TAU_MIN.ln(), TAU_MAX.ln());
    Ok(())
}

/// Step-by-step driver. Batches depend only on the step index, so a state restored from a
/// checkpoint continues exactly where it stopped.
pub struct Trainer<'a> {
    state: ModelState,
    data: &'a TrainData,
    record: TrainRecord,
    order: Option<(u64, Vec<usize>)>,
    epoch_acc: Vec<StepRecord>,
}

impl<'a> Trainer<'a> {
    pub fn new(state: ModelState, data: &'a TrainData) -> Result<Self> {
        state.train_config.validate()?;
        if data.is_empty() {
            return Err(Error::data("training set is empty"));
        }
        if data.x_img.cols() != state.embed_dim() {
            return Err(Error::data(format!(
                "image embeddings have dimension {} but concepts have {}",
                data.x_img.cols(),
                state.embed_dim()
            )));
        }
        if steps_per_epoch(data.len(), &state.train_config) == 0 {
            return Err(Error::data(format!(
                "{} training items cannot fill one batch of {}",
                data.len(),
                state.train_config.batch_size
            )));
        }
        Ok(Self {
            state,
            data,
            record: TrainRecord::default(),
            order: None,
            epoch_acc: Vec::new(),
        })
    }

    pub fn state(&self) -> &ModelState {
        &self.state
    }

    pub fn record(&self) -> &TrainRecord {
        &self.record
    }

    pub fn total_steps(&self) -> u64 {
        (steps_per_epoch(self.data.len(), &self.state.train_config) * self.state.train_config.epochs) as u64
    }

    pub fn is_done(&self) -> bool {
        self.state.step() >= self.total_steps()
    }

    /// Runs one optimizer step.
    pub fn step(&mut self) -> Result<StepRecord> {
        let cfg = self.state.train_config.clone();
        let spe = steps_per_epoch(self.data.len(), &cfg) as u64;
        let step = self.state.step();
        let (epoch, pos) = (step / spe, (step % spe) as usize);
        if self.order.as_ref().map(|(e, _)| *e) != Some(epoch) {
            self.order = Some((epoch, epoch_order(self.data.len(), cfg.seed, epoch)));
        }
        let order = &self.order.as_ref().expect("order set above").1;
        let end = ((pos + 1) * cfg.batch_size).min(order.len());
        let batch = self.data.batch(&order[pos * cfg.batch_size..end]);

        let tau = self.state.params.tau();
        let (loss, grads) = objective(&self.state.params, &self.state.base(), &batch, &cfg.loss, &cfg.kernel)?;
        for (name, v) in [
            ("total", loss.total),
            ("infonce", loss.infonce),
            ("divergence", loss.divergence),
        ] {
            if !v.is_finite() {
                return Err(Error::numeric(format!("step {step}: {name} loss is {v}")));
            }
        }
        if !grads.all_finite() {
            return Err(Error::numeric(format!("step {step}: non-finite gradient")));
        }
        let split = grads.location_param_count();
        let g = grads.flatten();
        let norm = |s: &[f64]| s.iter().map(|v| v * v).sum::<f64>().sqrt();
        adam_step(&mut self.state, &grads)?;
        if !self.state.params.all_finite() {
            return Err(Error::numeric(format!("step {step}: parameters became non-finite")));
        }
        let rec = StepRecord {
            step,
            epoch,
            total: loss.total,
            infonce: loss.infonce,
            divergence: loss.divergence,
            tau,
            grad_norm_location: norm(&g[..split]),
            grad_norm_other: norm(&g[split..]),
        };
        self.record.steps.push(rec.clone());
        self.epoch_acc.push(rec.clone());
        if pos as u64 + 1 == spe {
            self.record.epochs.push(EpochRecord::summarize(epoch, &self.epoch_acc));
            let e = self.record.epochs.last().expect("just pushed");
            log::info!(
                "epoch {} total {:.6} infonce {:.6} divergence {:.6} tau {:.5}",
                e.epoch,
                e.mean_total,
                e.mean_infonce,
                e.mean_divergence,
                self.state.params.tau()
            );
            self.epoch_acc.clear();
        }
        Ok(rec)
    }

    pub fn run_to_end(&mut self) -> Result<()> {
        while !self.is_done() {
            self.step()?;
        }
        Ok(())
    }

    pub fn into_parts(self) -> (ModelState, TrainRecord) {
        (self.state, self.record)
    }
}

/// Initializes a model and trains it for `cfg.epochs`.
pub fn train(
    data: &TrainData,
    concepts: ConceptSet,
    model_cfg: ModelConfig,
    cfg: TrainConfig,
) -> Result<(ModelState, TrainRecord)> {
    let state = ModelState::init(model_cfg, cfg, concepts)?;
    resume(state, data)
}

/// Continues training from `state` until its configured epoch count is reached.
pub fn resume(state: ModelState, data: &TrainData) -> Result<(ModelState, TrainRecord)> {
    let mut t = Trainer::new(state, data)?;
    t.run_to_end()?;
    Ok(t.into_parts())
}

/// Mean objective components over the data in its stored order, one batch at a time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveSummary {
    pub total: f64,
    pub infonce: f64,
    pub divergence: f64,
}

pub fn evaluate_objective(state: &ModelState, data: &TrainData) -> Result<ObjectiveSummary> {
    let cfg = &state.train_config;
    let spe = steps_per_epoch(data.len(), cfg);
    if spe == 0 {
        return Err(Error::data("not enough items for one batch"));
    }
    let base = state.base();
    let mut acc = ObjectiveSummary {
        total: 0.0,
        infonce: 0.0,
        divergence: 0.0,
    };
    for b in 0..spe {
        let rows: Vec<usize> = (b * cfg.batch_size..((b + 1) * cfg.batch_size).min(data.len())).collect();
        let (loss, _) = objective(&state.params, &base, &data.batch(&rows), &cfg.loss, &cfg.kernel)?;
        acc.total += loss.total;
        acc.infonce += loss.infonce;
        acc.divergence += loss.divergence;
    }
    let inv = 1.0 / spe as f64;
    Ok(ObjectiveSummary {
        total: acc.total * inv,
        infonce: acc.infonce * inv,
        divergence: acc.divergence * inv,
    })
}
