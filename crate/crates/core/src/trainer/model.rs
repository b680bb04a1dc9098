use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::AdamState;
use super::TrainConfig;
use crate::concepts::ConceptSet;
use crate::encoder::{Activation, LocationEncoderConfig, LocationEncoderParams, MlpParams};
use crate::error::{Error, Result};
use crate::geo::GeoCoordinate;
use crate::losses::{total_loss, AlignmentBatch, KernelConfig, LossConfig, TotalLoss};
use crate::numkernel::{matmul, matmul_nt, matmul_tn, Matrix};
use crate::params::ParamTensors;

const F_IMG_SEED_MIX: u64 = 0x5851_f42d_4c95_7f2d;

/// Architecture of the trainable parts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub location: LocationEncoderConfig,
    /// Hidden widths of `f_img`.
    pub img_hidden: Vec<usize>,
    pub img_activation: Activation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            location: LocationEncoderConfig::default(),
            img_hidden: vec![256],
            img_activation: Activation::Relu,
        }
    }
}

/// Everything the optimizer touches. Location-encoder tensors come first in the flat order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub location: LocationEncoderParams,
    pub f_img: MlpParams,
    /// Offset added to the frozen concept embeddings, `d × k`.
    pub delta: Matrix,
    pub log_tau: f64,
}

impl ModelParams {
    pub fn init(cfg: &ModelConfig, embed_dim: usize, k: usize, temperature_init: f64, seed: u64) -> Result<Self> {
        if embed_dim == 0 || k == 0 {
            return Err(Error::usage("embedding dimension and concept count must be positive"));
        }
        let location = LocationEncoderParams::init(&cfg.location, embed_dim, seed)?;
        let mut dims = vec![embed_dim];
        dims.extend(&cfg.img_hidden);
        dims.push(k);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ F_IMG_SEED_MIX);
        let f_img = MlpParams::init(&dims, cfg.img_activation, &mut rng)?;
        Ok(Self {
            location,
            f_img,
            delta: Matrix::zeros(embed_dim, k),
            log_tau: temperature_init.ln(),
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            location: self.location.zeros_like(),
            f_img: self.f_img.zeros_like(),
            delta: Matrix::zeros(self.delta.rows(), self.delta.cols()),
            log_tau: 0.0,
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.delta.rows()
    }

    pub fn k(&self) -> usize {
        self.delta.cols()
    }

    pub fn tau(&self) -> f64 {
        self.log_tau.exp()
    }

    /// Number of leading flat entries that belong to the location encoder.
    pub fn location_param_count(&self) -> usize {
        self.location.param_count()
    }
}

impl ParamTensors for ModelParams {
    fn tensors(&self) -> Vec<&[f64]> {
        let mut out = self.location.tensors();
        out.extend(self.f_img.tensors());
        out.push(self.delta.data());
        out.push(std::slice::from_ref(&self.log_tau));
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = self.location.tensors_mut();
        out.extend(self.f_img.tensors_mut());
        out.push(self.delta.data_mut());
        out.push(std::slice::from_mut(&mut self.log_tau));
        out
    }
}

/// Paired image embeddings (`N × d`) and their true coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedBatch {
    pub x_img: Matrix,
    pub coords: Vec<GeoCoordinate>,
}

/// Forward pass through encoders and concept projections, then the objective and its
/// gradient with respect to every trainable tensor.
pub fn objective(
    params: &ModelParams,
    base: &Matrix,
    batch: &PairedBatch,
    loss_cfg: &LossConfig,
    kernel: &KernelConfig,
) -> Result<(TotalLoss, ModelParams)> {
    if batch.x_img.rows() != batch.coords.len() {
        return Err(Error::CountMismatch(format!(
            "{} image rows but {} coordinates",
            batch.x_img.rows(),
            batch.coords.len()
        )));
    }
    let (x_loc, loc_cache) = params.location.encode_batch(&batch.coords)?;
    let (z_img, img_cache) = params.f_img.forward_batch(&batch.x_img)?;
    let b = base.add(&params.delta)?;
    let z_loc = matmul(&x_loc, &b)?;
    let aligned = AlignmentBatch::new(batch.x_img.clone(), x_loc.clone(), z_img, z_loc)?;
    let loss = total_loss(&aligned, loss_cfg, params.tau(), kernel)?;
    let g = &loss.grads;

    let mut grads = params.zeros_like();
    grads.f_img = params.f_img.backward_batch(&img_cache, &g.img_concept)?.0;
    grads.delta = matmul_tn(&x_loc, &g.loc_concept)?;
    let mut d_loc = g.loc_raw.clone();
    d_loc.axpy(1.0, &matmul_nt(&g.loc_concept, &b)?)?;
    grads.location = params.location.backward_batch(&loc_cache, &d_loc)?;
    grads.log_tau = g.log_tau;
    Ok((loss, grads))
}

/// Full trainable state plus the frozen concept set, optimizer moments and config snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    pub concepts: ConceptSet,
    pub params: ModelParams,
    pub adam: AdamState,
}

impl ModelState {
    pub fn init(model_config: ModelConfig, train_config: TrainConfig, concepts: ConceptSet) -> Result<Self> {
        train_config.validate()?;
        let params = ModelParams::init(
            &model_config,
            concepts.dim(),
            concepts.k(),
            train_config.loss.temperature_init,
            train_config.seed,
        )?;
        let adam = AdamState::new(params.param_count());
        Ok(Self {
            model_config,
            train_config,
            concepts,
            params,
            adam,
        })
    }

    pub fn step(&self) -> u64 {
        self.adam.t
    }

    pub fn embed_dim(&self) -> usize {
        self.concepts.dim()
    }

    /// Frozen selected concept embeddings, `d × k`.
    pub fn base(&self) -> Matrix {
        self.concepts.selected_embeddings()
    }

    /// Effective concept basis `B = base + Δ`.
    pub fn basis(&self) -> Matrix {
        self.base().add(&self.params.delta).expect("delta shape fixed at init")
    }

    pub fn encode_locations(&self, coords: &[GeoCoordinate]) -> Result<Matrix> {
        Ok(self.params.location.encode_batch(coords)?.0)
    }

    /// `z_loc` rows for a batch of coordinates.
    pub fn location_concepts(&self, coords: &[GeoCoordinate]) -> Result<Matrix> {
        matmul(&self.encode_locations(coords)?, &self.basis())
    }

    /// `z_img` rows for a batch of image embeddings.
    pub fn image_concepts(&self, x_img: &Matrix) -> Result<Matrix> {
        Ok(self.params.f_img.forward_batch(x_img)?.0)
    }
}
