use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::mlp::{Activation, MlpCache, MlpParams};
use crate::error::{Error, Result};
use crate::geo::GeoCoordinate;
use crate::numkernel::{l2_norm, Matrix};
use crate::params::ParamTensors;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LocationEncoderConfig {
    /// Divisors applied to the Fourier argument, one branch per scale.
    pub scales: Vec<f64>,
    /// Random frequencies per scale; each branch sees `2 × n_frequencies` features.
    pub n_frequencies: usize,
    pub hidden: usize,
    pub activation: Activation,
}

impl Default for LocationEncoderConfig {
    fn default() -> Self {
        Self {
            scales: vec![1.0, 4.0, 16.0],
            n_frequencies: 64,
            hidden: 256,
            activation: Activation::Relu,
        }
    }
}

/// GPS → embedding map: unit-sphere point, per-scale random Fourier features, per-scale MLP,
/// sum over scales, L2 normalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocationEncoderParams {
    /// One `3 × m` frequency matrix per scale. Fixed after construction.
    frequencies: Vec<Matrix>,
    scales: Vec<f64>,
    mlps: Vec<MlpParams>,
    output_dim: usize,
}

pub struct LocationCache {
    mlp_caches: Vec<MlpCache>,
    /// Normalized outputs and the norms they were divided by.
    outputs: Matrix,
    norms: Vec<f64>,
}

impl LocationEncoderParams {
    pub fn init(cfg: &LocationEncoderConfig, output_dim: usize, seed: u64) -> Result<Self> {
        if cfg.scales.is_empty() || cfg.scales.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::usage(format!(
                "location scales must be positive: {:?}",
                cfg.scales
            )));
        }
        if cfg.n_frequencies == 0 || cfg.hidden == 0 || output_dim == 0 {
            return Err(Error::usage("location encoder widths must be positive"));
        }
        let mut freq_rng = ChaCha8Rng::seed_from_u64(seed);
        let frequencies = cfg
            .scales
            .iter()
            .map(|_| {
                let data = (0..3 * cfg.n_frequencies)
                    .map(|_| StandardNormal.sample(&mut freq_rng))
                    .collect();
                Matrix::new(3, cfg.n_frequencies, data)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut mlp_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
        let mlps = cfg
            .scales
            .iter()
            .map(|_| {
                MlpParams::init(
                    &[2 * cfg.n_frequencies, cfg.hidden, output_dim],
                    cfg.activation,
                    &mut mlp_rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            frequencies,
            scales: cfg.scales.clone(),
            mlps,
            output_dim,
        })
    }

    pub fn from_parts(frequencies: Vec<Matrix>, scales: Vec<f64>, mlps: Vec<MlpParams>) -> Result<Self> {
        if frequencies.len() != scales.len() || mlps.len() != scales.len() || scales.is_empty() {
            return Err(Error::data("location encoder parts disagree on the number of scales"));
        }
        let output_dim = mlps[0].output_dim();
        for (f, m) in frequencies.iter().zip(&mlps) {
            if f.rows() != 3 || m.input_dim() != 2 * f.cols() || m.output_dim() != output_dim {
                return Err(Error::data("location encoder branch shapes do not chain"));
            }
        }
        Ok(Self {
            frequencies,
            scales,
            mlps,
            output_dim,
        })
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    pub fn frequencies(&self) -> &[Matrix] {
        &self.frequencies
    }

    pub fn mlps(&self) -> &[MlpParams] {
        &self.mlps
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            frequencies: self.frequencies.clone(),
            scales: self.scales.clone(),
            mlps: self.mlps.iter().map(MlpParams::zeros_like).collect(),
            output_dim: self.output_dim,
        }
    }

    /// `[cos(ω·p/σ), sin(ω·p/σ)]` for every coordinate of the batch.
    fn fourier_features(&self, points: &[[f64; 3]], branch: usize) -> Matrix {
        let freq = &self.frequencies[branch];
        let m = freq.cols();
        let inv_scale = 1.0 / self.scales[branch];
        let mut out = Matrix::zeros(points.len(), 2 * m);
        for (r, p) in points.iter().enumerate() {
            let row = out.row_mut(r);
            for j in 0..m {
                let arg = (p[0] * freq.get(0, j) + p[1] * freq.get(1, j) + p[2] * freq.get(2, j)) * inv_scale;
                row[j] = arg.cos();
                row[m + j] = arg.sin();
            }
        }
        out
    }

    pub fn encode_batch(&self, coords: &[GeoCoordinate]) -> Result<(Matrix, LocationCache)> {
        let points: Vec<[f64; 3]> = coords.iter().map(GeoCoordinate::to_unit_vector).collect();
        let mut sum = Matrix::zeros(coords.len(), self.output_dim);
        let mut mlp_caches = Vec::with_capacity(self.mlps.len());
        for (b, mlp) in self.mlps.iter().enumerate() {
            let feats = self.fourier_features(&points, b);
            let (y, cache) = mlp.forward_batch(&feats)?;
            sum.axpy(1.0, &y)?;
            mlp_caches.push(cache);
        }
        let mut norms = Vec::with_capacity(coords.len());
        for r in 0..sum.rows() {
            let row = sum.row_mut(r);
            let n = l2_norm(row);
            if !(n > 0.0) || !n.is_finite() {
                return Err(Error::numeric(format!(
                    "location embedding for {} has norm {n}",
                    coords[r]
                )));
            }
            row.iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        Ok((
            sum.clone(),
            LocationCache {
                mlp_caches,
                outputs: sum,
                norms,
            },
        ))
    }

    pub fn encode(&self, loc: GeoCoordinate) -> Result<Vec<f64>> {
        Ok(self.encode_batch(&[loc])?.0.into_data())
    }

    /// Gradients of the MLP branches given `dL/dx_loc` for the normalized outputs.
    pub fn backward_batch(&self, cache: &LocationCache, upstream: &Matrix) -> Result<LocationEncoderParams> {
        if upstream.shape() != cache.outputs.shape() {
            return Err(Error::Shape {
                op: "location backward",
                left: upstream.shape(),
                right: cache.outputs.shape(),
            });
        }
        // through y / ‖y‖
        let mut d_sum = upstream.clone();
        for r in 0..d_sum.rows() {
            let y = cache.outputs.row(r);
            let row = d_sum.row_mut(r);
            let proj = crate::numkernel::dot(y, row);
            for (g, &yv) in row.iter_mut().zip(y) {
                *g = (*g - yv * proj) / cache.norms[r];
            }
        }
        let mut grads = self.zeros_like();
        for (b, mlp) in self.mlps.iter().enumerate() {
            let (g, _) = mlp.backward_batch(&cache.mlp_caches[b], &d_sum)?;
            grads.mlps[b] = g;
        }
        Ok(grads)
    }
}

impl ParamTensors for LocationEncoderParams {
    fn tensors(&self) -> Vec<&[f64]> {
        self.mlps.iter().flat_map(|m| m.tensors()).collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.mlps.iter_mut().flat_map(|m| m.tensors_mut()).collect()
    }
}

pub fn encode_location(params: &LocationEncoderParams, loc: GeoCoordinate) -> Result<Vec<f64>> {
    params.encode(loc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkernel::{cosine, grad_check};
    use rand::{Rng, SeedableRng};

    fn c(lat: f64, lon: f64) -> GeoCoordinate {
        GeoCoordinate::new(lat, lon).unwrap()
    }

    fn default_encoder() -> LocationEncoderParams {
        LocationEncoderParams::init(&LocationEncoderConfig::default(), 64, 42).unwrap()
    }

    #[test]
    fn unit_norm_and_deterministic() {
        let enc = default_encoder();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let loc = c(rng.random_range(-90.0..=90.0), rng.random_range(-180.0..180.0));
            let v = enc.encode(loc).unwrap();
            assert_eq!(v.len(), 64);
            assert!((l2_norm(&v) - 1.0).abs() < 1e-12);
            assert_eq!(v, enc.encode(loc).unwrap());
        }
    }

    #[test]
    fn antimeridian_continuity() {
        let enc = default_encoder();
        // Compare through the sphere map with raw longitudes on both sides of the seam.
        let a = enc.encode(c(33.0, -180.0)).unwrap();
        let b = enc.encode(c(33.0, 180.0)).unwrap();
        assert_eq!(a, b);
        let east = enc.encode(c(33.0, 179.999_999)).unwrap();
        assert!(cosine(&a, &east) > 1.0 - 1e-9);
    }

    #[test]
    fn one_metre_apart_is_nearly_identical() {
        let enc = default_encoder();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let metre_deg = 1.0 / 111_195.0;
        for _ in 0..20 {
            let lat = rng.random_range(-80.0..80.0);
            let lon = rng.random_range(-179.0..179.0);
            let a = enc.encode(c(lat, lon)).unwrap();
            let b = enc.encode(c(lat + metre_deg, lon)).unwrap();
            assert!(cosine(&a, &b) >= 0.999);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let cfg = LocationEncoderConfig {
            scales: vec![1.0, 4.0],
            n_frequencies: 3,
            hidden: 5,
            activation: Activation::Tanh,
        };
        let enc = LocationEncoderParams::init(&cfg, 4, 9).unwrap();
        let coords = [c(10.0, 20.0), c(-45.0, 170.0), c(70.0, -60.0)];
        let weights = Matrix::new(3, 4, (0..12).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let loss = |e: &LocationEncoderParams| {
            let (x, _) = e.encode_batch(&coords).unwrap();
            crate::numkernel::dot(x.data(), weights.data())
        };
        let (_, cache) = enc.encode_batch(&coords).unwrap();
        let g = enc.backward_batch(&cache, &weights).unwrap();
        let theta = Matrix::new(1, enc.param_count(), enc.flatten()).unwrap();
        let numeric = crate::numkernel::finite_diff_grad_five_point(
            |t| {
                let mut e = enc.clone();
                e.assign_flat(t.data());
                loss(&e)
            },
            &theta,
            1e-3,
        )
        .unwrap();
        let analytic = Matrix::new(1, g.param_count(), g.flatten()).unwrap();
        let report = grad_check(&analytic, &numeric, 1e-5).unwrap();
        assert!(report.passed, "{report:?}");
    }
}
