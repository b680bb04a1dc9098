use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkernel::{matmul, matmul_nt, matmul_tn, Matrix};
use crate::params::ParamTensors;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the pre-activation. ReLU uses 0 at the kink.
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
            Activation::Identity => 1.0,
        }
    }
}

/// One affine map; `weight` is `out × in`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

/// Feed-forward network. The activation sits between layers, never after the last one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    layers: Vec<Layer>,
    activation: Activation,
}

/// Values retained from a batched forward pass.
#[derive(Debug, Clone)]
pub struct MlpCache {
    /// Input to each layer (the batch itself first).
    inputs: Vec<Matrix>,
    /// Pre-activation of each hidden layer.
    pre: Vec<Matrix>,
}

impl MlpParams {
    pub fn new(layers: Vec<Layer>, activation: Activation) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::usage("an MLP needs at least one layer"));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.weight.rows() {
                return Err(Error::Shape {
                    op: "MlpParams::new bias",
                    left: l.weight.shape(),
                    right: (l.bias.len(), 1),
                });
            }
            if l.bias.iter().any(|b| !b.is_finite()) || !l.weight.is_finite() {
                return Err(Error::numeric(format!("layer {i} has non-finite parameters")));
            }
            if i > 0 && layers[i - 1].weight.rows() != l.weight.cols() {
                return Err(Error::Shape {
                    op: "MlpParams::new chain",
                    left: layers[i - 1].weight.shape(),
                    right: l.weight.shape(),
                });
            }
        }
        Ok(Self { layers, activation })
    }

    /// Uniform `±1/√fan_in` initialization for weights and biases. `dims` lists every width,
    /// input first.
    pub fn init<R: Rng + ?Sized>(dims: &[usize], activation: Activation, rng: &mut R) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::usage(format!("bad MLP dimensions {dims:?}")));
        }
        let layers = dims
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = 1.0 / (fan_in as f64).sqrt();
                let weight: Vec<f64> = (0..fan_in * fan_out).map(|_| rng.random_range(-bound..bound)).collect();
                let bias = (0..fan_out).map(|_| rng.random_range(-bound..bound)).collect();
                Layer {
                    weight: Matrix::new(fan_out, fan_in, weight).expect("finite init"),
                    bias,
                }
            })
            .collect();
        Self::new(layers, activation)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].weight.rows()
    }

    pub fn hidden_dims(&self) -> Vec<usize> {
        self.layers[..self.layers.len() - 1]
            .iter()
            .map(|l| l.weight.rows())
            .collect()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    weight: Matrix::zeros(l.weight.rows(), l.weight.cols()),
                    bias: vec![0.0; l.bias.len()],
                })
                .collect(),
            activation: self.activation,
        }
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let batch = Matrix::new(1, x.len(), x.to_vec())?;
        Ok(self.forward_batch(&batch)?.0.into_data())
    }

    /// Row-wise forward pass over an `N × in` batch.
    pub fn forward_batch(&self, x: &Matrix) -> Result<(Matrix, MlpCache)> {
        if x.cols() != self.input_dim() {
            return Err(Error::Shape {
                op: "mlp_forward",
                left: x.shape(),
                right: self.layers[0].weight.shape(),
            });
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len() - 1);
        let mut current = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = matmul_nt(&current, &layer.weight)?;
            for r in 0..z.rows() {
                for (v, b) in z.row_mut(r).iter_mut().zip(&layer.bias) {
                    *v += b;
                }
            }
            inputs.push(current);
            if i + 1 == self.layers.len() {
                current = z;
            } else {
                let mut a = z.clone();
                a.data_mut().iter_mut().for_each(|v| *v = self.activation.apply(*v));
                pre.push(z);
                current = a;
            }
        }
        if !current.is_finite() {
            return Err(Error::numeric("MLP output is not finite"));
        }
        Ok((current, MlpCache { inputs, pre }))
    }

    /// Reverse-mode pass for a cached batch. Returns parameter gradients (summed over rows)
    /// and the gradient with respect to the batch input.
    pub fn backward_batch(&self, cache: &MlpCache, upstream: &Matrix) -> Result<(MlpParams, Matrix)> {
        let n_layers = self.layers.len();
        let last = &cache.inputs[0];
        if upstream.shape() != (last.rows(), self.output_dim()) {
            return Err(Error::Shape {
                op: "mlp_backward",
                left: upstream.shape(),
                right: (last.rows(), self.output_dim()),
            });
        }
        let mut grads = self.zeros_like();
        let mut dz = upstream.clone();
        for i in (0..n_layers).rev() {
            let layer = &self.layers[i];
            grads.layers[i].weight = matmul_tn(&dz, &cache.inputs[i])?;
            let gb = &mut grads.layers[i].bias;
            for r in 0..dz.rows() {
                for (g, v) in gb.iter_mut().zip(dz.row(r)) {
                    *g += v;
                }
            }
            let mut da = matmul(&dz, &layer.weight)?;
            if i > 0 {
                let z = &cache.pre[i - 1];
                for (d, &zv) in da.data_mut().iter_mut().zip(z.data()) {
                    *d *= self.activation.derivative(zv);
                }
            }
            dz = da;
        }
        Ok((grads, dz))
    }

    /// Single-vector convenience around [`MlpParams::backward_batch`].
    pub fn backward(&self, x: &[f64], upstream: &[f64]) -> Result<(MlpParams, Vec<f64>)> {
        let batch = Matrix::new(1, x.len(), x.to_vec())?;
        let (_, cache) = self.forward_batch(&batch)?;
        let up = Matrix::new(1, upstream.len(), upstream.to_vec())?;
        let (g, dx) = self.backward_batch(&cache, &up)?;
        Ok((g, dx.into_data()))
    }
}

impl ParamTensors for MlpParams {
    fn tensors(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.data(), l.bias.as_slice()])
            .collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weight.data_mut(), l.bias.as_mut_slice()])
            .collect()
    }
}

pub fn mlp_forward(params: &MlpParams, x: &[f64]) -> Result<Vec<f64>> {
    params.forward(x)
}

pub fn mlp_backward(params: &MlpParams, x: &[f64], upstream: &[f64]) -> Result<(MlpParams, Vec<f64>)> {
    params.backward(x, upstream)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkernel::{finite_diff_grad, grad_check};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn layer(w: &[&[f64]], b: &[f64]) -> Layer {
        Layer {
            weight: Matrix::from_rows(&w.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap(),
            bias: b.to_vec(),
        }
    }

    #[test]
    fn zero_weights_emit_bias() {
        let mlp = MlpParams::new(vec![layer(&[&[0.0, 0.0], &[0.0, 0.0]], &[0.5, -1.5])], Activation::Relu).unwrap();
        assert_eq!(mlp.forward(&[7.0, -3.0]).unwrap(), vec![0.5, -1.5]);
    }

    #[test]
    fn identity_layer() {
        let mlp = MlpParams::new(vec![layer(&[&[1.0, 0.0], &[0.0, 1.0]], &[0.0, 0.0])], Activation::Tanh).unwrap();
        assert_eq!(mlp.forward(&[0.3, -2.0]).unwrap(), vec![0.3, -2.0]);
    }

    #[test]
    fn two_layer_relu_by_hand() {
        let mlp = MlpParams::new(
            vec![layer(&[&[1.0, -1.0]], &[0.0]), layer(&[&[2.0]], &[1.0])],
            Activation::Relu,
        )
        .unwrap();
        assert_eq!(mlp.forward(&[3.0, 1.0]).unwrap(), vec![5.0]);
        assert_eq!(mlp.hidden_dims(), vec![1]);
    }

    #[test]
    fn shape_errors() {
        let mlp = MlpParams::new(vec![layer(&[&[1.0, -1.0]], &[0.0])], Activation::Relu).unwrap();
        assert!(mlp.forward(&[1.0]).is_err());
        assert!(mlp.backward(&[1.0, 2.0], &[1.0, 1.0]).is_err());
        assert!(MlpParams::new(
            vec![layer(&[&[1.0]], &[0.0]), layer(&[&[1.0, 1.0]], &[0.0])],
            Activation::Relu
        )
        .is_err());
        assert!(MlpParams::new(vec![layer(&[&[1.0]], &[0.0, 1.0])], Activation::Relu).is_err());
    }

    #[test]
    fn linear_input_gradient_is_transpose_product() {
        let mlp = MlpParams::new(
            vec![layer(&[&[1.0, 2.0, 3.0], &[-1.0, 0.5, 4.0]], &[0.1, 0.2])],
            Activation::Relu,
        )
        .unwrap();
        let (_, dx) = mlp.backward(&[0.3, 0.1, -0.2], &[2.0, -1.0]).unwrap();
        assert_eq!(dx, vec![3.0, 3.5, 2.0]);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mlp = MlpParams::init(&[4, 6, 3], Activation::Relu, &mut rng).unwrap();
        let (g, dx) = mlp.backward(&[0.1, 0.2, 0.3, 0.4], &[0.0; 3]).unwrap();
        assert!(dx.iter().all(|&v| v == 0.0));
        assert!(g.tensors().iter().all(|t| t.iter().all(|&v| v == 0.0)));
    }

    /// Loss `c · mlp(x)` as a function of the flattened parameters.
    fn check_against_fd(mlp: &MlpParams, x: &[f64], c: &[f64], eps: f64) -> f64 {
        let (g, dx) = mlp.backward(x, c).unwrap();
        let theta = Matrix::new(1, mlp.param_count(), mlp.flatten()).unwrap();
        let numeric = finite_diff_grad(
            |t| {
                let mut m = mlp.clone();
                m.assign_flat(t.data());
                m.forward(x).unwrap().iter().zip(c).map(|(a, b)| a * b).sum()
            },
            &theta,
            eps,
        )
        .unwrap();
        let analytic = Matrix::new(1, mlp.param_count(), g.flatten()).unwrap();
        let r1 = grad_check(&analytic, &numeric, 1.0).unwrap().max_rel_error;

        let xm = Matrix::new(1, x.len(), x.to_vec()).unwrap();
        let numeric_x = finite_diff_grad(
            |t| mlp.forward(t.data()).unwrap().iter().zip(c).map(|(a, b)| a * b).sum(),
            &xm,
            eps,
        )
        .unwrap();
        let r2 = grad_check(&Matrix::new(1, dx.len(), dx).unwrap(), &numeric_x, 1.0)
            .unwrap()
            .max_rel_error;
        r1.max(r2)
    }

    #[test]
    fn relu_two_layer_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mlp = MlpParams::init(&[5, 7, 3], Activation::Relu, &mut rng).unwrap();
        let x: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let c: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let err = check_against_fd(&mlp, &x, &c, 1e-6);
        assert!(err < 1e-6, "max rel error {err}");
    }

    #[test]
    fn tanh_matches_finite_differences_over_many_draws() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for trial in 0..100 {
            let dims = [
                rng.random_range(1..6),
                rng.random_range(1..8),
                rng.random_range(1..8),
                rng.random_range(1..4),
            ];
            let mlp = MlpParams::init(&dims, Activation::Tanh, &mut rng).unwrap();
            let x: Vec<f64> = (0..dims[0]).map(|_| rng.random_range(-1.0..1.0)).collect();
            let c: Vec<f64> = (0..dims[3]).map(|_| rng.random_range(-1.0..1.0)).collect();
            let err = check_against_fd(&mlp, &x, &c, 1e-5);
            assert!(err < 1e-5, "trial {trial}: max rel error {err}");
        }
    }
}
