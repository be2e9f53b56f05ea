use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Grads, Parameterized};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    Identity,
}

/// Affine layer `y = x W + b` with `W` stored as `(in, out)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
}

impl Dense {
    pub fn in_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.ncols()
    }
}

/// Feed-forward network: ReLU between hidden layers, identity output.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Dense>,
}

/// Activations kept from a forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct MlpCache {
    /// Input to each layer (post-activation of the previous one).
    inputs: Vec<Array2<f64>>,
    /// Pre-activation of each layer.
    pre: Vec<Array2<f64>>,
}

impl Mlp {
    /// He-uniform initialisation: weights in `±sqrt(6 / fan_in)`, zero bias.
    pub fn new<R: Rng + ?Sized>(layer_sizes: &[usize], rng: &mut R) -> Result<Self> {
        Self::validate_sizes(layer_sizes)?;
        let n = layer_sizes.len() - 1;
        let layers = layer_sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let limit = (6.0 / fan_in as f64).sqrt();
                let weight = Array2::from_shape_simple_fn((fan_in, fan_out), || {
                    rng.random_range(-limit..limit)
                });
                Dense {
                    weight,
                    bias: Array1::zeros(fan_out),
                    activation: if i + 1 == n {
                        Activation::Identity
                    } else {
                        Activation::Relu
                    },
                }
            })
            .collect();
        Ok(Mlp { layers })
    }

    pub fn zeros(layer_sizes: &[usize]) -> Result<Self> {
        Self::validate_sizes(layer_sizes)?;
        let n = layer_sizes.len() - 1;
        let layers = layer_sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| Dense {
                weight: Array2::zeros((w[0], w[1])),
                bias: Array1::zeros(w[1]),
                activation: if i + 1 == n {
                    Activation::Identity
                } else {
                    Activation::Relu
                },
            })
            .collect();
        Ok(Mlp { layers })
    }

    pub fn from_layers(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("mlp needs at least one layer".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::shape(
                    "Mlp::from_layers",
                    pair[0].out_dim(),
                    pair[1].in_dim(),
                ));
            }
        }
        for l in &layers {
            if l.bias.len() != l.out_dim() {
                return Err(Error::shape(
                    "Mlp::from_layers bias",
                    l.out_dim(),
                    l.bias.len(),
                ));
            }
        }
        Ok(Mlp { layers })
    }

    fn validate_sizes(sizes: &[usize]) -> Result<()> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::Config(format!(
                "layer sizes must list at least input and output, all positive; got {sizes:?}"
            )));
        }
        Ok(())
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.input_dim()];
        sizes.extend(self.layers.iter().map(Dense::out_dim));
        sizes
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    fn check_input(&self, input: &ArrayView2<'_, f64>) -> Result<()> {
        if input.ncols() != self.input_dim() {
            return Err(Error::shape("mlp input", self.input_dim(), input.ncols()));
        }
        Ok(())
    }

    pub fn forward(&self, input: &ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.check_input(input)?;
        let mut x = input.to_owned();
        for layer in &self.layers {
            let mut z = x.dot(&layer.weight);
            z += &layer.bias;
            if layer.activation == Activation::Relu {
                z.mapv_inplace(|v| v.max(0.0));
            }
            x = z;
        }
        Ok(x)
    }

    pub fn forward_cached(&self, input: &ArrayView2<'_, f64>) -> Result<(Array2<f64>, MlpCache)> {
        self.check_input(input)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut x = input.to_owned();
        for layer in &self.layers {
            let mut z = x.dot(&layer.weight);
            z += &layer.bias;
            let out = match layer.activation {
                Activation::Relu => z.mapv(|v| v.max(0.0)),
                Activation::Identity => z.clone(),
            };
            inputs.push(x);
            pre.push(z);
            x = out;
        }
        Ok((x, MlpCache { inputs, pre }))
    }

    /// Reverse-mode pass. Returns parameter gradients (block order of
    /// [`Parameterized::params`]) and the gradient with respect to the input.
    pub fn backward(
        &self,
        cache: &MlpCache,
        upstream: &ArrayView2<'_, f64>,
    ) -> Result<(Grads, Array2<f64>)> {
        let batch = cache.inputs[0].nrows();
        if upstream.dim() != (batch, self.output_dim()) {
            return Err(Error::shape(
                "mlp upstream gradient",
                format!("{:?}", (batch, self.output_dim())),
                format!("{:?}", upstream.dim()),
            ));
        }
        let mut blocks = vec![Vec::new(); 2 * self.layers.len()];
        let mut delta = upstream.to_owned();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            if layer.activation == Activation::Relu {
                ndarray::Zip::from(&mut delta)
                    .and(&cache.pre[i])
                    .for_each(|d, &z| {
                        if z <= 0.0 {
                            *d = 0.0;
                        }
                    });
            }
            let dw = cache.inputs[i].t().dot(&delta);
            let db = delta.sum_axis(Axis(0));
            blocks[2 * i] = dw.iter().copied().collect();
            blocks[2 * i + 1] = db.to_vec();
            delta = delta.dot(&layer.weight.t());
        }
        Ok((Grads { blocks }, delta))
    }
}

impl Parameterized for Mlp {
    fn params(&self) -> Vec<(String, &[f64])> {
        let mut out = Vec::with_capacity(2 * self.layers.len());
        for (i, l) in self.layers.iter().enumerate() {
            out.push((
                format!("layer{i}.weight"),
                l.weight.as_slice().expect("standard layout"),
            ));
            out.push((
                format!("layer{i}.bias"),
                l.bias.as_slice().expect("standard layout"),
            ));
        }
        out
    }

    fn param_shapes(&self) -> Vec<Vec<usize>> {
        self.layers
            .iter()
            .flat_map(|l| [vec![l.in_dim(), l.out_dim()], vec![l.out_dim()]])
            .collect()
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(2 * self.layers.len());
        for l in &mut self.layers {
            out.push(l.weight.as_slice_mut().expect("standard layout"));
            out.push(l.bias.as_slice_mut().expect("standard layout"));
        }
        out
    }
}
