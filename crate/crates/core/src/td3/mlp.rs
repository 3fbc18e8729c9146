//! Fully connected ReLU networks with explicit reverse-mode gradients.
//! Batches are column-major: one sample per column.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::linalg::{from_row_major, to_row_major};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Output {
    Linear,
    /// `scale * tanh(z)`.
    Tanh { scale: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    /// `out x in`.
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Layer>,
    pub output: Output,
}

/// Gradient with the same layout as the network parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gradient {
    pub layers: Vec<Layer>,
}

/// Intermediate values kept for the backward pass.
pub struct Trace {
    /// Inputs to each layer; `inputs[0]` is the network input.
    inputs: Vec<DMatrix<f64>>,
    output: DMatrix<f64>,
}

impl Trace {
    pub fn output(&self) -> &DMatrix<f64> {
        &self.output
    }
}

impl Mlp {
    /// Uniform fan-in initialization `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`;
    /// the last layer is further multiplied by `last_scale`.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], output: Output, last_scale: f64, rng: &mut R) -> Self {
        assert!(sizes.len() >= 2, "a network needs input and output sizes");
        let count = sizes.len() - 1;
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(k, w)| {
                let bound = 1.0 / (w[0] as f64).sqrt();
                let s = if k + 1 == count { last_scale } else { 1.0 };
                Layer {
                    weight: DMatrix::from_fn(w[1], w[0], |_, _| s * rng.random_range(-bound..bound)),
                    bias: DVector::from_fn(w[1], |_, _| s * rng.random_range(-bound..bound)),
                }
            })
            .collect();
        Mlp { layers, output }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").weight.nrows()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.input_dim()];
        s.extend(self.layers.iter().map(|l| l.weight.nrows()));
        s
    }

    pub fn forward(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        self.trace(x).output
    }

    pub fn trace(&self, x: &DMatrix<f64>) -> Trace {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (k, layer) in self.layers.iter().enumerate() {
            let mut z = &layer.weight * &h;
            for mut col in z.column_iter_mut() {
                col += &layer.bias;
            }
            inputs.push(h);
            h = if k < last {
                z.map(|v| v.max(0.0))
            } else {
                match self.output {
                    Output::Linear => z,
                    Output::Tanh { scale } => z.map(|v| scale * v.tanh()),
                }
            };
        }
        Trace { inputs, output: h }
    }

    /// Back-propagates `d_out` (gradient of a scalar w.r.t. the output) and
    /// returns the parameter gradient and the gradient w.r.t. the input.
    pub fn backward(&self, trace: &Trace, d_out: &DMatrix<f64>) -> (Gradient, DMatrix<f64>) {
        let last = self.layers.len() - 1;
        let mut delta = match self.output {
            Output::Linear => d_out.clone(),
            Output::Tanh { scale } => {
                // y = s tanh(z) => dy/dz = s (1 - (y/s)^2).
                d_out.zip_map(&trace.output, |g, y| {
                    let t = y / scale;
                    g * scale * (1.0 - t * t)
                })
            }
        };
        let mut grads = Vec::with_capacity(self.layers.len());
        for k in (0..=last).rev() {
            let input = &trace.inputs[k];
            let weight = delta.clone() * input.transpose();
            let bias = delta.column_sum();
            grads.push(Layer { weight, bias });
            let mut back = self.layers[k].weight.transpose() * &delta;
            if k > 0 {
                // Inputs to layer k are ReLU outputs of layer k - 1.
                back.zip_apply(input, |g, h| {
                    if h <= 0.0 {
                        *g = 0.0;
                    }
                });
            }
            delta = back;
        }
        grads.reverse();
        (Gradient { layers: grads }, delta)
    }

    /// `self <- (1 - tau) self + tau other`.
    pub fn soft_update(&mut self, other: &Mlp, tau: f64) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight *= 1.0 - tau;
            a.weight += &b.weight * tau;
            a.bias *= 1.0 - tau;
            a.bias += &b.bias * tau;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }
}

impl Gradient {
    pub fn zeros_like(net: &Mlp) -> Self {
        Gradient {
            layers: net
                .layers
                .iter()
                .map(|l| Layer {
                    weight: DMatrix::zeros(l.weight.nrows(), l.weight.ncols()),
                    bias: DVector::zeros(l.bias.len()),
                })
                .collect(),
        }
    }
}

#[derive(Serialize, Deserialize)]
pub(crate) struct LayerWire {
    rows: usize,
    cols: usize,
    weight: Vec<f64>,
    bias: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
pub(crate) struct MlpWire {
    layers: Vec<LayerWire>,
    output: Output,
}

impl From<&Layer> for LayerWire {
    fn from(l: &Layer) -> Self {
        LayerWire {
            rows: l.weight.nrows(),
            cols: l.weight.ncols(),
            weight: to_row_major(&l.weight),
            bias: l.bias.iter().cloned().collect(),
        }
    }
}

impl TryFrom<LayerWire> for Layer {
    type Error = crate::error::Error;

    fn try_from(w: LayerWire) -> crate::error::Result<Self> {
        if w.bias.len() != w.rows {
            return Err(crate::error::Error::Dimension("bias length does not match layer rows".into()));
        }
        Ok(Layer { weight: from_row_major(w.rows, w.cols, &w.weight)?, bias: DVector::from_vec(w.bias) })
    }
}

impl Serialize for Layer {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        LayerWire::from(self).serialize(s)
    }
}

impl<'de> Deserialize<'de> for Layer {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        Layer::try_from(LayerWire::deserialize(d)?).map_err(serde::de::Error::custom)
    }
}

impl Serialize for Mlp {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        MlpWire { layers: self.layers.iter().map(LayerWire::from).collect(), output: self.output }.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Mlp {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let w = MlpWire::deserialize(d)?;
        let layers = w
            .layers
            .into_iter()
            .map(Layer::try_from)
            .collect::<crate::error::Result<Vec<_>>>()
            .map_err(serde::de::Error::custom)?;
        if layers.is_empty() {
            return Err(serde::de::Error::custom("network without layers"));
        }
        Ok(Mlp { layers, output: w.output })
    }
}
