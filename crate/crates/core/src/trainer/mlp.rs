//! Fully connected networks with a linear scalar readout.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::initkit::{sample_layer, InitScheme, LayerWeights};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative in terms of the pre-activation `x` and output `y`.
    /// The ReLU kink gets derivative 0.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
        }
    }
}

/// Hidden layers use `activation`; the last layer is a linear readout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<LayerWeights>,
    pub activation: Activation,
}

/// Cached values of a forward pass over a batch (one sample per row).
#[derive(Clone, Debug)]
pub struct ForwardPass {
    /// Layer inputs: `inputs[0]` is the batch, `inputs[l]` the activations feeding layer `l`.
    pub inputs: Vec<Array2<f64>>,
    /// Pre-activations of every layer; the last one is the network output.
    pub pre: Vec<Array2<f64>>,
}

impl ForwardPass {
    pub fn output(&self) -> &Array2<f64> {
        self.pre.last().expect("network has layers")
    }

    pub fn is_finite(&self) -> bool {
        self.output().iter().all(|x| x.is_finite())
    }
}

/// Gradients with the same shapes as the network parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Array2<f64>>,
    pub bias: Vec<Array1<f64>>,
}

impl Gradients {
    pub fn norm(&self) -> f64 {
        self.weights
            .iter()
            .flat_map(|w| w.iter())
            .chain(self.bias.iter().flat_map(|b| b.iter()))
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.iter().all(|x| x.is_finite()))
            && self.bias.iter().all(|b| b.iter().all(|x| x.is_finite()))
    }
}

impl Mlp {
    pub fn new(layers: Vec<LayerWeights>, activation: Activation) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("layers", "network needs at least one layer"));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].n_out() != pair[1].n_in() {
                return Err(Error::Shape(format!(
                    "layer {i} has {} outputs but layer {} takes {} inputs",
                    pair[0].n_out(),
                    i + 1,
                    pair[1].n_in()
                )));
            }
        }
        if layers.iter().any(|l| !l.is_finite()) {
            return Err(Error::invalid("layers", "parameters must be finite"));
        }
        Ok(Self { layers, activation })
    }

    /// `hidden` layers of `width` nodes plus a scalar readout, all drawn from `scheme`.
    pub fn init<R: Rng + ?Sized>(
        scheme: &InitScheme,
        input_dim: usize,
        width: usize,
        hidden: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        let mut layers = Vec::with_capacity(hidden + 1);
        let mut n_in = input_dim;
        for _ in 0..hidden {
            layers.push(sample_layer(scheme, n_in, width, rng)?);
            n_in = width;
        }
        layers.push(sample_layer(scheme, n_in, 1, rng)?);
        Self::new(layers, activation)
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].n_in()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").n_out()
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub fn forward(&self, batch: &Array2<f64>) -> Result<ForwardPass> {
        if batch.ncols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "batch has {} features, network expects {}",
                batch.ncols(),
                self.input_dim()
            )));
        }
        let last = self.layers.len() - 1;
        let mut inputs = vec![batch.clone()];
        let mut pre = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            let mut h = inputs[l].dot(&layer.weights.t());
            h += &layer.bias;
            if l < last {
                inputs.push(h.mapv(|x| self.activation.apply(x)));
            }
            pre.push(h);
        }
        Ok(ForwardPass { inputs, pre })
    }

    pub fn predict(&self, batch: &Array2<f64>) -> Result<Array2<f64>> {
        Ok(self.forward(batch)?.pre.pop().expect("non-empty"))
    }

    /// Gradients of the mean squared error `mean((output - targets)^2)`.
    pub fn backward(&self, pass: &ForwardPass, targets: &Array2<f64>) -> Result<Gradients> {
        let out = pass.output();
        if out.dim() != targets.dim() {
            return Err(Error::Shape(format!("outputs {:?} vs targets {:?}", out.dim(), targets.dim())));
        }
        let scale = 2.0 / out.len() as f64;
        let mut delta = (out - targets) * scale;
        let n = self.layers.len();
        let mut gw = Vec::with_capacity(n);
        let mut gb = Vec::with_capacity(n);
        for l in (0..n).rev() {
            gw.push(delta.t().dot(&pass.inputs[l]));
            gb.push(delta.sum_axis(Axis(0)));
            if l > 0 {
                let mut back = delta.dot(&self.layers[l].weights);
                ndarray::Zip::from(&mut back)
                    .and(&pass.pre[l - 1])
                    .and(&pass.inputs[l])
                    .for_each(|d, &x, &y| *d *= self.activation.derivative(x, y));
                delta = back;
            }
        }
        gw.reverse();
        gb.reverse();
        Ok(Gradients { weights: gw, bias: gb })
    }

    pub fn mse(&self, batch: &Array2<f64>, targets: &Array2<f64>) -> Result<f64> {
        let out = self.predict(batch)?;
        if out.dim() != targets.dim() {
            return Err(Error::Shape(format!("outputs {:?} vs targets {:?}", out.dim(), targets.dim())));
        }
        Ok(mse(&out, targets))
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(LayerWeights::is_finite)
    }

    /// Parameters in a fixed order: per layer, weights row-major then bias.
    pub fn flat_params(&self) -> Vec<f64> {
        self.layers.iter().flat_map(|l| l.weights.iter().chain(l.bias.iter()).copied()).collect()
    }

    /// Little-endian bytes of [`Mlp::flat_params`], for digests.
    pub fn param_bytes(&self) -> Vec<u8> {
        self.flat_params().iter().flat_map(|x| x.to_le_bytes()).collect()
    }
}

pub fn mse(out: &Array2<f64>, targets: &Array2<f64>) -> f64 {
    let n = out.len() as f64;
    out.iter().zip(targets.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n
}

impl Gradients {
    pub fn flat(&self) -> Vec<f64> {
        self.weights.iter().zip(&self.bias).flat_map(|(w, b)| w.iter().chain(b.iter()).copied()).collect()
    }
}
