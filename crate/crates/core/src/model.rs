//! A softmax MLP classifier read as an energy-based model.
//!
//! With logits `f(x)` and temperature `T`:
//!
//! * class energy      `E(x, y) = -f(x)[y] / T`
//! * free energy       `E(x)    = -T · logsumexp(f(x) / T)`
//! * posterior         `p(y|x)  = softmax(f(x) / T)[y]`
//! * joint (unnorm.)   `log p(x, y) + log Z = f(x)[y] / T`
//! * marginal (unnorm.) `log p(x) + log Z   = logsumexp(f(x) / T)`
//!
//! The partition function `Z` is never evaluated; every log-density here
//! is offset by the same unknown `log Z`.

use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Activation, Graph, Var};
use crate::tensor::{self, Tensor};

/// One affine layer, `x · weight + bias` with `weight: [in × out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Layer {
    pub fn in_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[1]
    }
}

/// Architecture and temperature of an [`EnergyModel`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub temperature: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: alloc::vec![64, 64],
            activation: Activation::default(),
            temperature: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnergyModel {
    layers: Vec<Layer>,
    activation: Activation,
    temperature: f64,
}

/// Model parameters placed on a graph, in layer order.
#[derive(Debug, Clone)]
pub struct BoundModel {
    pub layers: Vec<(Var, Var)>,
}

impl BoundModel {
    /// Weight and bias vars interleaved, matching [`EnergyModel::params`].
    pub fn vars(&self) -> impl Iterator<Item = Var> + '_ {
        self.layers.iter().flat_map(|&(w, b)| [w, b])
    }
}

/// Logits of a batch together with the inputs that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitsBatch {
    pub values: Tensor,
    pub inputs: Tensor,
    pub temperature: f64,
}

impl EnergyModel {
    pub fn new(layers: Vec<Layer>, activation: Activation, temperature: f64) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::contract("EnergyModel::new", "at least one layer is required"));
        }
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::contract("EnergyModel::new", "temperature must be positive"));
        }
        for (i, l) in layers.iter().enumerate() {
            let (_, out) = l.weight.dims2()?;
            if l.bias.shape() != [out] {
                return Err(Error::shape("EnergyModel::new", l.weight.shape(), l.bias.shape()));
            }
            if let Some(next) = layers.get(i + 1) {
                if next.in_dim() != out {
                    return Err(Error::shape("EnergyModel::new", l.weight.shape(), next.weight.shape()));
                }
            }
        }
        Ok(Self {
            layers,
            activation,
            temperature,
        })
    }

    /// He-scaled Gaussian weights (`1/fan_in` variance for tanh), zero biases.
    pub fn init<R: Rng + ?Sized>(
        input_dim: usize,
        num_classes: usize,
        cfg: &ModelConfig,
        rng: &mut R,
    ) -> Result<Self> {
        if input_dim == 0 || num_classes == 0 {
            return Err(Error::contract("EnergyModel::init", "dimensions must be positive"));
        }
        let gain = match cfg.activation {
            Activation::LeakyRelu { .. } => 2.0,
            Activation::Tanh => 1.0,
        };
        let layers = layer_dims(input_dim, num_classes, &cfg.hidden)
            .map(|(i, o)| Layer {
                weight: Tensor::randn(&[i, o], libm::sqrt(gain / i as f64), rng),
                bias: Tensor::zeros(&[o]),
            })
            .collect();
        Self::new(layers, cfg.activation, cfg.temperature)
    }

    /// All-zero parameters: constant zero logits everywhere.
    pub fn zeros(input_dim: usize, num_classes: usize, cfg: &ModelConfig) -> Result<Self> {
        let layers = layer_dims(input_dim, num_classes, &cfg.hidden)
            .map(|(i, o)| Layer {
                weight: Tensor::zeros(&[i, o]),
                bias: Tensor::zeros(&[o]),
            })
            .collect();
        Self::new(layers, cfg.activation, cfg.temperature)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn num_classes(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn hidden(&self) -> Vec<usize> {
        self.layers[..self.layers.len() - 1]
            .iter()
            .map(Layer::out_dim)
            .collect()
    }

    pub fn params(&self) -> impl Iterator<Item = &Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias])
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias])
    }

    pub fn num_params(&self) -> usize {
        self.params().map(Tensor::numel).sum()
    }

    /// Copies the parameters onto `g`, tracked or as constants.
    pub fn bind(&self, g: &mut Graph, track: bool) -> BoundModel {
        let leaf = |g: &mut Graph, t: &Tensor| {
            if track {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        let layers = self
            .layers
            .iter()
            .map(|l| (leaf(g, &l.weight), leaf(g, &l.bias)))
            .collect();
        BoundModel { layers }
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let (_, d) = x.dims2()?;
        if d != self.input_dim() {
            return Err(Error::shape("logits", &[self.input_dim()], x.shape()));
        }
        if !x.is_finite() {
            return Err(Error::NonFinite { what: "model input" });
        }
        Ok(())
    }

    /// Logits on `g` for inputs `x` (`[n × D]`).
    pub fn forward(&self, g: &mut Graph, bound: &BoundModel, x: Var) -> Result<Var> {
        self.check_input(g.value(x))?;
        let mut h = x;
        let last = bound.layers.len() - 1;
        for (i, &(w, b)) in bound.layers.iter().enumerate() {
            let z = g.matmul(h, w)?;
            h = g.add_row_bias(z, b)?;
            if i < last {
                h = g.activation(h, self.activation);
            }
        }
        Ok(h)
    }

    /// Per-sample free energy `[n]` of logits already on the graph.
    pub fn free_energy_of_logits(&self, g: &mut Graph, logits: Var) -> Result<Var> {
        let t = self.temperature;
        let scaled = g.scale(logits, 1.0 / t);
        let lse = g.log_sum_exp_rows(scaled)?;
        Ok(g.scale(lse, -t))
    }

    pub fn logits(&self, x: &Tensor) -> Result<LogitsBatch> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let out = self.forward(&mut g, &bound, xv)?;
        Ok(LogitsBatch {
            values: g.value(out).clone(),
            inputs: x.clone(),
            temperature: self.temperature,
        })
    }

    pub fn class_energy(&self, x: &Tensor, y: usize) -> Result<Vec<f64>> {
        self.logits(x)?.class_energy(y)
    }

    pub fn free_energy(&self, x: &Tensor) -> Result<Vec<f64>> {
        Ok(self.logits(x)?.free_energy())
    }

    pub fn class_posterior(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.logits(x)?.posterior())
    }

    pub fn log_joint_unnorm(&self, x: &Tensor, y: usize) -> Result<Vec<f64>> {
        self.logits(x)?.log_joint_unnorm(y)
    }

    pub fn log_marginal_unnorm(&self, x: &Tensor) -> Result<Vec<f64>> {
        Ok(self.logits(x)?.log_marginal_unnorm())
    }

    /// Per-sample free energies and their gradient with respect to `x`.
    pub fn input_gradient(&self, x: &Tensor) -> Result<(Vec<f64>, Tensor)> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let xv = g.param(x.clone());
        let logits = self.forward(&mut g, &bound, xv)?;
        let fe = self.free_energy_of_logits(&mut g, logits)?;
        // Rows are independent, so d(sum)/dx holds each sample's own gradient.
        let total = g.sum(fe);
        g.backward(total)?;
        let energies = g.value(fe).data().to_vec();
        let grad = g.grad(xv).expect("input is tracked").to_vec();
        Ok((energies, Tensor::new(x.shape(), grad)?))
    }
}

impl LogitsBatch {
    pub fn num_classes(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn len(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn check_class(&self, y: usize) -> Result<()> {
        if y >= self.num_classes() {
            return Err(Error::Index {
                what: "class index",
                index: y,
                bound: self.num_classes(),
            });
        }
        Ok(())
    }

    fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.data().chunks(self.num_classes())
    }

    fn scaled_rows(&self) -> impl Iterator<Item = Vec<f64>> + '_ {
        // Same arithmetic as `free_energy_of_logits` so both routes agree bitwise.
        let inv = 1.0 / self.temperature;
        self.rows().map(move |r| r.iter().map(|v| v * inv).collect())
    }

    pub fn class_energy(&self, y: usize) -> Result<Vec<f64>> {
        self.check_class(y)?;
        Ok(self.rows().map(|r| -r[y] / self.temperature).collect())
    }

    pub fn free_energy(&self) -> Vec<f64> {
        let t = self.temperature;
        self.scaled_rows().map(|r| -t * tensor::log_sum_exp(&r)).collect()
    }

    pub fn posterior(&self) -> Tensor {
        let mut data = Vec::with_capacity(self.values.numel());
        for r in self.scaled_rows() {
            data.extend(tensor::softmax(&r));
        }
        Tensor::new(self.values.shape(), data).expect("same shape as logits")
    }

    /// `log p(y|x)` per sample, computed as `z_y − logsumexp(z)`.
    pub fn log_posterior(&self, y: usize) -> Result<Vec<f64>> {
        self.check_class(y)?;
        Ok(self
            .scaled_rows()
            .map(|r| r[y] - tensor::log_sum_exp(&r))
            .collect())
    }

    pub fn log_joint_unnorm(&self, y: usize) -> Result<Vec<f64>> {
        self.check_class(y)?;
        Ok(self.rows().map(|r| r[y] / self.temperature).collect())
    }

    pub fn log_marginal_unnorm(&self) -> Vec<f64> {
        self.scaled_rows().map(|r| tensor::log_sum_exp(&r)).collect()
    }
}

fn layer_dims(input: usize, classes: usize, hidden: &[usize]) -> impl Iterator<Item = (usize, usize)> + '_ {
    let ins = core::iter::once(input).chain(hidden.iter().copied());
    let outs = hidden.iter().copied().chain(core::iter::once(classes));
    ins.zip(outs)
}
