//! Langevin sampling from the model's marginal density, with a persistent
//! replay buffer of chain states.
//!
//! One step of the chain is
//!
//! ```text
//! x ← clamp( x − (ε²/2)·∇ₓE(x) + σ·z ),   z ~ N(0, I)
//! ```
//!
//! where `σ = ε` (the exact discretized diffusion) unless
//! [`SgldConfig::decouple_noise`] selects `σ = noise_scale`.

use alloc::vec::Vec;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::model::EnergyModel;
use crate::tensor::Tensor;

/// Energies beyond this magnitude are reported as divergence.
pub const DIVERGENCE_ENERGY: f64 = 1e6;

/// Axis-aligned box `[low, high]^D` that chain states live in.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DataBox {
    pub low: f64,
    pub high: f64,
}

impl Default for DataBox {
    fn default() -> Self {
        Self { low: -3.0, high: 3.0 }
    }
}

impl DataBox {
    pub fn contains(&self, v: f64) -> bool {
        v >= self.low && v <= self.high
    }

    pub fn clamp(&self, v: f64) -> f64 {
        v.clamp(self.low, self.high)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        self.low + (self.high - self.low) * rng.random::<f64>()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SgldConfig {
    pub steps: usize,
    pub step_size: f64,
    pub noise_scale: f64,
    pub reinit_prob: f64,
    pub clip_grad: Option<f64>,
    pub decouple_noise: bool,
    pub bounds: DataBox,
}

impl Default for SgldConfig {
    /// Noise tied to the step size, 50 steps.
    fn default() -> Self {
        Self {
            steps: 50,
            step_size: 0.1,
            noise_scale: 0.01,
            reinit_prob: 0.05,
            clip_grad: Some(10.0),
            decouple_noise: false,
            bounds: DataBox::default(),
        }
    }
}

impl SgldConfig {
    /// Decoupled preset for training: drift `ε²/2 = 0.125` with small fixed
    /// noise `0.01`.
    ///
    /// A unit drift is common for images, but on a handful of standardized
    /// features it throws chains against the box walls within a few steps
    /// and training diverges.
    pub fn practical() -> Self {
        Self {
            step_size: 0.5,
            noise_scale: 0.01,
            decouple_noise: true,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::contract("SgldConfig", msg));
        if self.steps == 0 {
            return bad("steps must be at least 1");
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return bad("step_size must be positive");
        }
        if !(self.noise_scale > 0.0 && self.noise_scale.is_finite()) {
            return bad("noise_scale must be positive");
        }
        if !(0.0..=1.0).contains(&self.reinit_prob) {
            return bad("reinit_prob must lie in [0, 1]");
        }
        if matches!(self.clip_grad, Some(c) if !(c > 0.0)) {
            return bad("clip_grad must be positive");
        }
        if !(self.bounds.low < self.bounds.high) {
            return bad("data box must have low < high");
        }
        Ok(())
    }

    /// Standard deviation of the injected noise.
    pub fn noise_std(&self) -> f64 {
        if self.decouple_noise {
            self.noise_scale
        } else {
            self.step_size
        }
    }
}

/// Anything with a per-sample energy differentiable in the input.
pub trait EnergyFunction {
    fn input_dim(&self) -> usize;

    /// Per-sample energies of `x` (`[n × D]`) and `∇ₓE`.
    fn energy_and_grad(&self, x: &Tensor) -> Result<(Vec<f64>, Tensor)>;
}

impl EnergyFunction for EnergyModel {
    fn input_dim(&self) -> usize {
        EnergyModel::input_dim(self)
    }

    fn energy_and_grad(&self, x: &Tensor) -> Result<(Vec<f64>, Tensor)> {
        self.input_gradient(x)
    }
}

/// `E(x) = ‖x‖²/2`, whose Gibbs density is the standard normal.
#[derive(Debug, Clone, Copy)]
pub struct QuadraticEnergy {
    pub dim: usize,
}

impl EnergyFunction for QuadraticEnergy {
    fn input_dim(&self) -> usize {
        self.dim
    }

    fn energy_and_grad(&self, x: &Tensor) -> Result<(Vec<f64>, Tensor)> {
        let e = x
            .data()
            .chunks(self.dim)
            .map(|r| 0.5 * r.iter().map(|v| v * v).sum::<f64>())
            .collect();
        Ok((e, x.clone()))
    }
}

/// Runs `cfg.steps` Langevin updates from `x0` and returns the final states.
pub fn sgld_chain<E, R>(energy: &E, x0: &Tensor, cfg: &SgldConfig, rng: &mut R) -> Result<Tensor>
where
    E: EnergyFunction + ?Sized,
    R: Rng + ?Sized,
{
    cfg.validate()?;
    let (_, d) = x0.dims2()?;
    if d != energy.input_dim() {
        return Err(Error::shape("sgld_chain", &[energy.input_dim()], x0.shape()));
    }
    if !x0.is_finite() {
        return Err(Error::NonFinite { what: "sgld_chain start" });
    }
    let drift = 0.5 * cfg.step_size * cfg.step_size;
    let sigma = cfg.noise_std();
    let mut x = x0.clone();
    for step in 0..cfg.steps {
        let (energies, grad) = energy.energy_and_grad(&x)?;
        if let Some(&bad) = energies
            .iter()
            .find(|e| !e.is_finite() || e.abs() > DIVERGENCE_ENERGY)
        {
            return Err(Error::Divergence { step, energy: bad });
        }
        if !grad.is_finite() {
            return Err(Error::Divergence {
                step,
                energy: f64::NAN,
            });
        }
        for (xi, &gi) in x.data_mut().iter_mut().zip(grad.data()) {
            let g = match cfg.clip_grad {
                Some(c) => gi.clamp(-c, c),
                None => gi,
            };
            let z: f64 = rng.sample(StandardNormal);
            *xi = cfg.bounds.clamp(*xi - drift * g + sigma * z);
        }
    }
    Ok(x)
}

/// Chain starting points plus how many were freshly drawn from the box.
#[derive(Debug, Clone)]
pub struct ChainInit {
    pub states: Tensor,
    pub reinitialized: usize,
}

/// Fixed-capacity store of past chain states, all inside `bounds`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayBuffer {
    capacity: usize,
    dim: usize,
    bounds: DataBox,
    entries: Vec<f64>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, dim: usize, bounds: DataBox) -> Result<Self> {
        if capacity == 0 || dim == 0 {
            return Err(Error::contract("ReplayBuffer::new", "capacity and dim must be positive"));
        }
        Ok(Self {
            capacity,
            dim,
            bounds,
            entries: Vec::new(),
        })
    }

    /// Rebuilds a buffer from stored rows (e.g. a checkpoint).
    pub fn from_entries(capacity: usize, dim: usize, bounds: DataBox, entries: Vec<f64>) -> Result<Self> {
        let mut buf = Self::new(capacity, dim, bounds)?;
        if !entries.len().is_multiple_of(dim) || entries.len() / dim > capacity {
            return Err(Error::contract("ReplayBuffer::from_entries", "entry count does not fit"));
        }
        if !entries.iter().all(|&v| v.is_finite() && bounds.contains(v)) {
            return Err(Error::contract("ReplayBuffer::from_entries", "entries must be finite and inside the box"));
        }
        buf.entries = entries;
        Ok(buf)
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn bounds(&self) -> DataBox {
        self.bounds
    }

    /// Number of filled slots.
    pub fn len(&self) -> usize {
        self.entries.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, i: usize) -> &[f64] {
        &self.entries[i * self.dim..(i + 1) * self.dim]
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    /// Draws `n` chain starts: uniform in the box with probability
    /// `reinit_prob` (always, while the buffer is empty), otherwise a copy
    /// of a uniformly chosen stored entry.
    pub fn init_chain<R: Rng + ?Sized>(&self, n: usize, reinit_prob: f64, rng: &mut R) -> Result<ChainInit> {
        if n == 0 {
            return Err(Error::contract("init_chain", "batch size must be positive"));
        }
        if !(0.0..=1.0).contains(&reinit_prob) {
            return Err(Error::contract("init_chain", "reinit_prob must lie in [0, 1]"));
        }
        let mut data = Vec::with_capacity(n * self.dim);
        let mut reinitialized = 0;
        for _ in 0..n {
            if self.is_empty() || rng.random::<f64>() < reinit_prob {
                reinitialized += 1;
                data.extend((0..self.dim).map(|_| self.bounds.sample(rng)));
            } else {
                let i = rng.random_range(0..self.len());
                data.extend_from_slice(self.entry(i));
            }
        }
        Ok(ChainInit {
            states: Tensor::new(&[n, self.dim], data)?,
            reinitialized,
        })
    }

    /// Stores `samples`, appending until full and then overwriting
    /// uniformly chosen slots.
    pub fn write_back<R: Rng + ?Sized>(&mut self, samples: &Tensor, rng: &mut R) -> Result<()> {
        let (_, d) = samples.dims2()?;
        if d != self.dim {
            return Err(Error::shape("buffer_write_back", &[self.dim], samples.shape()));
        }
        if !samples.is_finite() {
            return Err(Error::NonFinite { what: "buffer_write_back" });
        }
        if !samples.data().iter().all(|&v| self.bounds.contains(v)) {
            return Err(Error::contract("buffer_write_back", "sample outside the data box"));
        }
        for row in samples.data().chunks(d) {
            if self.len() < self.capacity {
                self.entries.extend_from_slice(row);
            } else {
                let slot = rng.random_range(0..self.capacity);
                self.entries[slot * d..(slot + 1) * d].copy_from_slice(row);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn config_validation() {
        assert!(SgldConfig::default().validate().is_ok());
        assert!(SgldConfig::practical().validate().is_ok());
        assert_eq!(SgldConfig::default().steps, 50);
        let p = SgldConfig::practical();
        assert_eq!(0.5 * p.step_size * p.step_size, 0.125);
        assert!(p.decouple_noise);
        for broken in [
            SgldConfig { steps: 0, ..SgldConfig::default() },
            SgldConfig { step_size: 0.0, ..SgldConfig::default() },
            SgldConfig { reinit_prob: 1.5, ..SgldConfig::default() },
            SgldConfig { clip_grad: Some(-1.0), ..SgldConfig::default() },
        ] {
            assert!(broken.validate().is_err());
        }
    }

    #[test]
    fn init_chain_extremes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut buf = ReplayBuffer::new(10, 2, DataBox::default()).unwrap();
        assert!(buf.init_chain(0, 0.5, &mut rng).is_err());
        // Empty buffer: always fresh.
        let init = buf.init_chain(20, 0.0, &mut rng).unwrap();
        assert_eq!(init.reinitialized, 20);
        let v = Tensor::from_rows(&[[0.5, -1.25]]);
        buf.write_back(&v, &mut rng).unwrap();
        let init = buf.init_chain(50, 0.0, &mut rng).unwrap();
        assert_eq!(init.reinitialized, 0);
        assert!(init.states.data().chunks(2).all(|r| r == [0.5, -1.25]));
        let init = buf.init_chain(50, 1.0, &mut rng).unwrap();
        assert_eq!(init.reinitialized, 50);
        assert!(init.states.data().iter().all(|&x| DataBox::default().contains(x)));
    }

    #[test]
    fn write_back_fill_rules() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut buf = ReplayBuffer::new(10, 1, DataBox::default()).unwrap();
        buf.write_back(&Tensor::zeros(&[4, 1]), &mut rng).unwrap();
        assert_eq!(buf.len(), 4);
        buf.write_back(&Tensor::zeros(&[9, 1]), &mut rng).unwrap();
        assert_eq!(buf.len(), 10);
        buf.write_back(&Tensor::zeros(&[5, 1]), &mut rng).unwrap();
        assert_eq!(buf.len(), 10);
        assert!(buf.write_back(&Tensor::full(&[1, 1], f64::NAN), &mut rng).is_err());
        assert!(buf.write_back(&Tensor::full(&[1, 1], 3.5), &mut rng).is_err());
        assert!(buf.write_back(&Tensor::zeros(&[1, 2]), &mut rng).is_err());
    }

    #[test]
    fn vanishing_step_leaves_start_in_place() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x0 = Tensor::from_rows(&[[0.3, -0.7], [1.0, 2.0]]);
        let cfg = SgldConfig {
            steps: 1,
            step_size: 1e-12,
            ..SgldConfig::default()
        };
        let x = sgld_chain(&QuadraticEnergy { dim: 2 }, &x0, &cfg, &mut rng).unwrap();
        for (a, b) in x.data().iter().zip(x0.data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    struct Exploding;
    impl EnergyFunction for Exploding {
        fn input_dim(&self) -> usize {
            1
        }
        fn energy_and_grad(&self, x: &Tensor) -> Result<(Vec<f64>, Tensor)> {
            let e = x.data().iter().map(|v| 1e7 * (v + 10.0)).collect();
            Ok((e, Tensor::full(x.shape(), 1e7)))
        }
    }

    #[test]
    fn divergence_is_signalled_with_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x0 = Tensor::new(&[1, 1], vec![0.0]).unwrap();
        let err = sgld_chain(&Exploding, &x0, &SgldConfig::default(), &mut rng).unwrap_err();
        assert!(matches!(err, Error::Divergence { step: 0, .. }));
    }

    #[test]
    fn chain_is_deterministic_and_clamped() {
        let x0 = Tensor::from_rows(&[[2.9, -2.9], [0.0, 0.0]]);
        let cfg = SgldConfig {
            step_size: 1.0,
            ..SgldConfig::default()
        };
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            sgld_chain(&QuadraticEnergy { dim: 2 }, &x0, &cfg, &mut rng).unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a, b);
        assert!(a.data().iter().all(|&v| cfg.bounds.contains(v)));
    }
}
