//! Softmax and joint energy-based training with SGD and momentum.

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::calibration::{accuracy, ece, nll, PredictionSet};
use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::{EnergyModel, ModelConfig};
use crate::sgld::{sgld_chain, ReplayBuffer, SgldConfig};
use crate::tensor::Tensor;

/// Consecutive SGLD divergences tolerated before training gives up.
pub const MAX_CONSECUTIVE_DIVERGENCES: usize = 25;
/// Steps for which the SGLD step size stays halved after a divergence.
pub const DIVERGENCE_COOLDOWN: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Softmax,
    Jem,
}

/// Linear warmup over optimizer steps, then step decay at listed epochs.
#[derive(Debug, Clone, PartialEq)]
pub struct LrSchedule {
    pub base_rate: f64,
    pub warmup_steps: usize,
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            base_rate: 0.1,
            warmup_steps: 1000,
            decay_epochs: vec![40, 80, 120],
            decay_factor: 0.2,
        }
    }
}

impl LrSchedule {
    /// Rate at global optimizer step `step` during (zero-based) `epoch`.
    pub fn rate(&self, step: usize, epoch: usize) -> f64 {
        let warm = if step < self.warmup_steps {
            self.base_rate * step as f64 / self.warmup_steps as f64
        } else {
            self.base_rate
        };
        let decays = self.decay_epochs.iter().filter(|&&e| epoch >= e).count();
        warm * libm::pow(self.decay_factor, decays as f64)
    }

    fn validate(&self) -> Result<()> {
        if !(self.base_rate > 0.0) || !self.base_rate.is_finite() {
            return Err(Error::contract("LrSchedule", "base_rate must be positive"));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::contract("LrSchedule", "decay_factor must lie in (0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub mode: Mode,
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: LrSchedule,
    pub momentum: f64,
    /// Weight of the generative term; ignored in softmax mode.
    pub gen_weight: f64,
    pub sgld: SgldConfig,
    pub buffer_capacity: usize,
    pub model: ModelConfig,
    pub seed: u64,
    pub eval_every: usize,
    pub bins: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Jem,
            epochs: 150,
            batch_size: 64,
            schedule: LrSchedule::default(),
            momentum: 0.9,
            gen_weight: 1.0,
            sgld: SgldConfig::practical(),
            buffer_capacity: 10_000,
            model: ModelConfig::default(),
            seed: 0,
            eval_every: 1,
            bins: 15,
        }
    }
}

impl TrainConfig {
    /// Generative weight actually applied: always zero in softmax mode.
    pub fn effective_gen_weight(&self) -> f64 {
        match self.mode {
            Mode::Softmax => 0.0,
            Mode::Jem => self.gen_weight,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.eval_every == 0 || self.bins == 0 {
            return Err(Error::contract(
                "TrainConfig",
                "epochs, batch_size, eval_every and bins must be positive",
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::contract("TrainConfig", "momentum must lie in [0, 1)"));
        }
        if !(self.gen_weight >= 0.0) || !self.gen_weight.is_finite() {
            return Err(Error::contract("TrainConfig", "gen_weight must be finite and >= 0"));
        }
        if self.buffer_capacity == 0 {
            return Err(Error::contract("TrainConfig", "buffer_capacity must be positive"));
        }
        self.schedule.validate()?;
        self.sgld.validate()
    }
}

/// Loss components and per-parameter gradients, in [`EnergyModel::params`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrads {
    pub ce: f64,
    /// `mean E(x⁺) − mean E(x̃)`, when the generative term was applied.
    pub gen: Option<f64>,
    pub grads: Vec<Vec<f64>>,
}

fn collect_grads(g: &Graph, bound: &crate::model::BoundModel) -> Vec<Vec<f64>> {
    bound
        .vars()
        .map(|v| g.grad(v).expect("parameters are tracked").to_vec())
        .collect()
}

/// Cross-entropy gradients alone.
pub fn softmax_loss_grads(model: &EnergyModel, x: &Tensor, y: &[usize]) -> Result<LossGrads> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g, true);
    let xv = g.constant(x.clone());
    let logits = model.forward(&mut g, &bound, xv)?;
    let scaled = g.scale(logits, 1.0 / model.temperature());
    let ce = g.softmax_cross_entropy(scaled, y)?;
    g.backward(ce)?;
    Ok(LossGrads {
        ce: g.value(ce).data()[0],
        gen: None,
        grads: collect_grads(&g, &bound),
    })
}

/// Gradients of `CE(x, y) + λ·(mean E(x) − mean E(x̃))` with the negatives
/// `x̃` held fixed. Without negatives (or with `λ = 0`) this is exactly
/// [`softmax_loss_grads`].
pub fn surrogate_loss_grads(
    model: &EnergyModel,
    x: &Tensor,
    y: &[usize],
    negatives: Option<&Tensor>,
    gen_weight: f64,
) -> Result<LossGrads> {
    let neg = match negatives {
        Some(n) if gen_weight != 0.0 => n,
        _ => return softmax_loss_grads(model, x, y),
    };
    let mut g = Graph::new();
    let bound = model.bind(&mut g, true);
    let xv = g.constant(x.clone());
    let logits = model.forward(&mut g, &bound, xv)?;
    let scaled = g.scale(logits, 1.0 / model.temperature());
    let ce = g.softmax_cross_entropy(scaled, y)?;
    let e_pos = model.free_energy_of_logits(&mut g, logits)?;
    let e_pos = g.mean(e_pos)?;
    let nv = g.constant(neg.clone());
    let neg_logits = model.forward(&mut g, &bound, nv)?;
    let e_neg = model.free_energy_of_logits(&mut g, neg_logits)?;
    let e_neg = g.mean(e_neg)?;
    let gen = g.sub(e_pos, e_neg)?;
    let weighted = g.scale(gen, gen_weight);
    let loss = g.add(ce, weighted)?;
    g.backward(loss)?;
    Ok(LossGrads {
        ce: g.value(ce).data()[0],
        gen: Some(g.value(gen).data()[0]),
        grads: collect_grads(&g, &bound),
    })
}

/// Draws `n` negatives: chain starts from the buffer, SGLD, write-back.
///
/// Returns `None` when the chain diverged; the buffer is then left as is.
pub fn sample_negatives<R: Rng + ?Sized>(
    model: &EnergyModel,
    buffer: &mut ReplayBuffer,
    n: usize,
    sgld: &SgldConfig,
    rng: &mut R,
) -> Result<Option<Tensor>> {
    let start = buffer.init_chain(n, sgld.reinit_prob, rng)?;
    match sgld_chain(model, &start.states, sgld, rng) {
        Ok(samples) => {
            buffer.write_back(&samples, rng)?;
            Ok(Some(samples))
        }
        Err(Error::Divergence { step, energy }) => {
            log::warn!("SGLD diverged at step {step} (energy {energy})");
            Ok(None)
        }
        Err(e) => Err(e),
    }
}

/// One joint step's losses and gradients. With `λ = 0` no chain is run.
pub fn joint_loss_grads<R: Rng + ?Sized>(
    model: &EnergyModel,
    x: &Tensor,
    y: &[usize],
    buffer: &mut ReplayBuffer,
    gen_weight: f64,
    sgld: &SgldConfig,
    rng: &mut R,
) -> Result<LossGrads> {
    if gen_weight == 0.0 {
        return softmax_loss_grads(model, x, y);
    }
    let n = x.shape()[0];
    let negatives = sample_negatives(model, buffer, n, sgld, rng)?;
    surrogate_loss_grads(model, x, y, negatives.as_ref(), gen_weight)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainRecord {
    /// One-based epoch number.
    pub epoch: usize,
    pub ce_loss: f64,
    pub gen_loss: f64,
    pub test_acc: f64,
    pub test_nll: f64,
    pub test_ece: f64,
    /// SGLD divergences since the previous record.
    pub sgld_divergences: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainLog {
    pub records: Vec<TrainRecord>,
}

#[derive(Debug, Clone)]
pub struct Trained {
    pub model: EnergyModel,
    pub log: TrainLog,
    /// The replay buffer, for joint training.
    pub buffer: Option<ReplayBuffer>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub nll: f64,
    pub ece: f64,
    /// Logits are stored divided by the model temperature.
    pub preds: PredictionSet,
}

/// Prediction set of `model` on `x`, with logits divided by the temperature.
pub fn predict(model: &EnergyModel, x: &Tensor, labels: &[usize]) -> Result<PredictionSet> {
    let lb = model.logits(x)?;
    let inv = 1.0 / model.temperature();
    let scaled = lb.values.data().iter().map(|v| v * inv).collect();
    PredictionSet::from_logits(scaled, model.num_classes(), labels.to_vec())
}

pub fn evaluate(model: &EnergyModel, x: &Tensor, labels: &[usize], bins: usize) -> Result<Evaluation> {
    let preds = predict(model, x, labels)?;
    Ok(Evaluation {
        accuracy: accuracy(&preds)?,
        nll: nll(&preds)?,
        ece: ece(&preds, bins)?,
        preds,
    })
}

/// Independent random streams derived from one seed.
fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Trains a fresh model on the train split, logging test metrics.
pub fn train(dataset: &Dataset, cfg: &TrainConfig) -> Result<Trained> {
    cfg.validate()?;
    let (x_train, y_train) = dataset.subset(Split::Train)?;
    let (x_test, y_test) = dataset.subset(Split::Test)?;
    if y_train.is_empty() || y_test.is_empty() {
        return Err(Error::contract("train", "train and test splits must be non-empty"));
    }
    let d = dataset.input_dim();
    let mut model = EnergyModel::init(d, dataset.num_classes(), &cfg.model, &mut stream(cfg.seed, 0))?;
    let mut shuffle_rng = stream(cfg.seed, 1);
    let mut sgld_rng = stream(cfg.seed, 2);
    let lambda = cfg.effective_gen_weight();
    let mut buffer = if lambda > 0.0 {
        Some(ReplayBuffer::new(cfg.buffer_capacity, d, cfg.sgld.bounds)?)
    } else {
        None
    };
    let mut velocity: Vec<Vec<f64>> = model.params().map(|p| vec![0.0; p.numel()]).collect();
    let mut order: Vec<usize> = (0..y_train.len()).collect();
    let mut log = TrainLog::default();
    let mut step = 0usize;
    let mut cooldown = 0usize;
    let mut consecutive = 0usize;
    let mut divergences = 0usize;
    let (mut ce_sum, mut ce_n, mut gen_sum, mut gen_n) = (0.0, 0usize, 0.0, 0usize);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        for chunk in order.chunks(cfg.batch_size) {
            let x = x_train.select_rows(chunk)?;
            let y: Vec<usize> = chunk.iter().map(|&i| y_train[i]).collect();
            let lg = match buffer.as_mut() {
                None => softmax_loss_grads(&model, &x, &y)?,
                Some(buf) => {
                    let mut sgld = cfg.sgld.clone();
                    if cooldown > 0 {
                        sgld.step_size *= 0.5;
                        cooldown -= 1;
                    }
                    let negatives = sample_negatives(&model, buf, chunk.len(), &sgld, &mut sgld_rng)?;
                    if negatives.is_none() {
                        divergences += 1;
                        consecutive += 1;
                        cooldown = DIVERGENCE_COOLDOWN;
                        if consecutive > MAX_CONSECUTIVE_DIVERGENCES {
                            return Err(Error::Training(alloc::format!(
                                "SGLD diverged on {consecutive} consecutive steps (epoch {}, step {step})",
                                epoch + 1
                            )));
                        }
                    } else {
                        consecutive = 0;
                    }
                    surrogate_loss_grads(&model, &x, &y, negatives.as_ref(), lambda)?
                }
            };
            if !lg.ce.is_finite() || lg.gen.is_some_and(|v| !v.is_finite()) {
                return Err(Error::Training(alloc::format!(
                    "non-finite loss at epoch {}, step {step} (ce {}, gen {:?})",
                    epoch + 1,
                    lg.ce,
                    lg.gen
                )));
            }
            ce_sum += lg.ce;
            ce_n += 1;
            if let Some(v) = lg.gen {
                gen_sum += v;
                gen_n += 1;
            }
            let lr = cfg.schedule.rate(step, epoch);
            for ((p, v), gr) in model.params_mut().zip(&mut velocity).zip(&lg.grads) {
                for ((w, vi), gi) in p.data_mut().iter_mut().zip(v.iter_mut()).zip(gr) {
                    *vi = cfg.momentum * *vi + gi;
                    *w -= lr * *vi;
                }
            }
            if !model.params().all(Tensor::is_finite) {
                return Err(Error::Training(alloc::format!(
                    "parameters became non-finite at epoch {}, step {step}",
                    epoch + 1
                )));
            }
            step += 1;
        }
        if (epoch + 1) % cfg.eval_every == 0 || epoch + 1 == cfg.epochs {
            let ev = evaluate(&model, &x_test, &y_test, cfg.bins)?;
            log.records.push(TrainRecord {
                epoch: epoch + 1,
                ce_loss: ce_sum / ce_n as f64,
                gen_loss: if gen_n > 0 { gen_sum / gen_n as f64 } else { 0.0 },
                test_acc: ev.accuracy,
                test_nll: ev.nll,
                test_ece: ev.ece,
                sgld_divergences: divergences,
            });
            log::debug!(
                "epoch {}: ce {:.4} acc {:.4} nll {:.4} ece {:.4}",
                epoch + 1,
                ce_sum / ce_n as f64,
                ev.accuracy,
                ev.nll,
                ev.ece
            );
            (ce_sum, ce_n, gen_sum, gen_n, divergences) = (0.0, 0, 0.0, 0, 0);
        }
    }
    Ok(Trained { model, log, buffer })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_is_linear_from_zero() {
        let s = LrSchedule::default();
        assert_eq!(s.rate(0, 0), 0.0);
        assert_eq!(s.rate(250, 0), 0.1 * 250.0 / 1000.0);
        assert_eq!(s.rate(1000, 0), 0.1);
    }

    #[test]
    fn decay_by_factor_at_listed_epochs() {
        let s = LrSchedule::default();
        assert_eq!(s.rate(5000, 39), 0.1);
        assert!((s.rate(5000, 40) - 0.1 * 0.2).abs() < 1e-18);
        assert!((s.rate(5000, 80) - 0.1 * 0.04).abs() < 1e-18);
        assert!((s.rate(5000, 130) - 0.1 * 0.008).abs() < 1e-18);
    }

    #[test]
    fn softmax_mode_forces_zero_weight() {
        let cfg = TrainConfig {
            mode: Mode::Softmax,
            gen_weight: 3.0,
            ..TrainConfig::default()
        };
        assert_eq!(cfg.effective_gen_weight(), 0.0);
    }

    #[test]
    fn config_validation() {
        let bad = TrainConfig {
            momentum: 1.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            gen_weight: -1.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }
}
