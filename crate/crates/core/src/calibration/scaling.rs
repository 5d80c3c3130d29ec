//! Post-hoc calibrators fitted on a held-out development set.

use alloc::vec;
use alloc::vec::Vec;

use super::metrics::{nll, PredictionSet};
use crate::error::{Error, Result};
use crate::tensor;

/// Search range for the temperature, as `[min, max]`.
pub const TEMPERATURE_RANGE: (f64, f64) = (1e-2, 1e2);
/// Golden-section tolerance on `log T`.
pub const TEMPERATURE_TOL: f64 = 1e-4;

pub const LOGISTIC_STEPS: usize = 500;
pub const LOGISTIC_STEP_SIZE: f64 = 0.1;
pub const LOGISTIC_L2: f64 = 1e-4;

/// Shape of the affine map in logistic scaling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LogisticVariant {
    /// Diagonal `W` plus bias.
    Vector,
    /// Full `W` plus bias.
    Matrix,
}

/// Constraint on the affine weight matrix while fitting.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AffineStructure {
    /// `W = w·I`, no bias: the temperature-scaling family.
    Scalar,
    Diagonal,
    Full,
}

/// `z' = W·z + b` on logit rows.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineCalibrator {
    pub num_classes: usize,
    /// Row-major `K×K`; off-diagonal entries stay zero for diagonal fits.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl AffineCalibrator {
    pub fn identity(num_classes: usize) -> Self {
        let mut weight = vec![0.0; num_classes * num_classes];
        for i in 0..num_classes {
            weight[i * num_classes + i] = 1.0;
        }
        Self {
            num_classes,
            weight,
            bias: vec![0.0; num_classes],
        }
    }

    pub fn transform_row(&self, z: &[f64], out: &mut [f64]) {
        let k = self.num_classes;
        for (i, o) in out.iter_mut().enumerate() {
            let mut acc = self.bias[i];
            for (j, zj) in z.iter().enumerate() {
                acc += self.weight[i * k + j] * zj;
            }
            *o = acc;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Calibrator {
    Temperature(f64),
    Logistic {
        variant: LogisticVariant,
        map: AffineCalibrator,
    },
}

impl Calibrator {
    pub fn identity_temperature() -> Self {
        Calibrator::Temperature(1.0)
    }
}

/// New prediction set from calibrated logits; `preds` is left as is.
pub fn apply_calibrator(preds: &PredictionSet, cal: &Calibrator) -> Result<PredictionSet> {
    let logits = preds
        .logits()
        .ok_or_else(|| Error::contract("apply_calibrator", "prediction set carries no logits"))?;
    let k = preds.num_classes();
    let mut out = vec![0.0; logits.len()];
    match cal {
        Calibrator::Temperature(t) => {
            if !(*t > 0.0) {
                return Err(Error::contract("apply_calibrator", "temperature must be positive"));
            }
            for (o, z) in out.iter_mut().zip(logits) {
                *o = z / t;
            }
        }
        Calibrator::Logistic { map, .. } => {
            if map.num_classes != k {
                return Err(Error::shape("apply_calibrator", &[k], &[map.num_classes]));
            }
            for (z, o) in logits.chunks(k).zip(out.chunks_mut(k)) {
                map.transform_row(z, o);
            }
        }
    }
    PredictionSet::from_logits(out, k, preds.labels().to_vec())
}

fn check_dev<'a>(dev: &'a PredictionSet, op: &'static str) -> Result<&'a [f64]> {
    let logits = dev
        .logits()
        .ok_or_else(|| Error::contract(op, "dev set carries no logits"))?;
    if dev.len() < dev.num_classes() {
        return Err(Error::Fit(alloc::format!(
            "{op}: dev set has {} samples, need at least K = {}",
            dev.len(),
            dev.num_classes()
        )));
    }
    let first = dev.labels()[0];
    if dev.labels().iter().all(|&y| y == first) {
        return Err(Error::Fit(alloc::format!("{op}: dev set contains a single class")));
    }
    Ok(logits)
}

/// Mean NLL of `softmax(logits · beta)`, via log-softmax.
fn scaled_nll(logits: &[f64], labels: &[usize], k: usize, beta: f64) -> f64 {
    let mut row = vec![0.0; k];
    let mut total = 0.0;
    for (z, &y) in logits.chunks(k).zip(labels) {
        for (r, v) in row.iter_mut().zip(z) {
            *r = v * beta;
        }
        total += tensor::log_sum_exp(&row) - row[y];
    }
    total / labels.len() as f64
}

/// Golden-section minimisation of a unimodal `f` on `[lo, hi]`.
pub fn golden_section_min(mut lo: f64, mut hi: f64, tol: f64, f: impl Fn(f64) -> f64) -> f64 {
    let inv_phi = (libm::sqrt(5.0) - 1.0) / 2.0;
    let mut a = hi - inv_phi * (hi - lo);
    let mut b = lo + inv_phi * (hi - lo);
    let (mut fa, mut fb) = (f(a), f(b));
    while hi - lo > tol {
        if fa <= fb {
            hi = b;
            b = a;
            fb = fa;
            a = hi - inv_phi * (hi - lo);
            fa = f(a);
        } else {
            lo = a;
            a = b;
            fa = fb;
            b = lo + inv_phi * (hi - lo);
            fb = f(b);
        }
    }
    0.5 * (lo + hi)
}

/// Temperature minimising dev NLL, searched over `log T`.
///
/// Falls back to `T = 1` if the search result is not at least as good.
pub fn fit_temperature(dev: &PredictionSet) -> Result<f64> {
    let logits = check_dev(dev, "fit_temperature")?;
    let (k, labels) = (dev.num_classes(), dev.labels());
    let (lo, hi) = (libm::log(TEMPERATURE_RANGE.0), libm::log(TEMPERATURE_RANGE.1));
    let s = golden_section_min(lo, hi, TEMPERATURE_TOL, |s| {
        scaled_nll(logits, labels, k, libm::exp(-s))
    });
    let t = libm::exp(s);
    let fitted = nll(&apply_calibrator(dev, &Calibrator::Temperature(t))?)?;
    let base = nll(&apply_calibrator(dev, &Calibrator::Temperature(1.0))?)?;
    Ok(if fitted <= base { t } else { 1.0 })
}

/// Penalised objective and gradient for an affine map.
fn affine_objective(
    map: &AffineCalibrator,
    logits: &[f64],
    labels: &[usize],
    structure: AffineStructure,
    grad_w: &mut [f64],
    grad_b: &mut [f64],
) -> f64 {
    let k = map.num_classes;
    let n = labels.len() as f64;
    grad_w.fill(0.0);
    grad_b.fill(0.0);
    let mut zp = vec![0.0; k];
    let mut p = vec![0.0; k];
    let mut loss = 0.0;
    for (z, &y) in logits.chunks(k).zip(labels) {
        map.transform_row(z, &mut zp);
        loss += tensor::log_sum_exp(&zp) - zp[y];
        tensor::softmax_into(&zp, &mut p);
        p[y] -= 1.0;
        for i in 0..k {
            let gi = p[i] / n;
            grad_b[i] += gi;
            for j in 0..k {
                grad_w[i * k + j] += gi * z[j];
            }
        }
    }
    loss /= n;
    let mut penalty = 0.0;
    for i in 0..k {
        for j in 0..k {
            let d = map.weight[i * k + j] - if i == j { 1.0 } else { 0.0 };
            penalty += d * d;
            grad_w[i * k + j] += 2.0 * LOGISTIC_L2 * d;
        }
        penalty += map.bias[i] * map.bias[i];
        grad_b[i] += 2.0 * LOGISTIC_L2 * map.bias[i];
    }
    // Project the gradient onto the allowed structure.
    match structure {
        AffineStructure::Full => {}
        AffineStructure::Diagonal => {
            for i in 0..k {
                for j in 0..k {
                    if i != j {
                        grad_w[i * k + j] = 0.0;
                    }
                }
            }
        }
        AffineStructure::Scalar => {
            let tr: f64 = (0..k).map(|i| grad_w[i * k + i]).sum::<f64>() / k as f64;
            grad_w.fill(0.0);
            for i in 0..k {
                grad_w[i * k + i] = tr;
            }
            grad_b.fill(0.0);
        }
    }
    loss + LOGISTIC_L2 * penalty
}

/// Gradient descent on the penalised dev NLL from `W = I, b = 0`.
///
/// The step starts at [`LOGISTIC_STEP_SIZE`], is halved until the objective
/// does not increase and doubles after every accepted step, so the iterates
/// are monotone.
pub fn fit_affine(dev: &PredictionSet, structure: AffineStructure) -> Result<AffineCalibrator> {
    let logits = check_dev(dev, "fit_logistic_scaling")?;
    let k = dev.num_classes();
    let labels = dev.labels();
    let mut map = AffineCalibrator::identity(k);
    let mut gw = vec![0.0; k * k];
    let mut gb = vec![0.0; k];
    let (mut tw, mut tb) = (vec![0.0; k * k], vec![0.0; k]);
    let mut obj = affine_objective(&map, logits, labels, structure, &mut gw, &mut gb);
    let mut step = LOGISTIC_STEP_SIZE;
    for _ in 0..LOGISTIC_STEPS {
        let mut accepted = false;
        for _ in 0..40 {
            let trial = AffineCalibrator {
                num_classes: k,
                weight: map.weight.iter().zip(&gw).map(|(w, g)| w - step * g).collect(),
                bias: map.bias.iter().zip(&gb).map(|(b, g)| b - step * g).collect(),
            };
            let t_obj = affine_objective(&trial, logits, labels, structure, &mut tw, &mut tb);
            if t_obj <= obj {
                map = trial;
                obj = t_obj;
                core::mem::swap(&mut gw, &mut tw);
                core::mem::swap(&mut gb, &mut tb);
                accepted = true;
                step *= 2.0;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    Ok(map)
}

/// Vector or matrix scaling fitted on `dev`; returns the identity map when
/// fitting would raise dev NLL.
pub fn fit_logistic_scaling(dev: &PredictionSet, variant: LogisticVariant) -> Result<Calibrator> {
    let structure = match variant {
        LogisticVariant::Vector => AffineStructure::Diagonal,
        LogisticVariant::Matrix => AffineStructure::Full,
    };
    let fitted = fit_affine(dev, structure)?;
    let k = dev.num_classes();
    let identity = AffineCalibrator::identity(k);
    let cal = |map| Calibrator::Logistic { variant, map };
    let fitted_nll = nll(&apply_calibrator(dev, &cal(fitted.clone()))?)?;
    let base_nll = nll(&apply_calibrator(dev, &cal(identity.clone()))?)?;
    Ok(if fitted_nll <= base_nll { cal(fitted) } else { cal(identity) })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dev_set() -> PredictionSet {
        let logits = vec![2.0, 0.0, -1.0, 0.5, 1.5, 0.0, -0.3, 0.2, 1.1, 3.0, -2.0, 0.1];
        PredictionSet::from_logits(logits, 3, vec![0, 1, 2, 1]).unwrap()
    }

    #[test]
    fn golden_section_finds_parabola_minimum() {
        let x = golden_section_min(-5.0, 5.0, 1e-8, |x| (x - 1.3) * (x - 1.3));
        assert!((x - 1.3).abs() < 1e-7);
    }

    #[test]
    fn identity_calibrators_leave_probs_bit_exact() {
        let p = dev_set();
        let t1 = apply_calibrator(&p, &Calibrator::Temperature(1.0)).unwrap();
        assert_eq!(t1.probs(), p.probs());
        let id = Calibrator::Logistic {
            variant: LogisticVariant::Matrix,
            map: AffineCalibrator::identity(3),
        };
        assert_eq!(apply_calibrator(&p, &id).unwrap().probs(), p.probs());
    }

    #[test]
    fn large_temperature_flattens() {
        let p = dev_set();
        let flat = apply_calibrator(&p, &Calibrator::Temperature(100.0)).unwrap();
        assert!(flat.probs().iter().all(|&v| (v - 1.0 / 3.0).abs() < 0.01));
    }

    #[test]
    fn fit_errors() {
        let no_logits = PredictionSet::new(vec![0.5, 0.5, 0.5, 0.5], 2, vec![0, 1], None).unwrap();
        assert!(fit_temperature(&no_logits).is_err());
        assert!(apply_calibrator(&no_logits, &Calibrator::Temperature(2.0)).is_err());
        let single = PredictionSet::from_logits(vec![1.0, 0.0, 2.0, 0.0], 2, vec![0, 0]).unwrap();
        assert!(matches!(fit_temperature(&single), Err(Error::Fit(_))));
        assert!(matches!(
            fit_logistic_scaling(&single, LogisticVariant::Vector),
            Err(Error::Fit(_))
        ));
        let tiny = PredictionSet::from_logits(vec![1.0, 0.0, 2.0, 1.0, 0.0, 2.0], 3, vec![0, 1]).unwrap();
        assert!(matches!(fit_temperature(&tiny), Err(Error::Fit(_))));
    }
}
