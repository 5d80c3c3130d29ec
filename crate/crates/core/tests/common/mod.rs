//! Test-only oracles, written without touching the library's graph code.
#![allow(dead_code)]

use jemcal_core::model::EnergyModel;
use jemcal_core::Activation;

/// Plain-loop MLP forward. Returns logits `[n×K]` and the smallest
/// |pre-activation| seen in hidden layers (distance to a ReLU kink).
pub fn ref_forward(model: &EnergyModel, params: &[Vec<f64>], x: &[f64], n: usize) -> (Vec<f64>, f64) {
    let mut h = x.to_vec();
    let mut width = model.input_dim();
    let mut min_pre = f64::INFINITY;
    let layers = model.layers();
    for (li, layer) in layers.iter().enumerate() {
        let (w, b) = (&params[2 * li], &params[2 * li + 1]);
        let out = layer.out_dim();
        let mut z = vec![0.0; n * out];
        for i in 0..n {
            for o in 0..out {
                let mut acc = b[o];
                for p in 0..width {
                    acc += h[i * width + p] * w[p * out + o];
                }
                z[i * out + o] = acc;
            }
        }
        if li + 1 < layers.len() {
            for v in z.iter_mut() {
                min_pre = min_pre.min(v.abs());
                *v = match model.activation() {
                    Activation::LeakyRelu { slope } => {
                        if *v > 0.0 {
                            *v
                        } else {
                            slope * *v
                        }
                    }
                    Activation::Tanh => v.tanh(),
                };
            }
        }
        h = z;
        width = out;
    }
    (h, min_pre)
}

pub fn ref_lse(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub fn ref_mean_ce(logits: &[f64], labels: &[usize], k: usize) -> f64 {
    let n = labels.len();
    (0..n)
        .map(|i| {
            let row = &logits[i * k..(i + 1) * k];
            ref_lse(row) - row[labels[i]]
        })
        .sum::<f64>()
        / n as f64
}

pub fn ref_mean_free_energy(logits: &[f64], k: usize, t: f64) -> f64 {
    let rows: Vec<f64> = logits
        .chunks(k)
        .map(|r| {
            let s: Vec<f64> = r.iter().map(|v| v / t).collect();
            -t * ref_lse(&s)
        })
        .collect();
    rows.iter().sum::<f64>() / rows.len() as f64
}

/// Relative error with an absolute floor for near-zero gradients.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale < 1e-7 {
        (analytic - numeric).abs()
    } else {
        (analytic - numeric).abs() / scale
    }
}

/// Central difference of `f` with respect to every entry of `v`.
pub fn central_diff(v: &mut [f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    (0..v.len())
        .map(|i| {
            let orig = v[i];
            v[i] = orig + h;
            let up = f(v);
            v[i] = orig - h;
            let down = f(v);
            v[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}
