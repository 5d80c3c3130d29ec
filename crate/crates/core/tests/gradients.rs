mod common;

use common::{central_diff, ref_forward, ref_mean_ce, ref_mean_free_energy, rel_err};
use jemcal_core::model::{EnergyModel, ModelConfig};
use jemcal_core::{Activation, Error, Graph, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

#[test]
fn backward_of_sum_is_ones() {
    let mut g = Graph::new();
    let x = g.param(Tensor::full(&[2, 3], 4.0));
    let s = g.sum(x);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[1.0; 6]);
}

#[test]
fn backward_of_sum_of_squares() {
    let mut g = Graph::new();
    let x = g.param(Tensor::new(&[2], vec![1.0, 2.0]).unwrap());
    let sq = g.mul(x, x).unwrap();
    let s = g.sum(sq);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0]);
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut g = Graph::new();
    let x = g.param(Tensor::zeros(&[3]));
    assert!(matches!(g.backward(x), Err(Error::Contract { op: "backward", .. })));
}

#[test]
fn backward_accumulates_until_zeroed() {
    let mut g = Graph::new();
    let x = g.param(Tensor::new(&[2], vec![1.0, 2.0]).unwrap());
    let sq = g.mul(x, x).unwrap();
    let s = g.sum(sq);
    g.backward(s).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[4.0, 8.0]);
    g.zero_grads();
    assert!(g.grad(x).is_none());
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0]);
}

#[test]
fn constants_get_no_grad_and_tracked_intermediates_do() {
    let mut g = Graph::new();
    let a = g.param(Tensor::from_rows(&[[1.0, 2.0]]));
    let b = g.constant(Tensor::from_rows(&[[3.0], [4.0]]));
    let c = g.matmul(a, b).unwrap();
    let s = g.sum(c);
    g.backward(s).unwrap();
    assert!(g.grad(b).is_none());
    assert_eq!(g.grad(a).unwrap(), &[3.0, 4.0]);
    assert_eq!(g.grad(c).unwrap(), &[1.0]);
}

#[test]
fn op_errors() {
    let mut g = Graph::new();
    let a = g.param(Tensor::zeros(&[2, 3]));
    let b = g.param(Tensor::zeros(&[2, 3]));
    assert_eq!(g.matmul(a, b).unwrap_err(), Error::Shape { op: "matmul", left: vec![2, 3], right: vec![2, 3] });
    let empty = g.param(Tensor::zeros(&[2, 0]));
    assert!(g.log_sum_exp_rows(empty).is_err());
    assert!(matches!(g.gather(a, &[0, 3]), Err(Error::Index { index: 3, .. })));
    let bias = g.param(Tensor::zeros(&[2]));
    assert!(g.add_row_bias(a, bias).is_err());
}

/// Random scalar loss `sum(op(inputs) ⊙ r)` checked against central differences.
fn check_op(
    rng: &mut ChaCha8Rng,
    shapes: &[&[usize]],
    build: impl Fn(&mut Graph, &[Var]) -> Var,
) -> f64 {
    let inputs: Vec<Tensor> = shapes.iter().map(|s| Tensor::randn(s, 1.0, rng)).collect();
    let eval = |vals: &[Tensor], track: bool| -> (Graph, Vec<Var>, Var) {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals
            .iter()
            .map(|t| if track { g.param(t.clone()) } else { g.constant(t.clone()) })
            .collect();
        let out = build(&mut g, &vars);
        (g, vars, out)
    };
    let (g0, _, out0) = eval(&inputs, false);
    let weights = Tensor::randn(g0.value(out0).shape(), 1.0, rng);
    let loss_of = |vals: &[Tensor]| -> f64 {
        let (g, _, out) = eval(vals, false);
        g.value(out).data().iter().zip(weights.data()).map(|(a, b)| a * b).sum()
    };

    let (mut g, vars, out) = eval(&inputs, true);
    let w = g.constant(weights.clone());
    let prod = g.mul(out, w).unwrap();
    let loss = g.sum(prod);
    g.backward(loss).unwrap();

    let mut worst: f64 = 0.0;
    for (k, var) in vars.iter().enumerate() {
        let analytic = g.grad(*var).unwrap().to_vec();
        let mut vals = inputs.clone();
        let mut flat = vals[k].data().to_vec();
        let numeric = central_diff(&mut flat, H, |v| {
            vals[k] = Tensor::new(inputs[k].shape(), v.to_vec()).unwrap();
            loss_of(&vals)
        });
        for (a, n) in analytic.iter().zip(&numeric) {
            worst = worst.max(rel_err(*a, *n));
        }
    }
    worst
}

#[test]
fn every_op_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..100 {
        let (n, k, m) = (rng.random_range(1..5), rng.random_range(1..5), rng.random_range(1..5));
        let cases: Vec<(&str, f64)> = vec![
            ("matmul", check_op(&mut rng, &[&[n, k], &[k, m]], |g, v| g.matmul(v[0], v[1]).unwrap())),
            ("add_row_bias", check_op(&mut rng, &[&[n, k], &[k]], |g, v| g.add_row_bias(v[0], v[1]).unwrap())),
            ("add", check_op(&mut rng, &[&[n, k], &[n, k]], |g, v| g.add(v[0], v[1]).unwrap())),
            ("sub", check_op(&mut rng, &[&[n, k], &[n, k]], |g, v| g.sub(v[0], v[1]).unwrap())),
            ("mul", check_op(&mut rng, &[&[n, k], &[n, k]], |g, v| g.mul(v[0], v[1]).unwrap())),
            ("scale", check_op(&mut rng, &[&[n, k]], |g, v| g.scale(v[0], -1.7))),
            ("tanh", check_op(&mut rng, &[&[n, k]], |g, v| g.tanh(v[0]))),
            ("lse", check_op(&mut rng, &[&[n, k]], |g, v| g.log_sum_exp_rows(v[0]).unwrap())),
            ("mean", check_op(&mut rng, &[&[n, k]], |g, v| g.mean(v[0]).unwrap())),
            ("sum", check_op(&mut rng, &[&[n, k]], |g, v| g.sum(v[0]))),
        ];
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let gather = check_op(&mut rng, &[&[n, k]], |g, v| g.gather(v[0], &labels).unwrap());
        let ce = check_op(&mut rng, &[&[n, k]], |g, v| g.softmax_cross_entropy(v[0], &labels).unwrap());
        let relu = check_op(&mut rng, &[&[n, k]], |g, v| g.leaky_relu(v[0], 0.05));
        for (name, err) in cases.into_iter().chain([("gather", gather), ("ce", ce), ("leaky_relu", relu)]) {
            assert!(err < TOL, "{name}: relative error {err}");
        }
    }
}

fn random_model(rng: &mut ChaCha8Rng, act: Activation) -> (EnergyModel, usize) {
    let d = rng.random_range(1..=8);
    let h = rng.random_range(1..=16);
    let k = rng.random_range(2..=5);
    let cfg = ModelConfig {
        hidden: vec![h],
        activation: act,
        temperature: rng.random_range(0.5..2.0),
    };
    let mut m = EnergyModel::init(d, k, &cfg, rng).unwrap();
    for p in m.params_mut() {
        for v in p.data_mut() {
            *v += 0.1 * rng.random_range(-1.0..1.0);
        }
    }
    (m, d)
}

/// Analytic parameter and input gradients of `loss` vs. an independent forward pass.
fn mlp_grad_error(
    model: &EnergyModel,
    x: &Tensor,
    loss_graph: impl Fn(&mut Graph, Var) -> Var,
    loss_ref: impl Fn(&[f64]) -> f64,
) -> f64 {
    let n = x.shape()[0];
    let mut g = Graph::new();
    let bound = model.bind(&mut g, true);
    let xv = g.param(x.clone());
    let logits = model.forward(&mut g, &bound, xv).unwrap();
    let loss = loss_graph(&mut g, logits);
    g.backward(loss).unwrap();

    let params: Vec<Vec<f64>> = model.params().map(|t| t.data().to_vec()).collect();
    let mut worst: f64 = 0.0;
    for (pi, var) in bound.vars().enumerate() {
        let mut ps = params.clone();
        let mut flat = ps[pi].clone();
        let numeric = central_diff(&mut flat, H, |v| {
            ps[pi] = v.to_vec();
            loss_ref(&ref_forward(model, &ps, x.data(), n).0)
        });
        for (a, nv) in g.grad(var).unwrap().iter().zip(&numeric) {
            worst = worst.max(rel_err(*a, *nv));
        }
    }
    let mut xs = x.data().to_vec();
    let numeric = central_diff(&mut xs, H, |v| loss_ref(&ref_forward(model, &params, v, n).0));
    for (a, nv) in g.grad(xv).unwrap().iter().zip(&numeric) {
        worst = worst.max(rel_err(*a, *nv));
    }
    worst
}

#[test]
fn mlp_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut checked = 0;
    while checked < 40 {
        let act = if checked % 2 == 0 { Activation::default() } else { Activation::Tanh };
        let (model, d) = random_model(&mut rng, act);
        let n = rng.random_range(1..=4);
        let x = Tensor::randn(&[n, d], 1.0, &mut rng);
        let params: Vec<Vec<f64>> = model.params().map(|t| t.data().to_vec()).collect();
        let (logits, min_pre) = ref_forward(&model, &params, x.data(), n);
        if min_pre < 1e-3 {
            continue; // finite differences straddle a ReLU kink
        }
        let k = model.num_classes();
        let t = model.temperature();
        // Independent forward agrees with the graph forward.
        let lb = model.logits(&x).unwrap();
        for (a, b) in lb.values.data().iter().zip(&logits) {
            assert!((a - b).abs() < 1e-12);
        }
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let ce = mlp_grad_error(
            &model,
            &x,
            |g, l| g.softmax_cross_entropy(l, &labels).unwrap(),
            |l| ref_mean_ce(l, &labels, k),
        );
        let fe = mlp_grad_error(
            &model,
            &x,
            |g, l| {
                let e = model.free_energy_of_logits(g, l).unwrap();
                g.mean(e).unwrap()
            },
            |l| ref_mean_free_energy(l, k, t),
        );
        assert!(ce < TOL, "CE gradient error {ce}");
        assert!(fe < TOL, "free-energy gradient error {fe}");
        checked += 1;
    }
}

#[test]
fn input_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..20 {
        let (model, d) = random_model(&mut rng, Activation::Tanh);
        let x = Tensor::randn(&[3, d], 1.0, &mut rng);
        let (energies, grad) = model.input_gradient(&x).unwrap();
        assert_eq!(energies, model.free_energy(&x).unwrap());
        let mut xs = x.data().to_vec();
        let numeric = central_diff(&mut xs, H, |v| {
            let xt = Tensor::new(&[3, d], v.to_vec()).unwrap();
            model.free_energy(&xt).unwrap().iter().sum()
        });
        for (a, n) in grad.data().iter().zip(&numeric) {
            assert!(rel_err(*a, *n) < TOL);
        }
    }
}

#[test]
fn graph_replay_is_bit_identical() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let model = EnergyModel::init(3, 4, &ModelConfig::default(), &mut rng).unwrap();
        let x = Tensor::randn(&[5, 3], 1.0, &mut rng);
        let mut g = Graph::new();
        let bound = model.bind(&mut g, true);
        let xv = g.constant(x);
        let l = model.forward(&mut g, &bound, xv).unwrap();
        let loss = g.softmax_cross_entropy(l, &[0, 1, 2, 3, 0]).unwrap();
        g.backward(loss).unwrap();
        let grads: Vec<Vec<f64>> = bound.vars().map(|v| g.grad(v).unwrap().to_vec()).collect();
        (g.value(l).clone(), grads)
    };
    let (a, b) = (run(), run());
    assert_eq!(a.0.data(), b.0.data());
    assert_eq!(a.1, b.1);
}

proptest! {
    #[test]
    fn log_sum_exp_shift(row in prop::collection::vec(-50.0f64..50.0, 1..8), c in -100.0f64..100.0) {
        let shifted: Vec<f64> = row.iter().map(|v| v + c).collect();
        let base = jemcal_core::tensor::log_sum_exp(&row);
        let moved = jemcal_core::tensor::log_sum_exp(&shifted);
        // Rounding of `base + c` itself is bounded by ulps of the larger operand.
        let scale = base.abs().max(c.abs()).max(moved.abs()).max(1.0);
        prop_assert!((moved - (base + c)).abs() <= 4.0 * f64::EPSILON * scale);
    }

    #[test]
    fn lse_gradient_is_softmax(row in prop::collection::vec(-5.0f64..5.0, 1..6)) {
        let k = row.len();
        let mut g = Graph::new();
        let t = g.param(Tensor::new(&[1, k], row.clone()).unwrap());
        let l = g.log_sum_exp_rows(t).unwrap();
        let s = g.sum(l);
        g.backward(s).unwrap();
        let soft = jemcal_core::tensor::softmax(&row);
        for (a, b) in g.grad(t).unwrap().iter().zip(&soft) {
            prop_assert!((a - b).abs() < 1e-15);
        }
    }
}
