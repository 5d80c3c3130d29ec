use jemcal_core::data::*;
use jemcal_core::model::ModelConfig;
use jemcal_core::tensor::Tensor;
use jemcal_core::training::{train, LrSchedule, Mode, TrainConfig};

fn bayes_accuracy(mix: &GaussianMixture, ds: &Dataset) -> f64 {
    let hits = (0..ds.len())
        .filter(|&i| {
            let p = mix.posterior(ds.features().row(i));
            let best = (0..p.len()).fold(0, |b, j| if p[j] > p[b] { j } else { b });
            best == ds.labels()[i]
        })
        .count();
    hits as f64 / ds.len() as f64
}

#[test]
fn well_separated_pair_is_almost_perfectly_classified() {
    let mix = GaussianMixture::new(2, 2, 8.0, 1).unwrap();
    let ds = mix.sample(10_000, 2).unwrap();
    assert!(bayes_accuracy(&mix, &ds) > 0.999);
}

#[test]
fn reference_mixture_has_the_intended_overlap() {
    let mix = GaussianMixture::new(4, 2, 2.5, 3).unwrap();
    let ds = mix.sample(10_000, 4).unwrap();
    let err = 1.0 - bayes_accuracy(&mix, &ds);
    assert!((0.15..=0.25).contains(&err), "Bayes error {err}");
}

#[test]
fn coincident_classes_cannot_be_told_apart() {
    let k = 3;
    let ds = gen_gaussian_mixture(k, 2, 300, 0.0, 5)
        .unwrap()
        .split([0.5, 0.0, 0.5], 5)
        .unwrap()
        .standardize()
        .unwrap();
    let cfg = TrainConfig {
        mode: Mode::Softmax,
        epochs: 10,
        schedule: LrSchedule {
            warmup_steps: 10,
            ..LrSchedule::default()
        },
        model: ModelConfig {
            hidden: vec![16],
            ..ModelConfig::default()
        },
        ..TrainConfig::default()
    };
    let acc = train(&ds, &cfg).unwrap().log.records.last().unwrap().test_acc;
    let n = ds.splits().test.len() as f64;
    let p = 1.0 / k as f64;
    let sigma = (p * (1.0 - p) / n).sqrt();
    assert!((acc - p).abs() < 3.0 * sigma, "accuracy {acc}");
}

/// Leave-one-out nearest neighbour: every point's closest other point
/// shares its label when the classes are separable with a margin.
fn nearest_neighbour_accuracy(ds: &Dataset) -> f64 {
    let n = ds.len();
    let x = ds.features();
    let hits = (0..n)
        .filter(|&i| {
            let mut best = (f64::INFINITY, 0);
            for j in (0..n).filter(|&j| j != i) {
                let d: f64 = x.row(i).iter().zip(x.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
                if d < best.0 {
                    best = (d, j);
                }
            }
            ds.labels()[best.1] == ds.labels()[i]
        })
        .count();
    hits as f64 / n as f64
}

#[test]
fn noiseless_moons_are_learnable() {
    let ds = gen_two_moons(400, 0.0, 6).unwrap();
    assert_eq!(nearest_neighbour_accuracy(&ds), 1.0);
    let ds = ds.split([0.7, 0.0, 0.3], 6).unwrap().standardize().unwrap();
    let cfg = TrainConfig {
        mode: Mode::Softmax,
        epochs: 150,
        batch_size: 32,
        schedule: LrSchedule {
            warmup_steps: 50,
            decay_epochs: vec![100],
            ..LrSchedule::default()
        },
        ..TrainConfig::default()
    };
    let acc = train(&ds, &cfg).unwrap().log.records.last().unwrap().test_acc;
    assert!(acc >= 0.99, "accuracy {acc}");
}

#[test]
fn generators_are_pure_functions_of_their_arguments() {
    assert_eq!(gen_gaussian_mixture(5, 3, 20, 2.0, 7).unwrap(), gen_gaussian_mixture(5, 3, 20, 2.0, 7).unwrap());
    assert_eq!(gen_two_moons(50, 0.1, 7).unwrap(), gen_two_moons(50, 0.1, 7).unwrap());
    assert_eq!(gen_spirals(50, 2.0, 0.1, 7).unwrap(), gen_spirals(50, 2.0, 0.1, 7).unwrap());
    assert_ne!(gen_two_moons(50, 0.1, 7).unwrap(), gen_two_moons(50, 0.1, 8).unwrap());
}

#[test]
fn standardized_train_features_have_unit_moments() {
    let ds = gen_gaussian_mixture(3, 4, 200, 2.0, 8)
        .unwrap()
        .split([0.8, 0.1, 0.1], 8)
        .unwrap()
        .standardize_with(None)
        .unwrap();
    let train = &ds.splits().train;
    let m = train.len() as f64;
    for j in 0..ds.input_dim() {
        let mean = train.iter().map(|&i| ds.features().row(i)[j]).sum::<f64>() / m;
        let var = train.iter().map(|&i| (ds.features().row(i)[j] - mean).powi(2)).sum::<f64>() / m;
        assert!(mean.abs() < 1e-10);
        assert!((var.sqrt() - 1.0).abs() < 1e-10);
    }
}

#[test]
fn stratified_split_is_balanced_and_reproducible() {
    let ds = gen_gaussian_mixture(4, 2, 250, 2.5, 9).unwrap();
    let a = ds.clone().split([0.8, 0.1, 0.1], 42).unwrap();
    let b = ds.clone().split([0.8, 0.1, 0.1], 42).unwrap();
    assert_eq!(a.splits(), b.splits());
    for (split, want) in [(Split::Train, 200), (Split::Dev, 25), (Split::Test, 25)] {
        for c in a.class_counts(a.splits().get(split)) {
            assert!((c as i64 - want).abs() <= 1, "{split:?}: {c}");
        }
    }
    let c = ds.split([0.8, 0.1, 0.1], 43).unwrap();
    assert_ne!(a.splits(), c.splits());
}

#[test]
fn test_rows_never_influence_normalization() {
    let ds = gen_gaussian_mixture(3, 3, 100, 2.0, 10).unwrap().split([0.7, 0.1, 0.2], 10).unwrap();
    let base = ds.clone().standardize().unwrap();
    let mut raw = ds.features().data().to_vec();
    let d = ds.input_dim();
    for &i in &ds.splits().test {
        for v in &mut raw[i * d..(i + 1) * d] {
            *v = *v * 50.0 + 1e3;
        }
    }
    let perturbed = Dataset::new(Tensor::new(&[ds.len(), d], raw).unwrap(), ds.labels().to_vec(), 3)
        .unwrap()
        .with_splits(ds.splits().clone())
        .unwrap()
        .standardize()
        .unwrap();
    assert_eq!(base.normalization(), perturbed.normalization());
}

#[test]
fn mixture_features_rarely_leave_the_box() {
    let ds = gen_gaussian_mixture(4, 2, 2500, 2.5, 11)
        .unwrap()
        .split([0.8, 0.1, 0.1], 11)
        .unwrap()
        .standardize()
        .unwrap();
    let total = ds.features().numel();
    assert!((ds.clipped() as f64) < 0.01 * total as f64);
    assert!(ds.features().data().iter().all(|v| (-3.0..=3.0).contains(v)));
}
