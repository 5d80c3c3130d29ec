//! Labelled feature matrices, synthetic generators, standardization and splits.

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::sgld::DataBox;
use crate::tensor::{self, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Dev,
    Test,
}

/// Index lists into the rows of a [`Dataset`].
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Splits {
    pub train: Vec<usize>,
    pub dev: Vec<usize>,
    pub test: Vec<usize>,
}

impl Splits {
    pub fn get(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }
}

/// Per-feature statistics from the training rows.
///
/// `kept` lists the raw feature columns that survived (non-constant ones);
/// `mean` and `std` are indexed like `kept`.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalization {
    pub raw_dim: usize,
    pub kept: Vec<usize>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub clip: Option<DataBox>,
}

impl Normalization {
    /// Standardizes raw rows, returning the new matrix and the number of
    /// clipped values.
    pub fn apply(&self, raw: &Tensor) -> Result<(Tensor, usize)> {
        let (n, d) = raw.dims2()?;
        if d != self.raw_dim {
            return Err(Error::shape("Normalization::apply", &[n, self.raw_dim], &[n, d]));
        }
        let mut out = Vec::with_capacity(n * self.kept.len());
        let mut clipped = 0;
        for i in 0..n {
            let row = raw.row(i);
            for ((&j, m), s) in self.kept.iter().zip(&self.mean).zip(&self.std) {
                let mut v = (row[j] - m) / s;
                if let Some(b) = self.clip {
                    if !b.contains(v) {
                        clipped += 1;
                        v = b.clamp(v);
                    }
                }
                out.push(v);
            }
        }
        Ok((Tensor::new(&[n, self.kept.len()], out)?, clipped))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Tensor,
    labels: Vec<usize>,
    num_classes: usize,
    splits: Splits,
    normalization: Option<Normalization>,
    clipped: usize,
}

impl Dataset {
    /// All rows start in the training split.
    pub fn new(features: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        let (n, d) = features.dims2()?;
        if labels.len() != n {
            return Err(Error::shape("Dataset", &[n, d], &[labels.len()]));
        }
        if num_classes == 0 {
            return Err(Error::contract("Dataset", "num_classes must be positive"));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::Index {
                what: "Dataset label",
                index: bad,
                bound: num_classes,
            });
        }
        if !features.is_finite() {
            return Err(Error::NonFinite { what: "Dataset features" });
        }
        Ok(Self {
            features,
            labels,
            num_classes,
            splits: Splits {
                train: (0..n).collect(),
                ..Splits::default()
            },
            normalization: None,
            clipped: 0,
        })
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn splits(&self) -> &Splits {
        &self.splits
    }

    pub fn normalization(&self) -> Option<&Normalization> {
        self.normalization.as_ref()
    }

    /// Values clipped into the data box during standardization.
    pub fn clipped(&self) -> usize {
        self.clipped
    }

    pub fn class_counts(&self, idx: &[usize]) -> Vec<usize> {
        let mut c = vec![0; self.num_classes];
        for &i in idx {
            c[self.labels[i]] += 1;
        }
        c
    }

    /// Features and labels of one split, in split order.
    pub fn subset(&self, split: Split) -> Result<(Tensor, Vec<usize>)> {
        let idx = self.splits.get(split);
        let x = self.features.select_rows(idx)?;
        Ok((x, idx.iter().map(|&i| self.labels[i]).collect()))
    }

    /// Replaces the splits; they must be disjoint and cover every row.
    pub fn with_splits(mut self, splits: Splits) -> Result<Self> {
        let n = self.len();
        let mut seen = vec![false; n];
        for &i in splits.train.iter().chain(&splits.dev).chain(&splits.test) {
            if i >= n {
                return Err(Error::Index {
                    what: "split index",
                    index: i,
                    bound: n,
                });
            }
            if seen[i] {
                return Err(Error::contract("with_splits", alloc::format!("row {i} appears twice")));
            }
            seen[i] = true;
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::contract("with_splits", alloc::format!("row {i} is in no split")));
        }
        self.splits = splits;
        Ok(self)
    }

    /// Seeded stratified partition into train/dev/test.
    ///
    /// Within each class the rows are shuffled and cut by rounding the
    /// cumulative fractions, so every split is balanced to within one row
    /// per class.
    pub fn split(self, fractions: [f64; 3], seed: u64) -> Result<Self> {
        if fractions.iter().any(|f| !(*f >= 0.0)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::contract("split", "fractions must be non-negative and sum to 1"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut by_class = vec![Vec::new(); self.num_classes];
        for (i, &y) in self.labels.iter().enumerate() {
            by_class[y].push(i);
        }
        let mut splits = Splits::default();
        for (c, mut rows) in by_class.into_iter().enumerate() {
            if rows.is_empty() {
                return Err(Error::contract("split", alloc::format!("class {c} has no samples")));
            }
            rows.shuffle(&mut rng);
            let m = rows.len() as f64;
            let a = libm::round(fractions[0] * m) as usize;
            let b = (libm::round((fractions[0] + fractions[1]) * m) as usize).clamp(a, rows.len());
            splits.train.extend_from_slice(&rows[..a]);
            splits.dev.extend_from_slice(&rows[a..b]);
            splits.test.extend_from_slice(&rows[b..]);
        }
        splits.train.sort_unstable();
        splits.dev.sort_unstable();
        splits.test.sort_unstable();
        self.with_splits(splits)
    }

    /// Standardizes with train statistics and clips into the default data box.
    pub fn standardize(self) -> Result<Self> {
        self.standardize_with(Some(DataBox::default()))
    }

    /// Standardizes every row with the train-split mean and standard
    /// deviation; constant features are dropped and values outside `clip`
    /// are clamped and counted.
    pub fn standardize_with(self, clip: Option<DataBox>) -> Result<Self> {
        let train = &self.splits.train;
        if train.is_empty() {
            return Err(Error::contract("standardize", "train split is empty"));
        }
        let d = self.input_dim();
        let m = train.len() as f64;
        let mut kept = Vec::new();
        let mut mean = Vec::new();
        let mut std = Vec::new();
        for j in 0..d {
            let mu = train.iter().map(|&i| self.features.row(i)[j]).sum::<f64>() / m;
            let var = train
                .iter()
                .map(|&i| {
                    let c = self.features.row(i)[j] - mu;
                    c * c
                })
                .sum::<f64>()
                / m;
            let s = libm::sqrt(var);
            if s <= 1e-12 * (1.0 + mu.abs()) {
                log::warn!("dropping constant feature {j}");
                continue;
            }
            kept.push(j);
            mean.push(mu);
            std.push(s);
        }
        if kept.is_empty() {
            return Err(Error::contract("standardize", "every feature is constant on the train split"));
        }
        let norm = Normalization {
            raw_dim: d,
            kept,
            mean,
            std,
            clip,
        };
        let (features, clipped) = norm.apply(&self.features)?;
        if clipped > 0 {
            log::info!("clipped {clipped} standardized values into the data box");
        }
        Ok(Self {
            features,
            normalization: Some(norm),
            clipped,
            ..self
        })
    }
}

/// Equal-weight mixture of unit-covariance Gaussians.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixture {
    /// `K×D` component means.
    pub means: Tensor,
}

impl GaussianMixture {
    /// Means at mutual distance `separation`.
    ///
    /// For `K ≤ D + 1` they form a regular simplex in the leading
    /// coordinates. Otherwise they sit on a regular `K`-gon with side
    /// `separation` in a random 2-plane (a line with that spacing when
    /// `D = 1`), so only neighbouring means are at that distance.
    pub fn new(k: usize, d: usize, separation: f64, seed: u64) -> Result<Self> {
        if k < 2 || d < 1 || !(separation >= 0.0) || !separation.is_finite() {
            return Err(Error::contract(
                "GaussianMixture",
                "need K >= 2, D >= 1 and a finite separation >= 0",
            ));
        }
        let mut means = vec![0.0; k * d];
        if k <= d + 1 {
            // Gram-Schmidt on the centred basis vectors e_i - 1/K of R^K.
            let mut basis: Vec<Vec<f64>> = Vec::new();
            for i in 0..k - 1 {
                let mut v: Vec<f64> = (0..k).map(|j| if j == i { 1.0 } else { 0.0 } - 1.0 / k as f64).collect();
                for b in &basis {
                    let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                    v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
                }
                let norm = libm::sqrt(v.iter().map(|x| x * x).sum());
                v.iter_mut().for_each(|x| *x /= norm);
                basis.push(v);
            }
            // Basis vectors are √2 apart, so coordinates scale by sep/√2.
            let scale = separation / libm::sqrt(2.0);
            for c in 0..k {
                for (j, b) in basis.iter().enumerate() {
                    means[c * d + j] = scale * b[c];
                }
            }
        } else if d == 1 {
            for (c, m) in means.iter_mut().enumerate() {
                *m = separation * (c as f64 - (k - 1) as f64 / 2.0);
            }
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut u: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
            let nu = libm::sqrt(u.iter().map(|x| x * x).sum());
            u.iter_mut().for_each(|x| *x /= nu);
            let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
            let dot: f64 = u.iter().zip(&v).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(&u).for_each(|(x, a)| *x -= dot * a);
            let nv = libm::sqrt(v.iter().map(|x| x * x).sum());
            v.iter_mut().for_each(|x| *x /= nv);
            let radius = separation / (2.0 * libm::sin(PI / k as f64));
            for c in 0..k {
                let a = 2.0 * PI * c as f64 / k as f64;
                let (s, co) = (libm::sin(a), libm::cos(a));
                for j in 0..d {
                    means[c * d + j] = radius * (co * u[j] + s * v[j]);
                }
            }
        }
        Ok(Self {
            means: Tensor::new(&[k, d], means)?,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.means.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.means.shape()[1]
    }

    /// Normalized Bayes log-posterior `log p(y | x)` for one point.
    pub fn log_posterior(&self, x: &[f64]) -> Vec<f64> {
        let mut scores: Vec<f64> = (0..self.num_classes())
            .map(|c| {
                let sq: f64 = self.means.row(c).iter().zip(x).map(|(m, v)| (v - m) * (v - m)).sum();
                -0.5 * sq
            })
            .collect();
        let z = tensor::log_sum_exp(&scores);
        scores.iter_mut().for_each(|s| *s -= z);
        scores
    }

    pub fn posterior(&self, x: &[f64]) -> Vec<f64> {
        tensor::softmax(&self.log_posterior(x))
    }

    /// `n_per_class` draws from each component, class by class.
    pub fn sample(&self, n_per_class: usize, seed: u64) -> Result<Dataset> {
        let (k, d) = (self.num_classes(), self.dim());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = Vec::with_capacity(k * n_per_class * d);
        let mut y = Vec::with_capacity(k * n_per_class);
        for c in 0..k {
            for _ in 0..n_per_class {
                for &m in self.means.row(c) {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    x.push(m + z);
                }
                y.push(c);
            }
        }
        Dataset::new(Tensor::new(&[k * n_per_class, d], x)?, y, k)
    }
}

/// Gaussian-mixture dataset; the mixture itself comes from
/// [`GaussianMixture::new`] with the same seed.
pub fn gen_gaussian_mixture(k: usize, d: usize, n_per_class: usize, separation: f64, seed: u64) -> Result<Dataset> {
    GaussianMixture::new(k, d, separation, seed)?.sample(n_per_class, seed.wrapping_add(1))
}

fn check_even(op: &'static str, n: usize) -> Result<()> {
    if n < 2 || !n.is_multiple_of(2) {
        return Err(Error::contract(op, "n must be a positive even number"));
    }
    Ok(())
}

fn check_noise(op: &'static str, noise: f64) -> Result<()> {
    if !(noise >= 0.0) || !noise.is_finite() {
        return Err(Error::contract(op, "noise must be finite and non-negative"));
    }
    Ok(())
}

fn jitter<R: Rng>(v: f64, noise: f64, rng: &mut R) -> f64 {
    let z: f64 = StandardNormal.sample(rng);
    v + noise * z
}

/// Two interleaved half circles with `n / 2` points each.
pub fn gen_two_moons(n: usize, noise: f64, seed: u64) -> Result<Dataset> {
    check_even("gen_two_moons", n)?;
    check_noise("gen_two_moons", noise)?;
    let half = n / 2;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Vec::with_capacity(2 * n);
    let mut y = Vec::with_capacity(n);
    for c in 0..2 {
        for i in 0..half {
            let t = if half == 1 { 0.0 } else { PI * i as f64 / (half - 1) as f64 };
            let (px, py) = if c == 0 {
                (libm::cos(t), libm::sin(t))
            } else {
                (1.0 - libm::cos(t), 0.5 - libm::sin(t))
            };
            x.push(jitter(px, noise, &mut rng));
            x.push(jitter(py, noise, &mut rng));
            y.push(c);
        }
    }
    Dataset::new(Tensor::new(&[n, 2], x)?, y, 2)
}

/// Two interleaved Archimedean spirals with `n / 2` points each.
pub fn gen_spirals(n: usize, turns: f64, noise: f64, seed: u64) -> Result<Dataset> {
    check_even("gen_spirals", n)?;
    check_noise("gen_spirals", noise)?;
    if !(turns > 0.0) || !turns.is_finite() {
        return Err(Error::contract("gen_spirals", "turns must be positive"));
    }
    let half = n / 2;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Vec::with_capacity(2 * n);
    let mut y = Vec::with_capacity(n);
    for c in 0..2 {
        for i in 0..half {
            let r = 0.1 + 0.9 * (i as f64 + 0.5) / half as f64;
            let a = 2.0 * PI * turns * r + PI * c as f64;
            x.push(jitter(r * libm::cos(a), noise, &mut rng));
            x.push(jitter(r * libm::sin(a), noise, &mut rng));
            y.push(c);
        }
    }
    Dataset::new(Tensor::new(&[n, 2], x)?, y, 2)
}
