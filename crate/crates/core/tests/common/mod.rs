#![allow(dead_code)]

use lowimpact::dataset::{generate_gaussian_blobs, Dataset, Split};
use lowimpact::model::{Arch, Curvature, ModelParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&diff) / norm(a).max(norm(b)).max(1e-12)
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// One random `(model, x, y, v)` case; odd trials use an MLP.
pub fn random_case(trial: u64) -> (ModelParams, Vec<f64>, usize, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(1000 + trial);
    let dim = rng.random_range(1..6);
    let classes = rng.random_range(2..5);
    let arch = if trial.is_multiple_of(2) {
        Arch::LogisticRegression { dim, classes }
    } else {
        Arch::Mlp {
            dim,
            hidden: rng.random_range(1..7),
            classes,
        }
    };
    let lambda = rng.random_range(0.0..0.5);
    let weights = (0..arch.n_params())
        .map(|_| 0.7 * gauss(&mut rng))
        .collect();
    let params = ModelParams::new(arch, lambda, weights).unwrap();
    let x = (0..dim).map(|_| gauss(&mut rng)).collect();
    let y = rng.random_range(0..classes);
    let v = (0..arch.n_params()).map(|_| gauss(&mut rng)).collect();
    (params, x, y, v)
}

/// Central finite-difference gradient of the per-sample loss.
pub fn fd_gradient(params: &ModelParams, x: &[f64], y: usize, h: f64) -> Vec<f64> {
    (0..params.n_params())
        .map(|i| {
            let mut p = params.clone();
            p.weights[i] += h;
            let up = p.per_sample_loss(x, y).unwrap();
            p.weights[i] -= 2.0 * h;
            let down = p.per_sample_loss(x, y).unwrap();
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `(grad(w + h v) - grad(w - h v)) / 2h`.
pub fn fd_hvp(params: &ModelParams, x: &[f64], y: usize, v: &[f64], h: f64) -> Vec<f64> {
    let shifted = |s: f64| {
        let mut p = params.clone();
        for (w, vi) in p.weights.iter_mut().zip(v) {
            *w += s * vi;
        }
        p.per_sample_grad(x, y).unwrap()
    };
    let up = shifted(h);
    let down = shifted(-h);
    up.iter()
        .zip(&down)
        .map(|(a, b)| (a - b) / (2.0 * h))
        .collect()
}

pub fn exact_hvp(params: &ModelParams, x: &[f64], y: usize, v: &[f64]) -> Vec<f64> {
    params.per_sample_hvp(x, y, v, Curvature::Exact).unwrap()
}

/// Blob problem with overlapping classes.
pub fn blobs(n_per_class: usize, classes: usize, dim: usize, sep: f64, seed: u64) -> Dataset {
    generate_gaussian_blobs(n_per_class, classes, dim, sep, seed).unwrap()
}

pub fn test_blobs(n_per_class: usize, classes: usize, dim: usize, sep: f64, seed: u64) -> Dataset {
    blobs(n_per_class, classes, dim, sep, seed).with_split(Split::Test)
}

/// Appends one point at `x` with label `y` and the next free id.
pub fn with_point(data: &Dataset, x: &[f64], y: usize) -> Dataset {
    let mut features = data.features().to_vec();
    features.extend_from_slice(x);
    let mut labels = data.labels().to_vec();
    labels.push(y);
    let mut ids = data.ids().to_vec();
    let next = ids.iter().max().map_or(0, |m| m + 1);
    ids.push(next);
    Dataset::new(
        features,
        data.dim(),
        labels,
        ids,
        data.n_classes(),
        data.split(),
    )
    .unwrap()
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}
