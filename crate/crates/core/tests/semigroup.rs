//! The fitted generator against the transition semigroup of a linear SDE.
//!
//! For `dX = (a X + b u) dt + sqrt(2 eps) dW` the law of `X_t` is Gaussian, so
//! `(E h(X_t) - h(x)) / t` can be computed exactly for a squared-exponential `h`
//! and, independently, by antithetic Monte Carlo sampling.

use faer::Col;
use khjb::dynamics::{generate_dataset, ControlAffineSystem, GridAxis, LabelMode, StageCost, StateGridSpec};
use khjb::generator::{fit, GeneratorModel};
use khjb::kernels::KernelSpec;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

const A: f64 = -0.5;
const B: f64 = 1.0;
const EPS: f64 = 0.05;
const SIGMA: f64 = 1.0;

fn model() -> (GeneratorModel, usize) {
    let sys = ControlAffineSystem::linear(vec![vec![A]], vec![vec![B]], 10.0, EPS).unwrap();
    let grid = StateGridSpec::new(vec![GridAxis::new(-2.0, 2.0, 61)]);
    let cost = StageCost::Quadratic { weights: vec![1.0] };
    let data = generate_dataset(&sys, &grid, &cost, LabelMode::Analytic, 0).unwrap();
    let m = fit(&data, &KernelSpec::squared_exponential(SIGMA).unwrap(), 1e-10, EPS).unwrap();
    // the grid point at 0.2 carries the test function
    let j = m.points.rows().position(|p| (p[0] - 0.2).abs() < 1e-12).unwrap();
    (m, j)
}

fn h(centre: f64, y: f64) -> f64 {
    (-(y - centre).powi(2) / (SIGMA * SIGMA)).exp()
}

/// Mean and variance of `X_t` from `x` under the constant input `u`.
fn transition(x: f64, u: f64, t: f64) -> (f64, f64) {
    let e = (A * t).exp();
    (x * e + B * u / A * (e - 1.0), EPS * ((2.0 * A * t).exp() - 1.0) / A)
}

/// `E h(Y)` for `Y ~ N(m, s2)`.
fn gaussian_expectation(centre: f64, m: f64, s2: f64) -> f64 {
    let w = SIGMA * SIGMA + 2.0 * s2;
    SIGMA / w.sqrt() * (-(m - centre).powi(2) / w).exp()
}

#[test]
fn generator_matches_exact_semigroup_derivative() {
    let (m, j) = model();
    let centre = m.points.row(j)[0];
    let coeff = Col::<f64>::from_fn(m.len(), |i| if i == j { 1.0 } else { 0.0 });
    let t = 1e-6;
    for &u in &[0.0, 0.7, -1.3] {
        for k in 0..=10 {
            let x = -1.0 + 0.2 * k as f64;
            let (mean, var) = transition(x, u, t);
            let exact = (gaussian_expectation(centre, mean, var) - h(centre, x)) / t;
            let learned = m.generator_apply(&[u], &coeff, &[x]).unwrap();
            assert!(
                (learned - exact).abs() <= 1e-3,
                "u = {u}, x = {x}: learned {learned}, semigroup {exact}"
            );
        }
    }
}

#[test]
fn generator_matches_monte_carlo_with_antithetic_pairs() {
    let (m, j) = model();
    let centre = m.points.row(j)[0];
    let coeff = Col::<f64>::from_fn(m.len(), |i| if i == j { 1.0 } else { 0.0 });
    let t = 1e-3;
    let pairs = 200_000;
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for &(x, u) in &[(-0.6, 0.0), (0.1, 0.5), (0.9, -1.0)] {
        let (mean, var) = transition(x, u, t);
        let s = var.sqrt();
        let mut acc = 0.0;
        for _ in 0..pairs {
            let z: f64 = StandardNormal.sample(&mut rng);
            acc += 0.5 * (h(centre, mean + s * z) + h(centre, mean - s * z));
        }
        let mc = (acc / pairs as f64 - h(centre, x)) / t;
        let learned = m.generator_apply(&[u], &coeff, &[x]).unwrap();
        // O(t) time-discretization bias plus sampling noise of a few 1e-4
        assert!((learned - mc).abs() <= 5e-3, "x = {x}, u = {u}: learned {learned}, MC {mc}");
    }
}
