//! Fixtures shared by the criterion benchmarks.

use khjb::dynamics::{generate_dataset, ControlAffineSystem, GeneratorDataset, GridAxis, LabelMode, StageCost, StateGridSpec};

/// Double-integrator data on an `n x n` grid over `[-2, 2]^2`.
pub fn double_integrator(n: usize) -> GeneratorDataset {
    let sys = ControlAffineSystem::linear(vec![vec![0.0, 1.0], vec![0.0, 0.0]], vec![vec![0.0], vec![1.0]], 5.0, 0.01)
        .expect("valid system");
    let grid = StateGridSpec::new(vec![GridAxis::symmetric(2.0, n), GridAxis::symmetric(2.0, n)]);
    let cost = StageCost::Quadratic { weights: vec![1.0, 1.0] };
    generate_dataset(&sys, &grid, &cost, LabelMode::Analytic, 0).expect("dataset generation succeeds")
}
