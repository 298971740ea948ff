use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{check_dims, Error, Result};
use crate::penalty::Penalty;

use super::{ControlAffineSystem, StageCost};

pub const DEFAULT_BLOWUP_BOUND: f64 = 1e6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SimulationConfig {
    pub dt: f64,
    pub steps: usize,
    /// The policy is re-evaluated every `hold_steps` steps and held in between.
    pub hold_steps: usize,
    pub noise: bool,
    pub seed: u64,
    pub blowup_bound: f64,
    /// Index of a `(cos, sin)` pair to project back onto the unit circle after each step.
    pub circle_axis: Option<usize>,
}

impl SimulationConfig {
    pub fn new(dt: f64, steps: usize) -> Self {
        Self {
            dt,
            steps,
            hold_steps: 1,
            noise: false,
            seed: 0,
            blowup_bound: DEFAULT_BLOWUP_BOUND,
            circle_axis: None,
        }
    }

    pub fn with_noise(mut self, seed: u64) -> Self {
        self.noise = true;
        self.seed = seed;
        self
    }

    pub fn with_hold(mut self, hold_steps: usize) -> Self {
        self.hold_steps = hold_steps;
        self
    }

    pub fn with_circle_projection(mut self, axis: Option<usize>) -> Self {
        self.circle_axis = axis;
        self
    }
}

/// States `x_0..=x_K` and the clipped inputs `u_0..u_{K-1}` applied between them.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub dt: f64,
    pub states: Vec<Vec<f64>>,
    pub inputs: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn final_state(&self) -> &[f64] {
        self.states.last().expect("trajectory always holds x0")
    }
}

/// Euler-Maruyama rollout `x+ = x + dt (f + G clip(pi(x))) + sqrt(2 eps dt) xi`.
pub fn simulate_closed_loop(
    sys: &ControlAffineSystem,
    policy: &dyn Fn(&[f64]) -> Vec<f64>,
    x0: &[f64],
    cfg: &SimulationConfig,
) -> Result<Trajectory> {
    check_dims("initial state", sys.n_x(), x0.len())?;
    if !(cfg.dt > 0.0) {
        return Err(Error::arg(format!("simulation dt must be positive, got {}", cfg.dt)));
    }
    if cfg.hold_steps == 0 {
        return Err(Error::arg("hold_steps must be at least 1"));
    }
    if cfg.circle_axis.is_some_and(|a| a + 1 >= sys.n_x()) {
        return Err(Error::arg("circle projection axis out of range"));
    }
    let n_x = sys.n_x();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let noise_scale = (2.0 * sys.epsilon * cfg.dt).sqrt();

    let mut states = Vec::with_capacity(cfg.steps + 1);
    let mut inputs = Vec::with_capacity(cfg.steps);
    let mut x = x0.to_vec();
    let mut u = vec![0.0; sys.n_u()];
    let mut dx = vec![0.0; n_x];
    let mut g = vec![0.0; n_x * sys.n_u()];
    states.push(x.clone());

    for k in 0..cfg.steps {
        if k % cfg.hold_steps == 0 {
            u = policy(&x);
            check_dims("policy output", sys.n_u(), u.len())?;
            sys.clip_input(&mut u);
        }
        sys.eval_into(&x, &u, &mut dx, &mut g);
        for (xi, di) in x.iter_mut().zip(&dx) {
            *xi += cfg.dt * di;
        }
        if cfg.noise {
            for xi in x.iter_mut() {
                let xi_k: f64 = StandardNormal.sample(&mut rng);
                *xi += noise_scale * xi_k;
            }
        }
        if let Some(a) = cfg.circle_axis {
            let r = x[a].hypot(x[a + 1]);
            if r > 0.0 {
                x[a] /= r;
                x[a + 1] /= r;
            }
        }
        let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !norm.is_finite() || norm > cfg.blowup_bound {
            return Err(Error::Divergence {
                step: k + 1,
                reason: format!("state norm {norm:e} exceeds bound {:e}", cfg.blowup_bound),
            });
        }
        inputs.push(u.clone());
        states.push(x.clone());
    }
    Ok(Trajectory {
        dt: cfg.dt,
        states,
        inputs,
    })
}

/// Left Riemann sum `sum_k (q(x_k) + r(u_k)) dt`.
pub fn accumulated_cost(traj: &Trajectory, cost: &StageCost, penalty: &dyn Penalty, dt: f64) -> f64 {
    traj.states
        .iter()
        .zip(&traj.inputs)
        .map(|(x, u)| (cost.eval(x) + penalty.cost(u)) * dt)
        .sum()
}

/// One classical Runge-Kutta step of `x' = f(x) + G(x) u` with `u` held constant.
/// A negative `h` integrates backwards.
pub fn rk4_step(sys: &ControlAffineSystem, x: &[f64], u: &[f64], h: f64) -> Vec<f64> {
    let n = x.len();
    let mut g = vec![0.0; n * sys.n_u()];
    let mut stage = |y: &[f64]| {
        let mut d = vec![0.0; n];
        sys.eval_into(y, u, &mut d, &mut g);
        d
    };
    let shift = |a: &[f64], b: &[f64], s: f64| -> Vec<f64> { a.iter().zip(b).map(|(a, b)| a + s * b).collect() };
    let k1 = stage(x);
    let k2 = stage(&shift(x, &k1, 0.5 * h));
    let k3 = stage(&shift(x, &k2, 0.5 * h));
    let k4 = stage(&shift(x, &k3, h));
    (0..n)
        .map(|i| x[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect()
}
