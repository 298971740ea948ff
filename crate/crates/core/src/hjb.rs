//! Backward integration of the coefficient-space HJB final-value problem
//!
//! ```text
//! -v' = A v + q + K_gamma^{-1} [ D_r(<B v, k(x_i)>) ]_i,    v(T) = 0,
//! ```
//!
//! and extraction of the value function `V(x) = <v_0, k(x)>` and the feedback
//! `pi(x) = u*(<B v_0, k(x)>)`.
//!
//! Time runs backwards from `T`, so with `w_m = v(T - m dt)` the semi-implicit
//! step is `(I - dt A) w_{m+1} = w_m + dt (q + d(w_m))`.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use faer::linalg::solvers::{PartialPivLu, Solve};
use faer::{Col, Mat};
use serde::{Deserialize, Serialize};

use crate::error::{check_dims, Error, Result};
use crate::generator::GeneratorModel;
use crate::kernels::cross_kernel_into;
use crate::penalty::Penalty;
use crate::points::PointSet;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    /// Linear part implicit, dual term explicit.
    #[default]
    SemiImplicit,
    /// Backward Euler with the dual term resolved by fixed-point iteration.
    FullyImplicit,
}

pub const FIXED_POINT_TOL: f64 = 1e-10;
pub const FIXED_POINT_MAX_ITER: usize = 50;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HjbConfig {
    pub dt: f64,
    pub horizon_steps: usize,
    pub scheme: Scheme,
    pub record_trajectory: bool,
}

impl HjbConfig {
    pub fn new(dt: f64, horizon_steps: usize) -> Self {
        Self {
            dt,
            horizon_steps,
            scheme: Scheme::SemiImplicit,
            record_trajectory: false,
        }
    }

    pub fn with_scheme(mut self, scheme: Scheme) -> Self {
        self.scheme = scheme;
        self
    }

    pub fn recording(mut self) -> Self {
        self.record_trajectory = true;
        self
    }

    pub fn horizon(&self) -> f64 {
        self.dt * self.horizon_steps as f64
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::arg(format!("time step must be positive, got {}", self.dt)));
        }
        if self.horizon_steps == 0 {
            return Err(Error::arg("horizon must be at least one step"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct HjbSolution {
    model: Arc<GeneratorModel>,
    v0: Col<f64>,
    /// `B_j v_0` for every input channel.
    lambda_coeff: Vec<Col<f64>>,
    trajectory: Option<Vec<Col<f64>>>,
}

/// Per-step operators shared by both schemes.
struct Stepper<'a> {
    model: &'a GeneratorModel,
    penalty: &'a dyn Penalty,
    /// `K B_j`, so that `(K B_j w)_i = <B_j w, k(x_i)>`.
    lambda_maps: Vec<Mat<f64>>,
    lu: PartialPivLu<f64>,
    dt: f64,
}

impl Stepper<'_> {
    /// `K_gamma^{-1} [D_r(lambda(x_i; w))]_i`.
    fn dual_term(&self, w: &Col<f64>, lambda_buf: &mut [f64]) -> Col<f64> {
        let n = w.nrows();
        let lambdas: Vec<Col<f64>> = self.lambda_maps.iter().map(|m| m * w).collect();
        let mut d = Col::<f64>::from_fn(n, |i| {
            for (l, col) in lambda_buf.iter_mut().zip(&lambdas) {
                *l = col[i];
            }
            self.penalty.dual_value(lambda_buf)
        });
        self.model.solve_regularized_in_place(&mut d);
        d
    }

    /// `(I - dt A)^{-1} (w + dt (q + d))`.
    fn implicit_solve(&self, w: &Col<f64>, d: &Col<f64>) -> Col<f64> {
        let q = self.model.q_coeff();
        let mut rhs = Col::<f64>::from_fn(w.nrows(), |i| w[i] + self.dt * (q[i] + d[i]));
        self.lu.solve_in_place(rhs.as_mat_mut());
        rhs
    }
}

fn max_abs(v: &Col<f64>) -> f64 {
    v.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}

/// Integrates the final-value problem from `v(T) = 0` back to `t = 0`.
pub fn solve_fvp(model: &Arc<GeneratorModel>, penalty: &dyn Penalty, cfg: &HjbConfig) -> Result<HjbSolution> {
    cfg.validate()?;
    check_dims("penalty input dimension", model.n_u(), penalty.input_dim())?;
    let n = model.len();

    let step_matrix = Mat::<f64>::from_fn(n, n, |i, j| {
        let id = if i == j { 1.0 } else { 0.0 };
        id - cfg.dt * model.a_hat()[(i, j)]
    });
    let lu = step_matrix.partial_piv_lu();
    let (mut u_min, mut u_max) = (f64::INFINITY, 0.0_f64);
    for i in 0..n {
        let v = lu.U()[(i, i)].abs();
        u_min = u_min.min(v);
        u_max = u_max.max(v);
    }
    if !(u_min.is_finite() && u_min > 1e-13 * u_max) {
        return Err(Error::StepSize { dt: cfg.dt });
    }

    let stepper = Stepper {
        model,
        penalty,
        lambda_maps: model.b_hat().iter().map(|b| model.gram() * b).collect(),
        lu,
        dt: cfg.dt,
    };

    let mut lambda_buf = vec![0.0; model.n_u()];
    let mut w = Col::<f64>::zeros(n);
    let mut trajectory = cfg.record_trajectory.then(|| vec![w.clone()]);
    for step in 1..=cfg.horizon_steps {
        let d = stepper.dual_term(&w, &mut lambda_buf);
        let mut next = stepper.implicit_solve(&w, &d);
        if cfg.scheme == Scheme::FullyImplicit {
            let mut converged = false;
            for _ in 0..FIXED_POINT_MAX_ITER {
                let d = stepper.dual_term(&next, &mut lambda_buf);
                let iterate = stepper.implicit_solve(&w, &d);
                let change = max_abs(&(&iterate - &next));
                next = iterate;
                if change <= FIXED_POINT_TOL * max_abs(&next).max(1.0) {
                    converged = true;
                    break;
                }
            }
            if !converged {
                return Err(Error::Divergence {
                    step,
                    reason: format!("fixed-point iteration did not converge in {FIXED_POINT_MAX_ITER} iterations"),
                });
            }
        }
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence {
                step,
                reason: "non-finite value coefficients".into(),
            });
        }
        w = next;
        if let Some(t) = trajectory.as_mut() {
            t.push(w.clone());
        }
    }
    Ok(HjbSolution::new(Arc::clone(model), w, trajectory))
}

impl HjbSolution {
    pub fn new(model: Arc<GeneratorModel>, v0: Col<f64>, trajectory: Option<Vec<Col<f64>>>) -> Self {
        let lambda_coeff = model.b_hat().iter().map(|b| b * &v0).collect();
        Self {
            model,
            v0,
            lambda_coeff,
            trajectory,
        }
    }

    pub fn model(&self) -> &Arc<GeneratorModel> {
        &self.model
    }

    pub fn v0(&self) -> &Col<f64> {
        &self.v0
    }

    /// Coefficients `w_0 = 0, w_1, .., w_H` when recorded; `w_m` belongs to time `T - m dt`.
    pub fn trajectory(&self) -> Option<&[Col<f64>]> {
        self.trajectory.as_deref()
    }

    /// Value and costate signal `lambda(x)` from a single kernel vector.
    pub fn evaluate(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        check_dims("query state", self.model.n_x(), x.len())?;
        let mut kx = vec![0.0; self.model.len()];
        cross_kernel_into(&self.model.kernel, &self.model.points, x, &mut kx);
        let dot = |c: &Col<f64>| c.iter().zip(&kx).map(|(a, b)| a * b).sum::<f64>();
        Ok((dot(&self.v0), self.lambda_coeff.iter().map(dot).collect()))
    }

    /// `<v_0, k(x)>`.
    pub fn value_at(&self, x: &[f64]) -> Result<f64> {
        Ok(self.evaluate(x)?.0)
    }

    /// `u*(<B v_0, k(x)>)`, always inside the penalty's box.
    pub fn policy_at(&self, penalty: &dyn Penalty, x: &[f64]) -> Result<Vec<f64>> {
        let (_, lambda) = self.evaluate(x)?;
        Ok(penalty.u_star(&lambda))
    }

    /// `(2 u_max / pi) atan(policy_at(x))` per channel.
    pub fn smoothed_policy_at(&self, penalty: &dyn Penalty, x: &[f64], u_max: &[f64]) -> Result<Vec<f64>> {
        check_dims("u_max", self.model.n_u(), u_max.len())?;
        if u_max.iter().any(|m| !(*m > 0.0)) {
            return Err(Error::arg("u_max must be positive"));
        }
        Ok(smooth_input(&self.policy_at(penalty, x)?, u_max))
    }
}

pub fn smooth_input(u: &[f64], u_max: &[f64]) -> Vec<f64> {
    u.iter()
        .zip(u_max)
        .map(|(u, m)| 2.0 * m / PI * u.atan())
        .collect()
}

/// Writes `x_1..x_n, V, u_1..u_m` for every evaluation point.
pub fn write_value_policy_csv(
    path: &Path,
    sol: &HjbSolution,
    penalty: &dyn Penalty,
    points: &PointSet,
    u_max: Option<&[f64]>,
    tag: &str,
) -> Result<()> {
    let io = |e| Error::io(path, e);
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    let mut cols: Vec<String> = (1..=points.dim()).map(|i| format!("x_{i}")).collect();
    cols.push("V".into());
    cols.extend((1..=sol.model.n_u()).map(|j| format!("u_{j}")));
    writeln!(w, "# {tag}").map_err(io)?;
    writeln!(w, "{}", cols.join(",")).map_err(io)?;
    for x in points.rows() {
        let (v, lambda) = sol.evaluate(x)?;
        let mut u = penalty.u_star(&lambda);
        if let Some(m) = u_max {
            u = smooth_input(&u, m);
        }
        let fields: Vec<String> = x
            .iter()
            .chain(std::iter::once(&v))
            .chain(&u)
            .map(|v| format!("{v:.16e}"))
            .collect();
        writeln!(w, "{}", fields.join(",")).map_err(io)?;
    }
    w.flush().map_err(io)
}
