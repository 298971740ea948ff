use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{check_dims, Error, Result};

/// Dynamics of the form `x' = f(x) + G(x) u`.
pub trait ControlAffine: Send + Sync {
    fn state_dim(&self) -> usize;
    fn input_dim(&self) -> usize;
    fn drift(&self, x: &[f64], out: &mut [f64]);
    /// Row-major `state_dim x input_dim`.
    fn input_map(&self, x: &[f64], out: &mut [f64]);
}

/// A control-affine diffusion `dX = (f + G u) dt + sqrt(2 eps) dW` with a box on `u`.
#[derive(Clone)]
pub struct ControlAffineSystem {
    pub name: String,
    dynamics: Arc<dyn ControlAffine>,
    pub u_lower: Vec<f64>,
    pub u_upper: Vec<f64>,
    pub epsilon: f64,
}

impl fmt::Debug for ControlAffineSystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ControlAffineSystem")
            .field("name", &self.name)
            .field("n_x", &self.n_x())
            .field("n_u", &self.n_u())
            .field("u_lower", &self.u_lower)
            .field("u_upper", &self.u_upper)
            .field("epsilon", &self.epsilon)
            .finish()
    }
}

impl ControlAffineSystem {
    pub fn new(
        name: impl Into<String>,
        dynamics: Arc<dyn ControlAffine>,
        u_lower: Vec<f64>,
        u_upper: Vec<f64>,
        epsilon: f64,
    ) -> Result<Self> {
        let n_u = dynamics.input_dim();
        check_dims("control box lower", n_u, u_lower.len())?;
        check_dims("control box upper", n_u, u_upper.len())?;
        if u_lower.iter().zip(&u_upper).any(|(lo, hi)| !(lo < hi)) {
            return Err(Error::arg("control box must satisfy u_minus < u_plus"));
        }
        if !(epsilon >= 0.0 && epsilon.is_finite()) {
            return Err(Error::arg(format!("diffusion epsilon must be >= 0, got {epsilon}")));
        }
        Ok(Self {
            name: name.into(),
            dynamics,
            u_lower,
            u_upper,
            epsilon,
        })
    }

    pub fn with_epsilon(mut self, epsilon: f64) -> Self {
        self.epsilon = epsilon;
        self
    }

    pub fn n_x(&self) -> usize {
        self.dynamics.state_dim()
    }

    pub fn n_u(&self) -> usize {
        self.dynamics.input_dim()
    }

    pub fn drift(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n_x()];
        self.dynamics.drift(x, &mut out);
        out
    }

    pub fn input_map(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n_x() * self.n_u()];
        self.dynamics.input_map(x, &mut out);
        out
    }

    /// `f(x) + G(x) u`, with no clipping of `u`.
    pub fn drift_under_input(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        check_dims("state", self.n_x(), x.len())?;
        check_dims("input", self.n_u(), u.len())?;
        let mut out = vec![0.0; self.n_x()];
        let mut g = vec![0.0; self.n_x() * self.n_u()];
        self.eval_into(x, u, &mut out, &mut g);
        if out.iter().all(|v| v.is_finite()) {
            Ok(out)
        } else {
            Err(Error::NumericalDomain {
                what: "drift".into(),
                location: format!("x = {x:?}"),
            })
        }
    }

    /// Unchecked `f(x) + G(x) u` using caller-provided scratch for `G`.
    #[inline]
    pub(crate) fn eval_into(&self, x: &[f64], u: &[f64], out: &mut [f64], g: &mut [f64]) {
        let n_u = self.n_u();
        self.dynamics.drift(x, out);
        self.dynamics.input_map(x, g);
        for (i, o) in out.iter_mut().enumerate() {
            *o += g[i * n_u..(i + 1) * n_u]
                .iter()
                .zip(u)
                .map(|(a, b)| a * b)
                .sum::<f64>();
        }
    }

    pub fn clip_input(&self, u: &mut [f64]) {
        for ((u, lo), hi) in u.iter_mut().zip(&self.u_lower).zip(&self.u_upper) {
            *u = u.clamp(*lo, *hi);
        }
    }

    /// `x' = A x + B u`; `a` is `n x n`, `b` is `n x m`, both row-major nested.
    pub fn linear(a: Vec<Vec<f64>>, b: Vec<Vec<f64>>, bound: f64, epsilon: f64) -> Result<Self> {
        let sys = LinearSystem::new(a, b)?;
        let m = sys.input_dim();
        Self::new("linear", Arc::new(sys), vec![-bound; m], vec![bound; m], epsilon)
    }

    pub fn pendulum(params: PendulumParams, epsilon: f64) -> Result<Self> {
        let b = params.max_torque;
        Self::new("pendulum", Arc::new(Pendulum::new(params)?), vec![-b], vec![b], epsilon)
    }

    pub fn cartpole(params: CartpoleParams, epsilon: f64) -> Result<Self> {
        let b = params.max_force;
        Self::new("cartpole", Arc::new(Cartpole::new(params)?), vec![-b], vec![b], epsilon)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinearSystem {
    a: Vec<Vec<f64>>,
    b: Vec<Vec<f64>>,
}

impl LinearSystem {
    pub fn new(a: Vec<Vec<f64>>, b: Vec<Vec<f64>>) -> Result<Self> {
        let n = a.len();
        if n == 0 || a.iter().any(|r| r.len() != n) {
            return Err(Error::arg("A must be a non-empty square matrix"));
        }
        if b.len() != n || b[0].is_empty() || b.iter().any(|r| r.len() != b[0].len()) {
            return Err(Error::arg("B must have as many rows as A and at least one column"));
        }
        Ok(Self { a, b })
    }

    pub fn a(&self) -> &[Vec<f64>] {
        &self.a
    }

    pub fn b(&self) -> &[Vec<f64>] {
        &self.b
    }
}

impl ControlAffine for LinearSystem {
    fn state_dim(&self) -> usize {
        self.a.len()
    }

    fn input_dim(&self) -> usize {
        self.b[0].len()
    }

    fn drift(&self, x: &[f64], out: &mut [f64]) {
        for (o, row) in out.iter_mut().zip(&self.a) {
            *o = row.iter().zip(x).map(|(a, x)| a * x).sum();
        }
    }

    fn input_map(&self, _x: &[f64], out: &mut [f64]) {
        for (chunk, row) in out.chunks_exact_mut(self.input_dim()).zip(&self.b) {
            chunk.copy_from_slice(row);
        }
    }
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::arg(format!("{name} must be positive, got {v}")))
    }
}

fn non_negative(name: &str, v: f64) -> Result<()> {
    if v >= 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::arg(format!("{name} must be non-negative, got {v}")))
    }
}

/// Torque-driven rigid pendulum; `theta = 0` is upright.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PendulumParams {
    pub mass: f64,
    pub gravity: f64,
    pub length: f64,
    pub damping: f64,
    /// Inertia about the centre of mass.
    pub inertia: f64,
    pub max_torque: f64,
}

impl Default for PendulumParams {
    fn default() -> Self {
        Self {
            mass: 1.0,
            gravity: 9.81,
            length: 1.0,
            damping: 0.1,
            inertia: 0.0842,
            max_torque: 1.5,
        }
    }
}

/// State `(cos theta, sin theta, theta_dot)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pendulum {
    params: PendulumParams,
    pivot_inertia: f64,
}

impl Pendulum {
    pub fn new(params: PendulumParams) -> Result<Self> {
        positive("pendulum mass", params.mass)?;
        non_negative("gravity", params.gravity)?;
        positive("pendulum length", params.length)?;
        non_negative("pendulum damping", params.damping)?;
        non_negative("pendulum inertia", params.inertia)?;
        positive("max torque", params.max_torque)?;
        let lc = 0.5 * params.length;
        Ok(Self {
            params,
            pivot_inertia: params.inertia + params.mass * lc * lc,
        })
    }

    pub fn pivot_inertia(&self) -> f64 {
        self.pivot_inertia
    }
}

impl ControlAffine for Pendulum {
    fn state_dim(&self) -> usize {
        3
    }

    fn input_dim(&self) -> usize {
        1
    }

    fn drift(&self, x: &[f64], out: &mut [f64]) {
        let (c, s, w) = (x[0], x[1], x[2]);
        let p = &self.params;
        let lc = 0.5 * p.length;
        out[0] = -s * w;
        out[1] = c * w;
        out[2] = (p.mass * p.gravity * lc * s - p.damping * w) / self.pivot_inertia;
    }

    fn input_map(&self, _x: &[f64], out: &mut [f64]) {
        out[0] = 0.0;
        out[1] = 0.0;
        out[2] = 1.0 / self.pivot_inertia;
    }
}

/// Cart with a pole hinged on top; `theta = 0` is upright.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CartpoleParams {
    pub cart_mass: f64,
    pub pole_mass: f64,
    pub length: f64,
    /// Viscous damping of the pole joint.
    pub pole_damping: f64,
    /// Viscous damping of the cart.
    pub cart_damping: f64,
    /// Pole inertia about its centre of mass.
    pub inertia: f64,
    pub gravity: f64,
    pub max_force: f64,
}

impl Default for CartpoleParams {
    fn default() -> Self {
        Self {
            cart_mass: 0.5,
            pole_mass: 0.5,
            length: 1.0,
            pole_damping: 0.05,
            cart_damping: 0.05,
            inertia: 0.0513,
            gravity: 9.81,
            max_force: 7.0,
        }
    }
}

/// State `(x, x_dot, cos theta, sin theta, theta_dot)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Cartpole {
    params: CartpoleParams,
}

impl Cartpole {
    pub fn new(params: CartpoleParams) -> Result<Self> {
        positive("cart mass", params.cart_mass)?;
        positive("pole mass", params.pole_mass)?;
        positive("pole length", params.length)?;
        non_negative("pole damping", params.pole_damping)?;
        non_negative("cart damping", params.cart_damping)?;
        non_negative("pole inertia", params.inertia)?;
        non_negative("gravity", params.gravity)?;
        positive("max force", params.max_force)?;
        Ok(Self { params })
    }

    pub fn params(&self) -> &CartpoleParams {
        &self.params
    }

    /// Mass matrix entries `(m11, m12, m22)` and inverse determinant at `cos theta = c`.
    #[inline]
    fn mass_matrix(&self, c: f64) -> (f64, f64, f64, f64) {
        let p = &self.params;
        let lc = 0.5 * p.length;
        let m11 = p.cart_mass + p.pole_mass;
        let m12 = p.pole_mass * lc * c;
        let m22 = p.inertia + p.pole_mass * lc * lc;
        (m11, m12, m22, 1.0 / (m11 * m22 - m12 * m12))
    }
}

impl ControlAffine for Cartpole {
    fn state_dim(&self) -> usize {
        5
    }

    fn input_dim(&self) -> usize {
        1
    }

    fn drift(&self, x: &[f64], out: &mut [f64]) {
        let (v, c, s, w) = (x[1], x[2], x[3], x[4]);
        let p = &self.params;
        let lc = 0.5 * p.length;
        let (m11, m12, m22, inv_det) = self.mass_matrix(c);
        let r1 = p.pole_mass * lc * s * w * w - p.cart_damping * v;
        let r2 = p.pole_mass * p.gravity * lc * s - p.pole_damping * w;
        out[0] = v;
        out[1] = (m22 * r1 - m12 * r2) * inv_det;
        out[2] = -s * w;
        out[3] = c * w;
        out[4] = (m11 * r2 - m12 * r1) * inv_det;
    }

    fn input_map(&self, x: &[f64], out: &mut [f64]) {
        let (_, m12, m22, inv_det) = self.mass_matrix(x[2]);
        out[0] = 0.0;
        out[1] = m22 * inv_det;
        out[2] = 0.0;
        out[3] = 0.0;
        out[4] = -m12 * inv_det;
    }
}

type VecField = dyn Fn(&[f64], &mut [f64]) + Send + Sync;

/// User-supplied drift and input map.
pub struct FnSystem {
    n_x: usize,
    n_u: usize,
    drift: Box<VecField>,
    input_map: Box<VecField>,
}

impl FnSystem {
    pub fn new(
        n_x: usize,
        n_u: usize,
        drift: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
        input_map: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        Self {
            n_x,
            n_u,
            drift: Box::new(drift),
            input_map: Box::new(input_map),
        }
    }
}

impl ControlAffine for FnSystem {
    fn state_dim(&self) -> usize {
        self.n_x
    }

    fn input_dim(&self) -> usize {
        self.n_u
    }

    fn drift(&self, x: &[f64], out: &mut [f64]) {
        (self.drift)(x, out)
    }

    fn input_map(&self, x: &[f64], out: &mut [f64]) {
        (self.input_map)(x, out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn scalar() -> ControlAffineSystem {
        ControlAffineSystem::linear(vec![vec![1.0]], vec![vec![1.0]], 5.0, 0.0).unwrap()
    }

    #[test]
    fn linear_drift_examples() {
        assert_eq!(scalar().drift_under_input(&[2.0], &[0.0]).unwrap(), vec![2.0]);
        assert_eq!(scalar().drift_under_input(&[2.0], &[-3.0]).unwrap(), vec![-1.0]);
        // no clipping: u outside the box still enters linearly
        assert_eq!(scalar().drift_under_input(&[0.0], &[10.0]).unwrap(), vec![10.0]);
    }

    #[test]
    fn pendulum_upright_is_equilibrium() {
        let p = ControlAffineSystem::pendulum(PendulumParams::default(), 0.0).unwrap();
        assert_eq!(p.drift_under_input(&[1.0, 0.0, 0.0], &[0.0]).unwrap(), vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn pendulum_inertia_and_gravity_sign() {
        let pend = Pendulum::new(PendulumParams::default()).unwrap();
        assert_abs_diff_eq!(pend.pivot_inertia(), 0.3342, epsilon = 1e-12);
        let p = ControlAffineSystem::pendulum(PendulumParams::default(), 0.0).unwrap();
        // horizontal, at rest: gravity pulls theta away from upright
        let d = p.drift_under_input(&[0.0, 1.0, 0.0], &[0.0]).unwrap();
        assert_abs_diff_eq!(d[2], 9.81 * 0.5 / 0.3342, epsilon = 1e-12);
    }

    #[test]
    fn cartpole_solves_coupled_equations() {
        let params = CartpoleParams::default();
        let cp = ControlAffineSystem::cartpole(params, 0.0).unwrap();
        let theta: f64 = 0.7;
        let (v, w, u) = (0.3, -1.2, 2.5);
        let x = [0.1, v, theta.cos(), theta.sin(), w];
        let d = cp.drift_under_input(&x, &[u]).unwrap();
        let (acc, alpha) = (d[1], d[4]);
        let lc = 0.5 * params.length;
        let m = params.pole_mass;
        let eq1 = (params.cart_mass + m) * acc + m * lc * theta.cos() * alpha
            - m * lc * theta.sin() * w * w
            + params.cart_damping * v
            - u;
        let eq2 = (params.inertia + m * lc * lc) * alpha + m * lc * theta.cos() * acc
            - m * params.gravity * lc * theta.sin()
            + params.pole_damping * w;
        assert_abs_diff_eq!(eq1, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(eq2, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn rejects_bad_parameters() {
        let bad = PendulumParams {
            mass: -1.0,
            ..Default::default()
        };
        assert!(ControlAffineSystem::pendulum(bad, 0.0).is_err());
        assert!(ControlAffineSystem::linear(vec![vec![1.0]], vec![vec![1.0]], 1.0, -0.1).is_err());
        assert!(LinearSystem::new(vec![vec![1.0, 0.0]], vec![vec![1.0]]).is_err());
    }

    #[test]
    fn non_finite_drift_is_reported() {
        let sys = ControlAffineSystem::new(
            "blowup",
            Arc::new(FnSystem::new(1, 1, |x, o| o[0] = 1.0 / x[0], |_, o| o[0] = 1.0)),
            vec![-1.0],
            vec![1.0],
            0.0,
        )
        .unwrap();
        assert!(matches!(
            sys.drift_under_input(&[0.0], &[0.0]),
            Err(Error::NumericalDomain { .. })
        ));
    }
}
