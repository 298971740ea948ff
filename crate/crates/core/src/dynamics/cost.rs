use std::fmt;
use std::sync::Arc;

/// User-supplied running cost.
pub type CostFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// State-dependent running cost `q(x)`.
#[derive(Clone)]
pub enum StageCost {
    /// `sum_i w_i x_i^2`.
    Quadratic { weights: Vec<f64> },
    /// On `(cos, sin, omega)`: `q1 sin^2 + q2 (cos - 1)^2 + q_v omega^2`.
    Pendulum { q1: f64, q2: f64, q_v: f64 },
    /// On `(x, v, cos, sin, omega)`: tip distance to the upright goal plus velocity terms,
    /// `q_h (x - l sin)^2 + q_v (cos - 1)^2 + q_vel v^2 + q_omega omega^2`.
    Cartpole {
        q_h: f64,
        q_v: f64,
        q_vel: f64,
        q_omega: f64,
        length: f64,
    },
    Custom(CostFn),
}

impl fmt::Debug for StageCost {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Quadratic { weights } => f.debug_struct("Quadratic").field("weights", weights).finish(),
            Self::Pendulum { q1, q2, q_v } => f
                .debug_struct("Pendulum")
                .field("q1", q1)
                .field("q2", q2)
                .field("q_v", q_v)
                .finish(),
            Self::Cartpole {
                q_h,
                q_v,
                q_vel,
                q_omega,
                length,
            } => f
                .debug_struct("Cartpole")
                .field("q_h", q_h)
                .field("q_v", q_v)
                .field("q_vel", q_vel)
                .field("q_omega", q_omega)
                .field("length", length)
                .finish(),
            Self::Custom(_) => f.write_str("Custom(..)"),
        }
    }
}

impl StageCost {
    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            Self::Quadratic { weights } => weights.iter().zip(x).map(|(w, x)| w * x * x).sum(),
            Self::Pendulum { q1, q2, q_v } => {
                let (c, s, w) = (x[0], x[1], x[2]);
                q1 * s * s + q2 * (c - 1.0) * (c - 1.0) + q_v * w * w
            }
            Self::Cartpole {
                q_h,
                q_v,
                q_vel,
                q_omega,
                length,
            } => {
                let (p, v, c, s, w) = (x[0], x[1], x[2], x[3], x[4]);
                let dx = p - length * s;
                q_h * dx * dx + q_v * (c - 1.0) * (c - 1.0) + q_vel * v * v + q_omega * w * w
            }
            Self::Custom(f) => f(x),
        }
    }

    /// Standard weights for the pendulum swing-up task.
    pub fn pendulum_default() -> Self {
        Self::Pendulum {
            q1: 30.0,
            q2: 30.0,
            q_v: 1.0,
        }
    }

    pub fn cartpole_default(length: f64) -> Self {
        Self::Cartpole {
            q_h: 10.0,
            q_v: 100.0 * length * length,
            q_vel: 1.0,
            q_omega: 1.0,
            length,
        }
    }
}
