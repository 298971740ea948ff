//! Continuous-time LQR reference controller for the linear oracle systems.
//!
//! Solves `A'P + PA - P B R^{-1} B' P + Q = 0` for the cost
//! `integral x'Qx + u'Ru dt`, whose optimal feedback is `u = -R^{-1} B' P x`.
//! A coarse integration of the Riccati differential equation supplies a
//! stabilizing starting gain, which Newton-Kleinman iterations then polish.

use faer::linalg::solvers::Solve;
use faer::Mat;

use crate::error::{Error, Result};

const ODE_STEP: f64 = 1e-3;
const ODE_MAX_TIME: f64 = 200.0;
const ODE_TOL: f64 = 1e-4;
const NEWTON_TOL: f64 = 1e-13;
const NEWTON_MAX_ITER: usize = 50;

#[derive(Clone, Debug)]
pub struct LqrSolution {
    pub p: Mat<f64>,
    /// `K = R^{-1} B' P`, so `u = -K x`.
    pub gain: Mat<f64>,
    pub residual: f64,
}

impl LqrSolution {
    pub fn feedback(&self, x: &[f64]) -> Vec<f64> {
        (0..self.gain.nrows())
            .map(|i| -(0..x.len()).map(|j| self.gain[(i, j)] * x[j]).sum::<f64>())
            .collect()
    }
}

fn from_rows(rows: &[Vec<f64>], what: &str) -> Result<Mat<f64>> {
    let n = rows.len();
    let m = rows.first().map_or(0, Vec::len);
    if n == 0 || m == 0 || rows.iter().any(|r| r.len() != m) {
        return Err(Error::arg(format!("{what} must be a non-empty rectangular matrix")));
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::arg(format!("{what} has non-finite entries")));
    }
    Ok(Mat::from_fn(n, m, |i, j| rows[i][j]))
}

fn max_abs(m: &Mat<f64>) -> f64 {
    let mut out = 0.0_f64;
    for j in 0..m.ncols() {
        for i in 0..m.nrows() {
            out = out.max(m[(i, j)].abs());
        }
    }
    out
}

fn symmetrize(m: &Mat<f64>) -> Mat<f64> {
    Mat::from_fn(m.nrows(), m.ncols(), |i, j| 0.5 * (m[(i, j)] + m[(j, i)]))
}

struct Care {
    a: Mat<f64>,
    b: Mat<f64>,
    q: Mat<f64>,
    r: Mat<f64>,
    /// `B R^{-1} B'`
    s: Mat<f64>,
}

impl Care {
    fn residual(&self, p: &Mat<f64>) -> Mat<f64> {
        self.a.transpose() * p + p * &self.a - p * &self.s * p + &self.q
    }

    fn gain(&self, p: &Mat<f64>) -> Mat<f64> {
        let bt_p = self.b.transpose() * p;
        self.r.partial_piv_lu().solve(&bt_p)
    }

    /// Solves `F'X + XF + C = 0` through the Kronecker form.
    fn lyapunov(f: &Mat<f64>, c: &Mat<f64>) -> Result<Mat<f64>> {
        let n = f.nrows();
        let big = Mat::<f64>::from_fn(n * n, n * n, |row, col| {
            // vec index k = i + n j for entry (i, j)
            let (i, j) = (row % n, row / n);
            let (k, l) = (col % n, col / n);
            let mut v = 0.0;
            if l == j {
                v += f[(k, i)];
            }
            if k == i {
                v += f[(l, j)];
            }
            v
        });
        let rhs = Mat::<f64>::from_fn(n * n, 1, |row, _| -c[(row % n, row / n)]);
        let lu = big.partial_piv_lu();
        let x = lu.solve(&rhs);
        if x.col(0).iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericalDomain {
                what: "Lyapunov solution".into(),
                location: "Newton-Kleinman step".into(),
            });
        }
        Ok(symmetrize(&Mat::from_fn(n, n, |i, j| x[(i + n * j, 0)])))
    }
}

/// Stabilizing solution of the continuous-time algebraic Riccati equation.
pub fn solve_care(a: &[Vec<f64>], b: &[Vec<f64>], q: &[Vec<f64>], r: &[Vec<f64>]) -> Result<LqrSolution> {
    let a = from_rows(a, "A")?;
    let b = from_rows(b, "B")?;
    let q = from_rows(q, "Q")?;
    let r = from_rows(r, "R")?;
    let n = a.nrows();
    let m = b.ncols();
    if a.ncols() != n || b.nrows() != n || q.nrows() != n || q.ncols() != n || r.nrows() != m || r.ncols() != m {
        return Err(Error::arg("inconsistent LQR matrix shapes"));
    }
    let r_llt = r
        .llt(faer::Side::Lower)
        .map_err(|_| Error::arg("R must be symmetric positive definite"))?;
    let s = &b * r_llt.solve(b.transpose());
    let care = Care { a, b, q, r, s };

    // Riccati ODE dP/dtau = residual(P) from P = 0 (backward time), RK4.
    let mut p = Mat::<f64>::zeros(n, n);
    let steps = (ODE_MAX_TIME / ODE_STEP) as usize;
    for _ in 0..steps {
        let k1 = care.residual(&p);
        if max_abs(&k1) <= ODE_TOL * max_abs(&p).max(1.0) {
            break;
        }
        let k2 = care.residual(&(&p + &k1 * (0.5 * ODE_STEP)));
        let k3 = care.residual(&(&p + &k2 * (0.5 * ODE_STEP)));
        let k4 = care.residual(&(&p + &k3 * ODE_STEP));
        p = symmetrize(&(&p + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (ODE_STEP / 6.0)));
        if !max_abs(&p).is_finite() {
            return Err(Error::NumericalDomain {
                what: "Riccati ODE iterate".into(),
                location: "initial-gain integration".into(),
            });
        }
    }

    for _ in 0..NEWTON_MAX_ITER {
        let k = care.gain(&p);
        let closed = &care.a - &care.b * &k;
        let c = &care.q + k.transpose() * &care.r * &k;
        let next = Care::lyapunov(&closed, &c)?;
        let change = max_abs(&(&next - &p));
        p = next;
        if change <= NEWTON_TOL * max_abs(&p).max(1.0) {
            break;
        }
    }
    let residual = max_abs(&care.residual(&p));
    if !(residual <= 1e-8 * max_abs(&p).max(1.0)) {
        return Err(Error::Divergence {
            step: NEWTON_MAX_ITER,
            reason: format!("Riccati residual {residual:e} after Newton-Kleinman"),
        });
    }
    let gain = care.gain(&p);
    Ok(LqrSolution { p, gain, residual })
}
