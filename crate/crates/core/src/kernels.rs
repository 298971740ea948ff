//! Radial kernels with analytic derivatives in the first argument.
//!
//! Two families are provided:
//!
//! * squared exponential, `k(x, y) = exp(-|x - y|^2 / sigma^2)`
//! * smoothed Laplace, `k(x, y) = exp(-|x - y| / sigma)`, whose first and second
//!   derivatives inside a small radius around the diagonal are replaced by those
//!   of a squared-exponential surrogate with lengthscale `sigma / smoothing_ratio`.
//!
//! Derivatives are always taken with respect to the first argument, so
//! `grad_x1(k, x, y)` is `d/dx k(x, y)` and `hess_trace_x1` is the Laplacian of
//! `x -> k(x, y)`.

use faer::{Col, Mat};
use serde::{Deserialize, Serialize};

use crate::error::{check_dims, Error, Result};
use crate::points::PointSet;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KernelFamily {
    SquaredExponential,
    SmoothedLaplace,
}

pub const DEFAULT_SMOOTHING_RATIO: f64 = 100.0;
pub const DEFAULT_SMOOTHING_RADIUS: f64 = 1e-8;

fn default_ratio() -> f64 {
    DEFAULT_SMOOTHING_RATIO
}

fn default_radius() -> f64 {
    DEFAULT_SMOOTHING_RADIUS
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelSpec {
    pub family: KernelFamily,
    pub sigma: f64,
    /// Only used by the smoothed Laplace family.
    #[serde(default = "default_ratio")]
    pub smoothing_ratio: f64,
    /// Only used by the smoothed Laplace family.
    #[serde(default = "default_radius")]
    pub smoothing_radius: f64,
}

impl KernelSpec {
    pub fn squared_exponential(sigma: f64) -> Result<Self> {
        let spec = Self {
            family: KernelFamily::SquaredExponential,
            sigma,
            smoothing_ratio: DEFAULT_SMOOTHING_RATIO,
            smoothing_radius: DEFAULT_SMOOTHING_RADIUS,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn smoothed_laplace(sigma: f64, smoothing_ratio: f64, smoothing_radius: f64) -> Result<Self> {
        let spec = Self {
            family: KernelFamily::SmoothedLaplace,
            sigma,
            smoothing_ratio,
            smoothing_radius,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::arg(format!("kernel sigma must be positive, got {}", self.sigma)));
        }
        if !(self.smoothing_ratio > 0.0 && self.smoothing_ratio.is_finite()) {
            return Err(Error::arg(format!(
                "smoothing ratio must be positive, got {}",
                self.smoothing_ratio
            )));
        }
        if !(self.smoothing_radius >= 0.0 && self.smoothing_radius.is_finite()) {
            return Err(Error::arg(format!(
                "smoothing radius must be non-negative, got {}",
                self.smoothing_radius
            )));
        }
        Ok(())
    }

    pub fn with_sigma(mut self, sigma: f64) -> Self {
        self.sigma = sigma;
        self
    }

    pub fn eval(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        check_dims("kernel arguments", x.len(), y.len())?;
        Ok(self.value(x, y))
    }

    pub fn grad_x1(&self, x: &[f64], y: &[f64]) -> Result<Vec<f64>> {
        check_dims("kernel arguments", x.len(), y.len())?;
        let mut grad = vec![0.0; x.len()];
        self.derivatives(x, y, &mut grad);
        Ok(grad)
    }

    pub fn hess_trace_x1(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        check_dims("kernel arguments", x.len(), y.len())?;
        let mut grad = vec![0.0; x.len()];
        Ok(self.derivatives(x, y, &mut grad).1)
    }

    /// Kernel value without dimension checks.
    #[inline]
    pub(crate) fn value(&self, x: &[f64], y: &[f64]) -> f64 {
        let r2 = sq_dist(x, y);
        match self.family {
            KernelFamily::SquaredExponential => (-r2 / (self.sigma * self.sigma)).exp(),
            KernelFamily::SmoothedLaplace => (-r2.sqrt() / self.sigma).exp(),
        }
    }

    /// Writes the first-argument gradient into `grad` and returns
    /// `(value, laplacian)`. No dimension checks.
    #[inline]
    pub(crate) fn derivatives(&self, x: &[f64], y: &[f64], grad: &mut [f64]) -> (f64, f64) {
        let n = x.len() as f64;
        let r2 = sq_dist(x, y);
        match self.family {
            KernelFamily::SquaredExponential => se_derivatives(self.sigma, n, x, y, r2, grad),
            KernelFamily::SmoothedLaplace => {
                let r = r2.sqrt();
                if r <= self.smoothing_radius {
                    let (_, trace) =
                        se_derivatives(self.sigma / self.smoothing_ratio, n, x, y, r2, grad);
                    ((-r / self.sigma).exp(), trace)
                } else {
                    let k = (-r / self.sigma).exp();
                    let scale = -k / (self.sigma * r);
                    for ((g, a), b) in grad.iter_mut().zip(x).zip(y) {
                        *g = scale * (a - b);
                    }
                    let trace = k * (1.0 / (self.sigma * self.sigma) - (n - 1.0) / (self.sigma * r));
                    (k, trace)
                }
            }
        }
    }
}

#[inline]
fn se_derivatives(sigma: f64, n: f64, x: &[f64], y: &[f64], r2: f64, grad: &mut [f64]) -> (f64, f64) {
    let s2 = sigma * sigma;
    let k = (-r2 / s2).exp();
    let scale = -2.0 * k / s2;
    for ((g, a), b) in grad.iter_mut().zip(x).zip(y) {
        *g = scale * (a - b);
    }
    let trace = k * (4.0 * r2 / (s2 * s2) - 2.0 * n / s2);
    (k, trace)
}

#[inline]
pub(crate) fn sq_dist(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// `K[i][j] = k(x_i, x_j)`.
pub fn gram_matrix(kernel: &KernelSpec, points: &PointSet) -> Result<Mat<f64>> {
    if points.is_empty() {
        return Err(Error::arg("Gram matrix of an empty point set"));
    }
    let n = points.len();
    let mut gram = Mat::<f64>::zeros(n, n);
    for j in 0..n {
        let xj = points.row(j);
        gram[(j, j)] = kernel.value(xj, xj);
        for i in j + 1..n {
            let v = kernel.value(points.row(i), xj);
            gram[(i, j)] = v;
            gram[(j, i)] = v;
        }
    }
    Ok(gram)
}

/// `[k(x_i, x)]_i` for every sample `x_i`.
pub fn cross_kernel_vector(kernel: &KernelSpec, points: &PointSet, x: &[f64]) -> Result<Col<f64>> {
    check_dims("cross-kernel query", points.dim(), x.len())?;
    Ok(Col::from_fn(points.len(), |i| kernel.value(points.row(i), x)))
}

/// Allocation-free variant of [`cross_kernel_vector`] for hot loops.
pub(crate) fn cross_kernel_into(kernel: &KernelSpec, points: &PointSet, x: &[f64], out: &mut [f64]) {
    for (o, row) in out.iter_mut().zip(points.rows()) {
        *o = kernel.value(row, x);
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FdReport {
    /// Max over components of `|analytic - fd| / max(|analytic|, 1)`.
    pub grad_rel_error: f64,
    /// Same measure for the Laplacian.
    pub trace_rel_error: f64,
}

impl FdReport {
    pub fn max(&self) -> f64 {
        self.grad_rel_error.max(self.trace_rel_error)
    }
}

/// Compares analytic derivatives against central differences of step `h`.
///
/// The gradient is differenced from kernel values; the Laplacian is the
/// central-difference divergence of the analytic gradient, which keeps the
/// round-off at `O(eps / h)` instead of `O(eps / h^2)`.
pub fn fd_check_derivatives(kernel: &KernelSpec, x: &[f64], y: &[f64], h: f64) -> FdReport {
    let n = x.len();
    let mut grad = vec![0.0; n];
    let (_, trace) = kernel.derivatives(x, y, &mut grad);

    let mut shifted = x.to_vec();
    let mut g_plus = vec![0.0; n];
    let mut g_minus = vec![0.0; n];
    let mut grad_err = 0.0_f64;
    let mut fd_trace = 0.0;
    for i in 0..n {
        shifted[i] = x[i] + h;
        let k_plus = kernel.value(&shifted, y);
        kernel.derivatives(&shifted, y, &mut g_plus);
        shifted[i] = x[i] - h;
        let k_minus = kernel.value(&shifted, y);
        kernel.derivatives(&shifted, y, &mut g_minus);
        shifted[i] = x[i];

        let fd = (k_plus - k_minus) / (2.0 * h);
        grad_err = grad_err.max((grad[i] - fd).abs() / grad[i].abs().max(1.0));
        fd_trace += (g_plus[i] - g_minus[i]) / (2.0 * h);
    }
    FdReport {
        grad_rel_error: grad_err,
        trace_rel_error: (trace - fd_trace).abs() / trace.abs().max(1.0),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use faer::Side;
    use proptest::prelude::*;

    const E_INV: f64 = 0.367_879_441_171_442_33;

    fn se(sigma: f64) -> KernelSpec {
        KernelSpec::squared_exponential(sigma).unwrap()
    }

    fn laplace(sigma: f64) -> KernelSpec {
        KernelSpec::smoothed_laplace(sigma, 100.0, 1e-8).unwrap()
    }

    #[test]
    fn eval_examples() {
        assert_eq!(se(2.0).eval(&[0.0, 0.0], &[0.0, 0.0]).unwrap(), 1.0);
        assert_abs_diff_eq!(se(2.0).eval(&[0.0, 0.0], &[2.0, 0.0]).unwrap(), E_INV, epsilon = 1e-15);
        assert_abs_diff_eq!(laplace(1.0).eval(&[0.0], &[1.0]).unwrap(), E_INV, epsilon = 1e-15);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let k = se(1.0);
        assert!(matches!(k.eval(&[0.0], &[0.0, 1.0]), Err(Error::Argument(_))));
        assert!(k.grad_x1(&[0.0], &[0.0, 1.0]).is_err());
        assert!(k.hess_trace_x1(&[0.0, 1.0], &[0.0]).is_err());
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(KernelSpec::squared_exponential(0.0).is_err());
        assert!(KernelSpec::squared_exponential(-1.0).is_err());
        assert!(KernelSpec::smoothed_laplace(1.0, 0.0, 1e-8).is_err());
        assert!(KernelSpec::smoothed_laplace(1.0, 100.0, -1.0).is_err());
    }

    #[test]
    fn gradient_examples() {
        assert_eq!(se(0.7).grad_x1(&[0.3, -1.0], &[0.3, -1.0]).unwrap(), vec![0.0, 0.0]);
        let g = se(2.0).grad_x1(&[0.0, 0.0], &[2.0, 0.0]).unwrap();
        assert_abs_diff_eq!(g[0], E_INV, epsilon = 1e-15);
        assert_eq!(g[1], 0.0);
        let g = laplace(1.0).grad_x1(&[0.5, 0.5], &[0.5, 0.5]).unwrap();
        assert_eq!(g, vec![0.0, 0.0]);
    }

    #[test]
    fn hessian_trace_examples() {
        let t = se(2.0).hess_trace_x1(&[0.0, 0.0], &[2.0, 0.0]).unwrap();
        assert_abs_diff_eq!(t, 0.0, epsilon = 1e-15);
        assert_eq!(se(1.0).hess_trace_x1(&[0.4], &[0.4]).unwrap(), -2.0);
        let t = laplace(1.0).hess_trace_x1(&[1.0, 2.0], &[1.0, 2.0]).unwrap();
        assert_abs_diff_eq!(t, -40000.0, epsilon = 1e-8);
    }

    #[test]
    fn laplace_far_field_formulas() {
        // n = 2, |d| = 2: grad = -(d/|d|) e^{-2}, trace = e^{-2}(1 - 1/2).
        let k = laplace(1.0);
        let g = k.grad_x1(&[2.0, 0.0], &[0.0, 0.0]).unwrap();
        assert_abs_diff_eq!(g[0], -(-2.0f64).exp(), epsilon = 1e-15);
        assert_abs_diff_eq!(g[1], 0.0, epsilon = 1e-15);
        let t = k.hess_trace_x1(&[2.0, 0.0], &[0.0, 0.0]).unwrap();
        assert_abs_diff_eq!(t, 0.5 * (-2.0f64).exp(), epsilon = 1e-15);
    }

    #[test]
    fn gram_examples() {
        let k = se(1.0);
        let pts = PointSet::from_rows(&[[0.0], [1.0]]).unwrap();
        let g = gram_matrix(&k, &pts).unwrap();
        assert_eq!(g[(0, 0)], 1.0);
        assert_eq!(g[(1, 1)], 1.0);
        assert_abs_diff_eq!(g[(0, 1)], E_INV, epsilon = 1e-15);
        assert_eq!(g[(0, 1)], g[(1, 0)]);

        let single = PointSet::from_rows(&[[3.0, 1.0]]).unwrap();
        let g = gram_matrix(&laplace(2.0), &single).unwrap();
        assert_eq!((g.nrows(), g[(0, 0)]), (1, 1.0));

        let dup = PointSet::from_rows(&[[0.0], [0.0]]).unwrap();
        let g = gram_matrix(&k, &dup).unwrap();
        assert!(g.col_iter().all(|c| c.iter().all(|&v| v == 1.0)));
    }

    #[test]
    fn empty_gram_is_rejected() {
        let empty = PointSet::new(2, vec![]).unwrap();
        assert!(gram_matrix(&se(1.0), &empty).is_err());
    }

    #[test]
    fn cross_kernel_examples() {
        let k = se(1.0);
        let pts = PointSet::from_rows(&[[0.0], [1.0]]).unwrap();
        let v = cross_kernel_vector(&k, &pts, &[1.0]).unwrap();
        assert_abs_diff_eq!(v[1], 1.0);
        let v = cross_kernel_vector(&k, &pts, &[0.5]).unwrap();
        assert_abs_diff_eq!(v[0], (-0.25f64).exp(), epsilon = 1e-15);
        assert_abs_diff_eq!(v[1], (-0.25f64).exp(), epsilon = 1e-15);
        let one = PointSet::from_rows(&[[0.0]]).unwrap();
        let v = cross_kernel_vector(&k, &one, &[2.0]).unwrap();
        assert_abs_diff_eq!(v[0], (-4.0f64).exp(), epsilon = 1e-17);
        assert!(cross_kernel_vector(&k, &pts, &[0.0, 1.0]).is_err());
    }

    #[test]
    fn fd_examples() {
        let r = fd_check_derivatives(&se(2.0), &[0.3, -0.7], &[1.1, 0.4], 1e-5);
        assert!(r.max() <= 1e-6, "{r:?}");
        let r = fd_check_derivatives(&laplace(1.0), &[0.6, 0.8], &[0.0, 0.0], 1e-6);
        assert!(r.max() <= 1e-5, "{r:?}");
        let r = fd_check_derivatives(&se(1.3), &[0.2, 0.2], &[0.2, 0.2], 1e-5);
        assert!(r.grad_rel_error <= 1e-8, "{r:?}");
    }

    #[test]
    fn outputs_finite_across_smoothing_radius() {
        let k = KernelSpec::smoothed_laplace(1.0, 100.0, 1e-3).unwrap();
        for r in [0.0, 1e-12, 5e-4, 1e-3, 1.0000001e-3, 0.1] {
            let g = k.grad_x1(&[r, 0.0, 0.0], &[0.0; 3]).unwrap();
            let t = k.hess_trace_x1(&[r, 0.0, 0.0], &[0.0; 3]).unwrap();
            assert!(g.iter().all(|v| v.is_finite()) && t.is_finite());
        }
    }

    fn point(dim: usize) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(-3.0f64..3.0, dim)
    }

    fn kernel_strategy() -> impl Strategy<Value = KernelSpec> {
        (0.3f64..5.0, any::<bool>()).prop_map(|(s, lap)| if lap { laplace(s) } else { se(s) })
    }

    proptest! {
        #[test]
        fn symmetric(k in kernel_strategy(), (x, y) in (1usize..5).prop_flat_map(|d| (point(d), point(d)))) {
            prop_assert_eq!(k.eval(&x, &y).unwrap(), k.eval(&y, &x).unwrap());
        }

        #[test]
        fn gradient_antisymmetric(k in kernel_strategy(), (x, y) in (1usize..5).prop_flat_map(|d| (point(d), point(d)))) {
            prop_assume!(sq_dist(&x, &y).sqrt() > 1e-6);
            let gxy = k.grad_x1(&x, &y).unwrap();
            let gyx = k.grad_x1(&y, &x).unwrap();
            for (a, b) in gxy.iter().zip(&gyx) {
                prop_assert!((a + b).abs() <= 1e-14);
            }
        }

        #[test]
        fn analytic_matches_fd(k in kernel_strategy(), (x, y) in (1usize..5).prop_flat_map(|d| (point(d), point(d)))) {
            prop_assume!(sq_dist(&x, &y).sqrt() > 0.05);
            let r = fd_check_derivatives(&k, &x, &y, 1e-5);
            prop_assert!(r.max() <= 1e-5, "{:?}", r);
        }

        #[test]
        fn gram_is_psd(k in kernel_strategy(), raw in proptest::collection::vec(point(2), 2..25)) {
            let pts = PointSet::from_rows(&raw).unwrap();
            let g = gram_matrix(&k, &pts).unwrap();
            let eig = g.self_adjoint_eigenvalues(Side::Lower).unwrap();
            prop_assert!(eig[0] >= -1e-10 * pts.len() as f64, "min eig {}", eig[0]);
        }
    }
}
