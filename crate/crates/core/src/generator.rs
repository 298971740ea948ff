//! Kernel ridge regression of the controlled generator.
//!
//! For every input channel `pi in {0, e_1, .., e_m}` the target kernel matrix
//!
//! ```text
//! (K_pi)_ij = <f(x_i) + G(x_i) pi, grad_1 k(x_i, x_j)> + eps * lap_1 k(x_i, x_j)
//! ```
//!
//! is regressed against the Gram matrix with Tikhonov weight `N * gamma`, giving
//! the coefficient-space operators
//!
//! ```text
//! A = K_gamma^{-1} K_0,   B_j = K_gamma^{-1} (K_{e_j} - K_0),   K_gamma = K + N gamma I.
//! ```
//!
//! A function `h = sum_i c_i k(x_i, .)` is mapped by the estimated generator under
//! input `u` to the function with coefficients `(A + sum_j u_j B_j) c`.

use faer::linalg::solvers::{Llt, Solve};
use faer::{Col, Mat, Side};

use crate::dynamics::GeneratorDataset;
use crate::error::{check_dims, Error, Result};
use crate::kernels::{cross_kernel_into, gram_matrix, KernelSpec};
use crate::points::PointSet;

/// Target kernel matrix for one drift channel; derivatives in the first argument at `x_i`.
pub fn target_kernel_matrix(
    kernel: &KernelSpec,
    points: &PointSet,
    drift: &PointSet,
    epsilon: f64,
) -> Result<Mat<f64>> {
    if drift.len() != points.len() || drift.dim() != points.dim() {
        return Err(Error::arg("drift labels are not row-aligned with the samples"));
    }
    let n = points.len();
    let mut grad = vec![0.0; points.dim()];
    let mut out = Mat::<f64>::zeros(n, n);
    for j in 0..n {
        let xj = points.row(j);
        for i in 0..n {
            let (_, trace) = kernel.derivatives(points.row(i), xj, &mut grad);
            let v: f64 = drift.row(i).iter().zip(&grad).map(|(a, b)| a * b).sum::<f64>() + epsilon * trace;
            if !v.is_finite() {
                return Err(Error::NumericalDomain {
                    what: "target kernel entry".into(),
                    location: format!("(i, j) = ({i}, {j})"),
                });
            }
            out[(i, j)] = v;
        }
    }
    Ok(out)
}

/// Conditioning and accuracy figures recorded while fitting.
#[derive(Clone, Debug, PartialEq)]
pub struct FitReport {
    /// `|K_gamma A - K_0|_F / |K_0|_F`.
    pub residual_a: f64,
    /// Same measure for every `B_j` against `K_{e_j} - K_0`.
    pub residual_b: Vec<f64>,
}

pub struct GeneratorModel {
    pub points: PointSet,
    pub kernel: KernelSpec,
    pub gamma: f64,
    pub epsilon: f64,
    gram: Mat<f64>,
    factor: Llt<f64>,
    a_hat: Mat<f64>,
    b_hat: Vec<Mat<f64>>,
    q_coeff: Col<f64>,
    report: Option<FitReport>,
}

impl std::fmt::Debug for GeneratorModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("GeneratorModel")
            .field("n", &self.len())
            .field("n_x", &self.points.dim())
            .field("n_u", &self.n_u())
            .field("kernel", &self.kernel)
            .field("gamma", &self.gamma)
            .field("epsilon", &self.epsilon)
            .finish_non_exhaustive()
    }
}

fn regularized_factor(gram: &Mat<f64>, gamma: f64) -> Result<Llt<f64>> {
    let n = gram.nrows();
    let shift = n as f64 * gamma;
    let k_gamma = Mat::from_fn(n, n, |i, j| gram[(i, j)] + if i == j { shift } else { 0.0 });
    k_gamma
        .llt(Side::Lower)
        .map_err(|_| Error::Conditioning { n, gamma })
}

fn relative_residual(gram: &Mat<f64>, shift: f64, solution: &Mat<f64>, rhs: &Mat<f64>) -> f64 {
    let mut r = gram * solution;
    r += Mat::<f64>::from_fn(solution.nrows(), solution.ncols(), |i, j| shift * solution[(i, j)]);
    r -= rhs;
    let denom = rhs.norm_l2();
    if denom == 0.0 {
        r.norm_l2()
    } else {
        r.norm_l2() / denom
    }
}

/// Fits `A`, every `B_j` and the cost coefficients `K_gamma^{-1} q_X` from one
/// factorization of `K + N gamma I`.
pub fn fit(data: &GeneratorDataset, kernel: &KernelSpec, gamma: f64, epsilon: f64) -> Result<GeneratorModel> {
    data.validate()?;
    kernel.validate()?;
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(Error::arg(format!("regularizer gamma must be positive, got {gamma}")));
    }
    if !(epsilon >= 0.0 && epsilon.is_finite()) {
        return Err(Error::arg(format!("diffusion epsilon must be >= 0, got {epsilon}")));
    }
    let n = data.len();
    let shift = n as f64 * gamma;
    let gram = gram_matrix(kernel, &data.points)?;
    let factor = regularized_factor(&gram, gamma)?;

    let k0 = target_kernel_matrix(kernel, &data.points, &data.drift_labels[0], epsilon)?;
    let a_hat = factor.solve(&k0);
    let residual_a = relative_residual(&gram, shift, &a_hat, &k0);

    let mut b_hat = Vec::with_capacity(data.n_u());
    let mut residual_b = Vec::with_capacity(data.n_u());
    for channel in &data.drift_labels[1..] {
        let mut diff = target_kernel_matrix(kernel, &data.points, channel, epsilon)?;
        diff -= &k0;
        let b = factor.solve(&diff);
        residual_b.push(relative_residual(&gram, shift, &b, &diff));
        b_hat.push(b);
    }
    drop(k0);

    let q_x = Col::from_fn(n, |i| data.q_samples[i]);
    let q_coeff = factor.solve(&q_x);
    log::debug!("fit N={n}: residual A {residual_a:e}, residual B {residual_b:?}");

    Ok(GeneratorModel {
        points: data.points.clone(),
        kernel: *kernel,
        gamma,
        epsilon,
        gram,
        factor,
        a_hat,
        b_hat,
        q_coeff,
        report: Some(FitReport {
            residual_a,
            residual_b,
        }),
    })
}

impl GeneratorModel {
    /// Rebuilds a model from stored operators, refactorizing `K + N gamma I`.
    pub fn from_parts(
        points: PointSet,
        kernel: KernelSpec,
        gamma: f64,
        epsilon: f64,
        a_hat: Mat<f64>,
        b_hat: Vec<Mat<f64>>,
        q_coeff: Col<f64>,
    ) -> Result<Self> {
        kernel.validate()?;
        let n = points.len();
        let square = |m: &Mat<f64>| m.nrows() == n && m.ncols() == n;
        if !square(&a_hat) || b_hat.is_empty() || !b_hat.iter().all(square) || q_coeff.nrows() != n {
            return Err(Error::arg("stored operators do not match the number of samples"));
        }
        let gram = gram_matrix(&kernel, &points)?;
        let factor = regularized_factor(&gram, gamma)?;
        Ok(Self {
            points,
            kernel,
            gamma,
            epsilon,
            gram,
            factor,
            a_hat,
            b_hat,
            q_coeff,
            report: None,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn n_x(&self) -> usize {
        self.points.dim()
    }

    pub fn n_u(&self) -> usize {
        self.b_hat.len()
    }

    pub fn gram(&self) -> &Mat<f64> {
        &self.gram
    }

    pub fn factor(&self) -> &Llt<f64> {
        &self.factor
    }

    pub fn a_hat(&self) -> &Mat<f64> {
        &self.a_hat
    }

    pub fn b_hat(&self) -> &[Mat<f64>] {
        &self.b_hat
    }

    pub fn q_coeff(&self) -> &Col<f64> {
        &self.q_coeff
    }

    pub fn report(&self) -> Option<&FitReport> {
        self.report.as_ref()
    }

    /// `K_gamma^{-1} rhs`.
    pub fn solve_regularized(&self, rhs: &Col<f64>) -> Col<f64> {
        self.factor.solve(rhs)
    }

    pub(crate) fn solve_regularized_in_place(&self, rhs: &mut Col<f64>) {
        self.factor.solve_in_place(rhs.as_mat_mut());
    }

    /// `[k(x_i, x)]_i`.
    pub fn kernel_vector(&self, x: &[f64]) -> Result<Col<f64>> {
        check_dims("query state", self.n_x(), x.len())?;
        let mut out = Col::<f64>::zeros(self.len());
        cross_kernel_into(&self.kernel, &self.points, x, out.as_mut().try_as_col_major_mut().unwrap().as_slice_mut());
        Ok(out)
    }

    /// Coefficients of the generator under input `u` applied to the function with coefficients `h`.
    pub fn apply_coefficients(&self, u: &[f64], h: &Col<f64>) -> Result<Col<f64>> {
        check_dims("input", self.n_u(), u.len())?;
        check_dims("coefficient vector", self.len(), h.nrows())?;
        let mut out = &self.a_hat * h;
        for (b, &uj) in self.b_hat.iter().zip(u) {
            if uj != 0.0 {
                let bh = b * h;
                out += faer::Scale(uj) * &bh;
            }
        }
        Ok(out)
    }

    /// Estimated generator under input `u` applied to `sum_i h_i k(x_i, .)`, evaluated at `x`.
    pub fn generator_apply(&self, u: &[f64], h: &Col<f64>, x: &[f64]) -> Result<f64> {
        let coeff = self.apply_coefficients(u, h)?;
        let kx = self.kernel_vector(x)?;
        Ok(coeff.transpose() * &kx)
    }

    /// Smallest eigenvalue of `K + N gamma I` by inverse iteration on the stored factor.
    pub fn min_eigenvalue_estimate(&self, iterations: usize) -> f64 {
        let n = self.len();
        let mut v = Col::<f64>::from_fn(n, |i| 1.0 + (i % 7) as f64 * 0.1);
        let mut rayleigh = f64::NAN;
        for _ in 0..iterations.max(1) {
            let norm = v.norm_l2();
            v = faer::Scale(1.0 / norm) * &v;
            let w = self.factor.solve(&v);
            let vw: f64 = v.transpose() * &w;
            rayleigh = 1.0 / vw;
            v = w;
        }
        rayleigh
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{generate_dataset, ControlAffineSystem, GridAxis, LabelMode, StageCost, StateGridSpec};
    use approx::assert_abs_diff_eq;

    const E_INV: f64 = 0.367_879_441_171_442_33;

    fn scalar_data(lo: f64, hi: f64, n: usize) -> GeneratorDataset {
        let sys = ControlAffineSystem::linear(vec![vec![1.0]], vec![vec![1.0]], 5.0, 0.0).unwrap();
        let grid = StateGridSpec::new(vec![GridAxis::new(lo, hi, n)]);
        let q = StageCost::Quadratic { weights: vec![1.5] };
        generate_dataset(&sys, &grid, &q, LabelMode::Analytic, 0).unwrap()
    }

    fn pts(v: &[f64]) -> PointSet {
        PointSet::new(1, v.to_vec()).unwrap()
    }

    #[test]
    fn target_matrix_hand_examples() {
        let k = KernelSpec::squared_exponential(1.0).unwrap();
        let x = pts(&[0.0, 1.0]);
        let drift = pts(&[0.0, 1.0]);
        let m = target_kernel_matrix(&k, &x, &drift, 0.0).unwrap();
        assert_abs_diff_eq!(m[(0, 0)], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(m[(0, 1)], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(m[(1, 0)], -2.0 * E_INV, epsilon = 1e-12);
        assert_abs_diff_eq!(m[(1, 1)], 0.0, epsilon = 1e-12);

        let m = target_kernel_matrix(&k, &x, &drift, 0.1).unwrap();
        assert_abs_diff_eq!(m[(0, 0)], -0.2, epsilon = 1e-12);
        assert_abs_diff_eq!(m[(0, 1)], 0.2 * E_INV, epsilon = 1e-12);
        assert_abs_diff_eq!(m[(1, 0)], -2.0 * E_INV + 0.2 * E_INV, epsilon = 1e-12);
        assert_abs_diff_eq!(m[(1, 1)], -0.2, epsilon = 1e-12);

        let zero = target_kernel_matrix(&k, &x, &pts(&[0.0, 0.0]), 0.0).unwrap();
        assert_eq!(zero.norm_l2(), 0.0);
    }

    #[test]
    fn target_matrix_is_affine_in_epsilon() {
        let k = KernelSpec::smoothed_laplace(1.5, 100.0, 1e-8).unwrap();
        let data = scalar_data(-2.0, 2.0, 9);
        let m0 = target_kernel_matrix(&k, &data.points, &data.drift_labels[0], 0.0).unwrap();
        let zero = pts(&[0.0; 9]);
        let hess = target_kernel_matrix(&k, &data.points, &zero, 1.0).unwrap();
        let eps = 0.37;
        let me = target_kernel_matrix(&k, &data.points, &data.drift_labels[0], eps).unwrap();
        for i in 0..9 {
            for j in 0..9 {
                let expected = m0[(i, j)] + eps * hess[(i, j)];
                assert!((me[(i, j)] - expected).abs() <= 1e-15 * (1.0 + expected.abs()));
            }
        }
    }

    #[test]
    fn target_matrix_inherits_control_affinity() {
        let sys = ControlAffineSystem::linear(
            vec![vec![0.0, 1.0], vec![-1.0, 0.3]],
            vec![vec![1.0, 0.0], vec![0.5, 1.0]],
            5.0,
            0.0,
        )
        .unwrap();
        let grid = StateGridSpec::new(vec![GridAxis::new(-1.0, 1.0, 4); 2]);
        let q = StageCost::Quadratic { weights: vec![1.0, 1.0] };
        let data = generate_dataset(&sys, &grid, &q, LabelMode::Analytic, 0).unwrap();
        let k = KernelSpec::squared_exponential(1.2).unwrap();
        let eps = 0.05;
        let kt = |labels: &PointSet| target_kernel_matrix(&k, &data.points, labels, eps).unwrap();
        let k0 = kt(&data.drift_labels[0]);
        let k1 = kt(&data.drift_labels[1]);
        let k2 = kt(&data.drift_labels[2]);

        let c = [0.7, -1.3];
        let mut mixed = PointSet::with_capacity(2, data.len());
        for x in data.points.rows() {
            mixed.push(&sys.drift_under_input(x, &c).unwrap());
        }
        let km = kt(&mixed);
        for i in 0..data.len() {
            for j in 0..data.len() {
                let expected = k0[(i, j)] + c[0] * (k1[(i, j)] - k0[(i, j)]) + c[1] * (k2[(i, j)] - k0[(i, j)]);
                assert!((km[(i, j)] - expected).abs() <= 1e-14 * (1.0 + expected.abs()));
            }
        }
    }

    #[test]
    fn fit_single_point() {
        let data = GeneratorDataset {
            points: pts(&[0.0]),
            drift_labels: vec![pts(&[0.0]), pts(&[1.0])],
            q_samples: vec![5.0],
        };
        let k = KernelSpec::squared_exponential(1.0).unwrap();
        let m = fit(&data, &k, 1.0, 0.0).unwrap();
        assert_eq!(m.gram()[(0, 0)], 1.0);
        assert_eq!(m.a_hat()[(0, 0)], 0.0);
        assert_abs_diff_eq!(m.q_coeff()[0], 2.5, epsilon = 1e-15);
        // gradient of k at the diagonal vanishes, so B is zero too
        assert_eq!(m.b_hat()[0][(0, 0)], 0.0);
    }

    #[test]
    fn identical_channels_give_zero_b() {
        let mut data = scalar_data(-1.0, 1.0, 6);
        data.drift_labels[1] = data.drift_labels[0].clone();
        let m = fit(&data, &KernelSpec::squared_exponential(0.8).unwrap(), 1e-6, 0.1).unwrap();
        assert_eq!(m.b_hat()[0].norm_l2(), 0.0);
    }

    #[test]
    fn duplicate_points_fail_without_regularization() {
        let data = GeneratorDataset {
            points: pts(&[0.0, 0.0]),
            drift_labels: vec![pts(&[0.0, 0.0]), pts(&[1.0, 1.0])],
            q_samples: vec![1.0, 1.0],
        };
        let k = KernelSpec::squared_exponential(1.0).unwrap();
        // gamma must be positive; the smallest positive value cannot lift an exact rank deficiency
        assert!(matches!(fit(&data, &k, 0.0, 0.0), Err(Error::Argument(_))));
        assert!(matches!(fit(&data, &k, 1e-300, 0.0), Err(Error::Conditioning { .. })));
        assert!(fit(&data, &k, 1e-3, 0.0).is_ok());
    }

    #[test]
    fn a_shrinks_with_gamma() {
        let data = scalar_data(-1.0, 1.0, 8);
        let k = KernelSpec::squared_exponential(0.7).unwrap();
        let norms: Vec<f64> = [1e-4, 1e-2, 1.0, 100.0]
            .iter()
            .map(|&g| fit(&data, &k, g, 0.01).unwrap().a_hat().norm_l2())
            .collect();
        assert!(norms.windows(2).all(|w| w[1] < w[0]), "{norms:?}");
        assert!(norms[3] < 1e-2);
    }

    #[test]
    #[allow(clippy::needless_range_loop)]
    fn residuals_and_dense_inverse_oracle() {
        let data = scalar_data(-2.0, 2.0, 20);
        let k = KernelSpec::squared_exponential(1.0).unwrap();
        let gamma = 1e-6;
        let m = fit(&data, &k, gamma, 0.01).unwrap();
        let rep = m.report().unwrap();
        assert!(rep.residual_a <= 1e-8, "{rep:?}");
        assert!(rep.residual_b.iter().all(|&r| r <= 1e-8), "{rep:?}");

        // Gauss-Jordan inverse of K_gamma as an independent route.
        let n = data.len();
        let mut aug = vec![vec![0.0; 2 * n]; n];
        for i in 0..n {
            for j in 0..n {
                aug[i][j] = m.gram()[(i, j)] + if i == j { n as f64 * gamma } else { 0.0 };
            }
            aug[i][n + i] = 1.0;
        }
        for c in 0..n {
            let p = (c..n).max_by(|&a, &b| aug[a][c].abs().total_cmp(&aug[b][c].abs())).unwrap();
            aug.swap(c, p);
            let piv = aug[c][c];
            aug[c].iter_mut().for_each(|v| *v /= piv);
            for r in 0..n {
                if r != c {
                    let f = aug[r][c];
                    let row_c = aug[c].clone();
                    aug[r].iter_mut().zip(&row_c).for_each(|(v, w)| *v -= f * w);
                }
            }
        }
        let k0 = target_kernel_matrix(&k, &data.points, &data.drift_labels[0], 0.01).unwrap();
        let mut max_err: f64 = 0.0;
        let scale = m.a_hat().norm_max();
        for i in 0..n {
            for j in 0..n {
                let v: f64 = (0..n).map(|l| aug[i][n + l] * k0[(l, j)]).sum();
                max_err = max_err.max((v - m.a_hat()[(i, j)]).abs());
            }
        }
        assert!(max_err <= 1e-10 * scale.max(1.0), "max err {max_err:e}, scale {scale:e}");
    }

    #[test]
    fn apply_examples() {
        let data = scalar_data(-2.0, 2.0, 30);
        let k = KernelSpec::squared_exponential(0.8).unwrap();
        let m = fit(&data, &k, 1e-10, 0.0).unwrap();
        let zero = Col::<f64>::zeros(m.len());
        assert_eq!(m.generator_apply(&[0.0], &zero, &[0.3]).unwrap(), 0.0);
        assert!(m.generator_apply(&[0.0, 1.0], &zero, &[0.3]).is_err());
        assert!(m.generator_apply(&[0.0], &zero, &[0.3, 0.1]).is_err());

        // Channel e_1 minus channel 0 on k(x_i, .) acts as the directional derivative along G = 1.
        let i = 12;
        let h = Col::<f64>::from_fn(m.len(), |l| if l == i { 1.0 } else { 0.0 });
        let xi = data.points.row(i)[0];
        for &x in &[-1.0, -0.35, 0.2, 0.9] {
            let diff = m.generator_apply(&[1.0], &h, &[x]).unwrap() - m.generator_apply(&[0.0], &h, &[x]).unwrap();
            let exact = -2.0 * (x - xi) / (0.8 * 0.8) * (-(x - xi) * (x - xi) / 0.64f64).exp();
            assert!((diff - exact).abs() < 1e-4, "x = {x}: {diff} vs {exact}");
        }
    }

    #[test]
    fn min_eigenvalue_estimate_matches_dense() {
        let data = scalar_data(-1.0, 1.0, 12);
        let k = KernelSpec::squared_exponential(0.5).unwrap();
        let m = fit(&data, &k, 1e-4, 0.0).unwrap();
        let n = m.len();
        let kg = Mat::from_fn(n, n, |i, j| m.gram()[(i, j)] + if i == j { n as f64 * 1e-4 } else { 0.0 });
        let exact = kg.self_adjoint_eigenvalues(Side::Lower).unwrap()[0];
        let est = m.min_eigenvalue_estimate(200);
        assert!((est - exact).abs() <= 1e-6 * exact.max(1e-3), "{est} vs {exact}");
    }
}
