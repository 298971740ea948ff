//! Box-constrained, strongly convex control penalties and their duals.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A strongly convex penalty `r` on a control set `U`, characterised through
/// the minimiser of the Hamiltonian's control part.
pub trait Penalty: Send + Sync {
    fn input_dim(&self) -> usize;

    /// `r(u)`.
    fn cost(&self, u: &[f64]) -> f64;

    /// `argmin_{u in U} r(u) + <lambda, u>`.
    fn u_star(&self, lambda: &[f64]) -> Vec<f64>;

    /// `min_{u in U} r(u) + <lambda, u>`, concave in `lambda`.
    fn dual_value(&self, lambda: &[f64]) -> f64 {
        let u = self.u_star(lambda);
        self.cost(&u) + dot(lambda, &u)
    }

    /// Fenchel conjugate `r*(lambda) = sup_{u in U} <lambda, u> - r(u)`.
    fn conjugate(&self, lambda: &[f64]) -> f64 {
        let neg: Vec<f64> = lambda.iter().map(|l| -l).collect();
        -self.dual_value(&neg)
    }

    /// Projection onto `U`.
    fn clip(&self, u: &[f64]) -> Vec<f64>;
}

/// `r(u) = sum_j R_j u_j^2` on the box `[lower, upper]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlPenalty {
    pub weights: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl ControlPenalty {
    pub fn new(weights: Vec<f64>, lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        let p = Self {
            weights,
            lower,
            upper,
        };
        p.validate()?;
        Ok(p)
    }

    /// Same weight and symmetric bound on every channel.
    pub fn uniform(n_u: usize, weight: f64, bound: f64) -> Result<Self> {
        Self::new(vec![weight; n_u], vec![-bound; n_u], vec![bound; n_u])
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.weights.len();
        if n == 0 || self.lower.len() != n || self.upper.len() != n {
            return Err(Error::arg(format!(
                "penalty needs matching non-empty weights/lower/upper (got {}, {}, {})",
                n,
                self.lower.len(),
                self.upper.len()
            )));
        }
        if let Some(w) = self.weights.iter().find(|w| !(**w > 0.0 && w.is_finite())) {
            return Err(Error::arg(format!("penalty weights must be positive, got {w}")));
        }
        for (j, (lo, hi)) in self.lower.iter().zip(&self.upper).enumerate() {
            if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
                return Err(Error::arg(format!(
                    "control box channel {j} must satisfy lower < upper, got [{lo}, {hi}]"
                )));
            }
        }
        Ok(())
    }
}

impl Penalty for ControlPenalty {
    fn input_dim(&self) -> usize {
        self.weights.len()
    }

    fn cost(&self, u: &[f64]) -> f64 {
        self.weights.iter().zip(u).map(|(w, u)| w * u * u).sum()
    }

    fn u_star(&self, lambda: &[f64]) -> Vec<f64> {
        lambda
            .iter()
            .zip(&self.weights)
            .zip(self.lower.iter().zip(&self.upper))
            .map(|((l, w), (lo, hi))| (-l / (2.0 * w)).clamp(*lo, *hi))
            .collect()
    }

    fn clip(&self, u: &[f64]) -> Vec<f64> {
        u.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .map(|(u, (lo, hi))| u.clamp(*lo, *hi))
            .collect()
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn half() -> ControlPenalty {
        ControlPenalty::uniform(1, 0.5, 1.0).unwrap()
    }

    #[test]
    fn u_star_examples() {
        assert_eq!(half().u_star(&[0.0]), vec![0.0]);
        assert_eq!(half().u_star(&[0.5]), vec![-0.5]);
        assert_eq!(half().u_star(&[3.0]), vec![-1.0]);
    }

    #[test]
    fn dual_examples() {
        assert_eq!(half().dual_value(&[0.0]), 0.0);
        assert_abs_diff_eq!(half().dual_value(&[0.5]), -0.125, epsilon = 1e-15);
        assert_abs_diff_eq!(half().dual_value(&[3.0]), -2.5, epsilon = 1e-15);
    }

    #[test]
    fn conjugate_examples() {
        assert_eq!(half().conjugate(&[0.0]), 0.0);
        assert_abs_diff_eq!(half().conjugate(&[0.5]), 0.125, epsilon = 1e-15);
        assert_abs_diff_eq!(half().conjugate(&[3.0]), 2.5, epsilon = 1e-15);
    }

    #[test]
    fn box_excluding_zero() {
        let p = ControlPenalty::new(vec![1.0], vec![0.5], vec![2.0]).unwrap();
        assert_eq!(p.u_star(&[0.0]), vec![0.5]);
        assert_abs_diff_eq!(p.dual_value(&[0.0]), 0.25, epsilon = 1e-15);
    }

    #[test]
    fn invalid_penalties() {
        assert!(ControlPenalty::new(vec![0.0], vec![-1.0], vec![1.0]).is_err());
        assert!(ControlPenalty::new(vec![1.0], vec![1.0], vec![1.0]).is_err());
        assert!(ControlPenalty::new(vec![1.0, 1.0], vec![-1.0], vec![1.0]).is_err());
        assert!(ControlPenalty::new(vec![], vec![], vec![]).is_err());
    }

    fn random_penalty(rng: &mut ChaCha8Rng) -> ControlPenalty {
        let n = rng.random_range(1..4);
        let weights = (0..n).map(|_| rng.random_range(0.1..3.0)).collect();
        let lower: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..0.5)).collect();
        let upper = lower.iter().map(|l| l + rng.random_range(0.1..4.0)).collect();
        ControlPenalty::new(weights, lower, upper).unwrap()
    }

    #[test]
    fn argmin_property() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let p = random_penalty(&mut rng);
            let n = p.input_dim();
            let lambda: Vec<f64> = (0..n).map(|_| rng.random_range(-10.0..10.0)).collect();
            let u: Vec<f64> = (0..n)
                .map(|j| rng.random_range(p.lower[j]..=p.upper[j]))
                .collect();
            let best = p.dual_value(&lambda);
            assert!(best <= p.cost(&u) + dot(&lambda, &u) + 1e-12);
        }
    }

    #[test]
    fn u_star_is_negative_conjugate_gradient() {
        let p = ControlPenalty::new(vec![0.5, 2.0], vec![-1.0, -3.0], vec![1.0, 3.0]).unwrap();
        let h = 1e-6;
        for lambda in [[0.3, -1.0], [-0.2, 4.0], [0.0, 0.0]] {
            let u = p.u_star(&lambda);
            for j in 0..2 {
                let mut lp = lambda;
                let mut lm = lambda;
                lp[j] += h;
                lm[j] -= h;
                let grad = (p.conjugate(&lp) - p.conjugate(&lm)) / (2.0 * h);
                assert!((u[j] + grad).abs() <= 1e-6, "lambda {lambda:?} ch {j}");
            }
        }
    }

    #[test]
    fn dual_is_concave() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let p = random_penalty(&mut rng);
            let n = p.input_dim();
            let a: Vec<f64> = (0..n).map(|_| rng.random_range(-10.0..10.0)).collect();
            let b: Vec<f64> = (0..n).map(|_| rng.random_range(-10.0..10.0)).collect();
            let mid: Vec<f64> = a.iter().zip(&b).map(|(x, y)| 0.5 * (x + y)).collect();
            assert!(p.dual_value(&mid) >= 0.5 * (p.dual_value(&a) + p.dual_value(&b)) - 1e-12);
        }
    }

    #[test]
    fn dual_matches_grid_search() {
        let p = ControlPenalty::new(vec![0.7], vec![-1.3], vec![2.1]).unwrap();
        let m = 10_000;
        let step = (p.upper[0] - p.lower[0]) / (m - 1) as f64;
        for lambda in [-6.0, -1.0, 0.0, 0.4, 2.5, 9.0] {
            let brute = (0..m)
                .map(|i| {
                    let u = p.lower[0] + step * i as f64;
                    p.cost(&[u]) + lambda * u
                })
                .fold(f64::INFINITY, f64::min);
            let exact = p.dual_value(&[lambda]);
            // Grid minimum overshoots by at most the Lipschitz constant times half a step.
            let lip = 2.0 * p.weights[0] * 2.1 + f64::abs(lambda);
            assert!(exact <= brute + 1e-12);
            assert!(brute - exact <= lip * step / 2.0, "lambda {lambda}");
        }
    }
}
