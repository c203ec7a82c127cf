//! Dense Levenberg–Marquardt for the small problems in this crate
//! (per-pixel lineshapes, transect fits).

use nalgebra::{DMatrix, DVector};

/// A nonlinear least-squares problem `min Σ r_i(p)²`.
pub trait LeastSquares {
    fn n_params(&self) -> usize;
    fn n_residuals(&self) -> usize;
    /// Residuals `model − data` (weighted) at `p`.
    fn residuals(&self, p: &[f64], r: &mut [f64]);
    /// Jacobian `∂r_i/∂p_j`, row-major by residual.
    fn jacobian(&self, p: &[f64], jac: &mut DMatrix<f64>);
}

#[derive(Debug, Clone, Copy)]
pub struct LmConfig {
    pub max_iterations: usize,
    /// Relative cost-reduction threshold for convergence.
    pub ftol: f64,
    /// Relative step-size threshold for convergence.
    pub xtol: f64,
    pub initial_lambda: f64,
    pub lambda_up: f64,
    pub lambda_down: f64,
    /// Scaled normal-matrix condition number above which the solution is
    /// reported as not converged.
    pub max_condition: f64,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            max_iterations: 200,
            ftol: 1e-14,
            xtol: 1e-11,
            initial_lambda: 1e-3,
            lambda_up: 10.0,
            lambda_down: 0.1,
            max_condition: 1e13,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    SmallCostChange,
    SmallStep,
    ZeroResidual,
    MaxIterations,
    Stalled,
    NonFinite,
}

#[derive(Debug, Clone)]
pub struct LmReport {
    pub params: Vec<f64>,
    /// Sum of squared residuals at `params`.
    pub cost: f64,
    pub iterations: usize,
    pub termination: Termination,
    /// Converged and the normal matrix is well conditioned.
    pub converged: bool,
    /// `(JᵀJ)⁻¹` scaled by the residual variance, when invertible.
    pub covariance: Option<DMatrix<f64>>,
}

fn sum_sq(r: &[f64]) -> f64 {
    r.iter().map(|v| v * v).sum()
}

pub fn minimize<P: LeastSquares>(problem: &P, start: &[f64], cfg: &LmConfig) -> LmReport {
    let n = problem.n_params();
    let m = problem.n_residuals();
    let mut p = start.to_vec();
    let mut r = vec![0.0; m];
    let mut r_trial = vec![0.0; m];
    let mut jac = DMatrix::zeros(m, n);

    problem.residuals(&p, &mut r);
    let mut cost = sum_sq(&r);
    let mut lambda = cfg.initial_lambda;
    let mut termination = Termination::MaxIterations;
    let mut iterations = 0;

    if !cost.is_finite() {
        termination = Termination::NonFinite;
    } else {
        'outer: for it in 0..cfg.max_iterations {
            iterations = it + 1;
            if cost == 0.0 {
                termination = Termination::ZeroResidual;
                break;
            }
            problem.jacobian(&p, &mut jac);
            let jtj = jac.tr_mul(&jac);
            let g = jac.tr_mul(&DVector::from_column_slice(&r));
            let diag_max = (0..n).map(|k| jtj[(k, k)]).fold(0.0_f64, f64::max);
            if !(diag_max.is_finite()) || diag_max == 0.0 {
                termination = Termination::Stalled;
                break;
            }
            loop {
                let mut a = jtj.clone();
                for k in 0..n {
                    let dk = jtj[(k, k)].max(1e-15 * diag_max);
                    a[(k, k)] += lambda * dk;
                }
                let step = a.cholesky().map(|c| c.solve(&(-&g)));
                if let Some(step) = step {
                    let trial: Vec<f64> = p.iter().zip(step.iter()).map(|(a, b)| a + b).collect();
                    problem.residuals(&trial, &mut r_trial);
                    let new_cost = sum_sq(&r_trial);
                    if new_cost.is_finite() && new_cost <= cost {
                        let reduction = cost - new_cost;
                        let small_step = step
                            .iter()
                            .zip(&p)
                            .all(|(d, v)| d.abs() <= cfg.xtol * (v.abs() + cfg.xtol));
                        p = trial;
                        std::mem::swap(&mut r, &mut r_trial);
                        cost = new_cost;
                        lambda = (lambda * cfg.lambda_down).max(1e-12);
                        if reduction <= cfg.ftol * cost {
                            termination = Termination::SmallCostChange;
                            break 'outer;
                        }
                        if small_step {
                            termination = Termination::SmallStep;
                            break 'outer;
                        }
                        break;
                    }
                }
                lambda *= cfg.lambda_up;
                if lambda > 1e16 {
                    termination = Termination::Stalled;
                    break 'outer;
                }
            }
        }
    }

    let finite = cost.is_finite() && p.iter().all(|v| v.is_finite());
    let mut covariance = None;
    let mut well_conditioned = false;
    if finite {
        problem.jacobian(&p, &mut jac);
        let jtj = jac.tr_mul(&jac);
        let diag: Vec<f64> = (0..n).map(|k| jtj[(k, k)]).collect();
        if diag.iter().all(|&d| d > 0.0 && d.is_finite()) {
            let scaled = DMatrix::from_fn(n, n, |i, j| jtj[(i, j)] / (diag[i] * diag[j]).sqrt());
            let eig = scaled.symmetric_eigenvalues();
            let (lo, hi) = eig
                .iter()
                .fold((f64::INFINITY, 0.0_f64), |(lo, hi), &e| (lo.min(e), hi.max(e)));
            well_conditioned = lo > 0.0 && hi / lo < cfg.max_condition;
            if well_conditioned {
                let dof = (m.saturating_sub(n)).max(1) as f64;
                covariance = jtj.try_inverse().map(|inv| inv * (cost / dof));
            }
        }
    }
    let converged = finite
        && well_conditioned
        && matches!(
            termination,
            Termination::SmallCostChange | Termination::SmallStep | Termination::ZeroResidual
        );
    LmReport {
        params: p,
        cost,
        iterations,
        termination,
        converged,
        covariance,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// y = a·exp(−b·x)
    struct Exp {
        x: Vec<f64>,
        y: Vec<f64>,
    }

    impl LeastSquares for Exp {
        fn n_params(&self) -> usize {
            2
        }
        fn n_residuals(&self) -> usize {
            self.x.len()
        }
        fn residuals(&self, p: &[f64], r: &mut [f64]) {
            for (k, (x, y)) in self.x.iter().zip(&self.y).enumerate() {
                r[k] = p[0] * (-p[1] * x).exp() - y;
            }
        }
        fn jacobian(&self, p: &[f64], jac: &mut DMatrix<f64>) {
            for (k, x) in self.x.iter().enumerate() {
                let e = (-p[1] * x).exp();
                jac[(k, 0)] = e;
                jac[(k, 1)] = -p[0] * x * e;
            }
        }
    }

    #[test]
    fn recovers_exponential() {
        let x: Vec<f64> = (0..40).map(|k| k as f64 * 0.1).collect();
        let y = x.iter().map(|x| 2.5 * (-1.3 * x).exp()).collect();
        let prob = Exp { x, y };
        let rep = minimize(&prob, &[1.0, 0.5], &LmConfig::default());
        assert!(rep.converged, "{:?}", rep.termination);
        assert!((rep.params[0] - 2.5).abs() < 1e-9);
        assert!((rep.params[1] - 1.3).abs() < 1e-9);
    }

    #[test]
    fn unidentifiable_is_not_converged() {
        // with a = 0 the rate has no effect on the residuals
        let x: Vec<f64> = (0..10).map(|k| k as f64).collect();
        let prob = Exp {
            y: vec![0.0; x.len()],
            x,
        };
        let rep = minimize(&prob, &[0.0, 1.0], &LmConfig::default());
        assert!(!rep.converged);
    }
}
