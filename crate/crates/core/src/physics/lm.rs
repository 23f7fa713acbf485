//! Damped Gauss-Newton (Levenberg-Marquardt) least squares.

use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LmOptions {
    pub max_iterations: usize,
    /// Stop when the relative cost decrease of an accepted step falls below this.
    pub cost_tolerance: f64,
    /// Stop when the relative step length falls below this.
    pub step_tolerance: f64,
    pub initial_damping: f64,
}

impl Default for LmOptions {
    fn default() -> Self {
        LmOptions {
            max_iterations: 200,
            cost_tolerance: 1e-14,
            step_tolerance: 1e-12,
            initial_damping: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmResult {
    pub params: Vec<f64>,
    /// Sum of squared residuals at `params`.
    pub chi2: f64,
    pub dof: usize,
    /// `(J^T J)^-1` at the solution; multiply by `chi2 / dof` for the
    /// covariance when the residuals are not normalized by their errors.
    pub inverse_hessian: Option<DMatrix<f64>>,
    pub iterations: usize,
    pub converged: bool,
}

impl LmResult {
    pub fn residual_norm(&self) -> f64 {
        self.chi2.sqrt()
    }

    /// Parameter covariance scaled by the reduced chi-square.
    pub fn covariance(&self) -> Option<DMatrix<f64>> {
        let h = self.inverse_hessian.as_ref()?;
        let s2 = if self.dof > 0 { self.chi2 / self.dof as f64 } else { 0.0 };
        Some(h * s2)
    }
}

fn jacobian<F: Fn(&[f64]) -> Vec<f64>>(f: &F, p: &[f64], r0: &[f64]) -> DMatrix<f64> {
    let m = r0.len();
    let n = p.len();
    let mut j = DMatrix::zeros(m, n);
    let mut q = p.to_vec();
    for k in 0..n {
        let h = 1e-7 * p[k].abs().max(1e-3);
        q[k] = p[k] + h;
        let rp = f(&q);
        q[k] = p[k] - h;
        let rm = f(&q);
        q[k] = p[k];
        for i in 0..m {
            j[(i, k)] = (rp[i] - rm[i]) / (2.0 * h);
        }
    }
    j
}

fn cost(r: &[f64]) -> f64 {
    r.iter().map(|v| v * v).sum()
}

/// Minimizes `sum r_i(p)^2` from `p0` using central-difference Jacobians.
pub fn levenberg_marquardt<F: Fn(&[f64]) -> Vec<f64>>(residuals: F, p0: &[f64], opts: &LmOptions) -> LmResult {
    let n = p0.len();
    let mut p = p0.to_vec();
    let mut r = residuals(&p);
    let m = r.len();
    let mut c = cost(&r);
    let mut lambda = opts.initial_damping;
    let mut converged = false;
    let mut iterations = 0;
    if !c.is_finite() {
        return LmResult {
            params: p,
            chi2: c,
            dof: m.saturating_sub(n),
            inverse_hessian: None,
            iterations,
            converged,
        };
    }
    'outer: while iterations < opts.max_iterations {
        iterations += 1;
        let j = jacobian(&residuals, &p, &r);
        let jt = j.transpose();
        let a = &jt * &j;
        let g = &jt * DVector::from_column_slice(&r);
        if g.amax() <= 1e-300 {
            converged = true;
            break;
        }
        loop {
            let mut damped = a.clone();
            for k in 0..n {
                damped[(k, k)] += lambda * a[(k, k)].max(1e-12);
            }
            let Some(step) = damped.cholesky().map(|ch| ch.solve(&(-&g))) else {
                lambda *= 10.0;
                if lambda > 1e16 {
                    break 'outer;
                }
                continue;
            };
            let trial: Vec<f64> = p.iter().zip(step.iter()).map(|(a, b)| a + b).collect();
            let rt = residuals(&trial);
            let ct = cost(&rt);
            if ct.is_finite() && ct <= c {
                let rel_cost = (c - ct) / c.max(1e-300);
                let pnorm = p.iter().map(|v| v * v).sum::<f64>().sqrt();
                let rel_step = step.norm() / (pnorm + 1e-12);
                p = trial;
                r = rt;
                c = ct;
                lambda = (lambda / 3.0).max(1e-15);
                if rel_cost < opts.cost_tolerance || rel_step < opts.step_tolerance {
                    converged = true;
                    break 'outer;
                }
                break;
            }
            lambda *= 4.0;
            if lambda > 1e16 {
                // No downhill step exists at machine precision: a minimum.
                converged = true;
                break 'outer;
            }
        }
    }
    let j = jacobian(&residuals, &p, &r);
    let inverse_hessian = (j.transpose() * &j).try_inverse();
    LmResult {
        params: p,
        chi2: c,
        dof: m.saturating_sub(n),
        inverse_hessian,
        iterations,
        converged,
    }
}
