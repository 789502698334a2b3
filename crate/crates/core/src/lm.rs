//! Weighted Levenberg-Marquardt least squares for small curve fits.
//!
//! Minimises `χ²(p) = Σ wᵢ (yᵢ − f(xᵢ; p))²`. Steps that do not lower χ²
//! (or leave the feasible region) are rejected and the damping is raised,
//! so the accepted objective sequence is non-increasing.

use nalgebra::{DMatrix, DVector};

pub trait Model {
    fn n_params(&self) -> usize;

    fn eval(&self, x: f64, p: &[f64]) -> f64;

    /// Writes `∂f/∂pₖ` at `x` into `grad`.
    fn gradient(&self, x: f64, p: &[f64], grad: &mut [f64]);

    fn feasible(&self, _p: &[f64]) -> bool {
        true
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LmOptions {
    pub max_iterations: usize,
    /// Converged once `‖δ‖ / ‖p‖` falls below this.
    pub rel_step_tol: f64,
    pub initial_damping: f64,
}

impl Default for LmOptions {
    fn default() -> Self {
        LmOptions {
            max_iterations: 200,
            rel_step_tol: 1e-8,
            initial_damping: 1e-3,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LmOutcome {
    pub params: Vec<f64>,
    /// Inverse of `JᵀWJ` at the solution; `None` when singular.
    pub covariance: Option<DMatrix<f64>>,
    pub objective: f64,
    pub converged: bool,
    pub iterations: usize,
    /// χ² after each accepted step, starting with the initial guess.
    pub objective_trace: Vec<f64>,
}

impl LmOutcome {
    pub fn sigma(&self, k: usize) -> f64 {
        self.covariance
            .as_ref()
            .map(|c| c[(k, k)].max(0.0).sqrt())
            .unwrap_or(f64::NAN)
    }
}

fn objective<M: Model>(model: &M, xs: &[f64], ys: &[f64], ws: &[f64], p: &[f64]) -> f64 {
    xs.iter()
        .zip(ys)
        .zip(ws)
        .map(|((&x, &y), &w)| w * (y - model.eval(x, p)).powi(2))
        .sum()
}

/// Returns `(JᵀWJ, JᵀW r)`.
fn normal_equations<M: Model>(
    model: &M,
    xs: &[f64],
    ys: &[f64],
    ws: &[f64],
    p: &[f64],
) -> (DMatrix<f64>, DVector<f64>) {
    let n = model.n_params();
    let mut jtj = DMatrix::zeros(n, n);
    let mut jtr = DVector::zeros(n);
    let mut g = vec![0.0; n];
    for ((&x, &y), &w) in xs.iter().zip(ys).zip(ws) {
        model.gradient(x, p, &mut g);
        let r = y - model.eval(x, p);
        for a in 0..n {
            jtr[a] += w * g[a] * r;
            for b in 0..=a {
                jtj[(a, b)] += w * g[a] * g[b];
            }
        }
    }
    for a in 0..n {
        for b in 0..a {
            jtj[(b, a)] = jtj[(a, b)];
        }
    }
    (jtj, jtr)
}

pub fn minimize<M: Model>(
    model: &M,
    xs: &[f64],
    ys: &[f64],
    weights: &[f64],
    initial: &[f64],
    opts: &LmOptions,
) -> LmOutcome {
    assert_eq!(xs.len(), ys.len());
    assert_eq!(xs.len(), weights.len());
    assert_eq!(initial.len(), model.n_params());

    let mut p = initial.to_vec();
    let mut chi2 = objective(model, xs, ys, weights, &p);
    let mut trace = vec![chi2];
    let mut damping = opts.initial_damping;
    let mut converged = false;
    let mut iterations = 0;
    let (mut jtj, mut jtr) = normal_equations(model, xs, ys, weights, &p);

    while iterations < opts.max_iterations {
        iterations += 1;
        let mut lhs = jtj.clone();
        for k in 0..lhs.nrows() {
            let d = jtj[(k, k)];
            lhs[(k, k)] += damping * if d > 0.0 { d } else { 1.0 };
        }
        let Some(step) = lhs.lu().solve(&jtr) else {
            damping *= 10.0;
            continue;
        };
        let p_norm = p.iter().map(|v| v * v).sum::<f64>().sqrt();
        let rel_step = step.norm() / (p_norm + f64::MIN_POSITIVE);
        let candidate: Vec<f64> = p.iter().zip(step.iter()).map(|(a, b)| a + b).collect();
        let cand_chi2 = if model.feasible(&candidate) {
            objective(model, xs, ys, weights, &candidate)
        } else {
            f64::INFINITY
        };
        if cand_chi2 <= chi2 && cand_chi2.is_finite() {
            p = candidate;
            chi2 = cand_chi2;
            trace.push(chi2);
            damping = (damping / 10.0).max(1e-15);
            (jtj, jtr) = normal_equations(model, xs, ys, weights, &p);
        } else {
            damping *= 10.0;
        }
        if rel_step < opts.rel_step_tol {
            converged = true;
            break;
        }
        if damping > 1e20 {
            // no damped direction lowers χ² any more
            converged = true;
            break;
        }
    }

    let covariance = jtj.clone().try_inverse();
    LmOutcome {
        params: p,
        covariance,
        objective: chi2,
        converged,
        iterations,
        objective_trace: trace,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Line;

    impl Model for Line {
        fn n_params(&self) -> usize {
            2
        }
        fn eval(&self, x: f64, p: &[f64]) -> f64 {
            p[0] + p[1] * x
        }
        fn gradient(&self, x: f64, _p: &[f64], g: &mut [f64]) {
            g[0] = 1.0;
            g[1] = x;
        }
    }

    struct Decay;

    impl Model for Decay {
        fn n_params(&self) -> usize {
            2
        }
        fn eval(&self, x: f64, p: &[f64]) -> f64 {
            p[0] * (-x / p[1]).exp()
        }
        fn gradient(&self, x: f64, p: &[f64], g: &mut [f64]) {
            let e = (-x / p[1]).exp();
            g[0] = e;
            g[1] = p[0] * e * x / (p[1] * p[1]);
        }
        fn feasible(&self, p: &[f64]) -> bool {
            p[1] > 0.0
        }
    }

    #[test]
    fn linear_fit_matches_closed_form() {
        let xs: Vec<f64> = (0..10).map(f64::from).collect();
        let ys: Vec<f64> = xs
            .iter()
            .map(|x| 1.5 + 0.25 * x + if *x as i32 % 2 == 0 { 0.1 } else { -0.1 })
            .collect();
        let ws = vec![1.0; xs.len()];
        let out = minimize(&Line, &xs, &ys, &ws, &[0.0, 0.0], &LmOptions::default());
        assert!(out.converged);
        // ordinary least squares by hand
        let n = xs.len() as f64;
        let (sx, sy) = (xs.iter().sum::<f64>(), ys.iter().sum::<f64>());
        let sxx = xs.iter().map(|x| x * x).sum::<f64>();
        let sxy = xs.iter().zip(&ys).map(|(x, y)| x * y).sum::<f64>();
        let slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
        let icpt = (sy - slope * sx) / n;
        assert!((out.params[1] - slope).abs() < 1e-8);
        assert!((out.params[0] - icpt).abs() < 1e-8);
    }

    #[test]
    fn nonlinear_fit_descends_monotonically() {
        let xs: Vec<f64> = (0..40).map(|i| f64::from(i) * 0.25).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 3.0 * (-x / 2.5).exp()).collect();
        let ws = vec![1.0; xs.len()];
        let out = minimize(&Decay, &xs, &ys, &ws, &[1.0, 10.0], &LmOptions::default());
        assert!(out.converged);
        assert!((out.params[0] - 3.0).abs() < 1e-7);
        assert!((out.params[1] - 2.5).abs() < 1e-7);
        assert!(out.objective_trace.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn iteration_cap_is_reported() {
        let xs: Vec<f64> = (0..40).map(|i| f64::from(i) * 0.25).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 3.0 * (-x / 2.5).exp()).collect();
        let ws = vec![1.0; xs.len()];
        let opts = LmOptions {
            max_iterations: 2,
            ..Default::default()
        };
        let out = minimize(&Decay, &xs, &ys, &ws, &[1.0, 10.0], &opts);
        assert!(!out.converged);
        assert_eq!(out.iterations, 2);
    }
}
