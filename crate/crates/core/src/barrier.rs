//! Minimal dense log-barrier solver for linear SDPs in inequality form:
//!
//! ```text
//! minimize    c' x
//! subject to  A_j(x) = A_j0 + sum_i x_i A_ji  >= 0   (each block PSD)
//! ```
//!
//! The problems this crate produces are tiny (tens of variables, blocks the
//! size of the state dimension), so a textbook barrier method with dense
//! Newton steps is both simpler and more predictable than pulling in a conic
//! solver. Strict feasibility of the start point is required; central-path
//! stages shrink the duality-gap estimate `theta / t` until it passes the
//! requested tolerance.

use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum BarrierError {
    /// The supplied start point is not strictly feasible.
    InfeasibleStart,
    /// Newton system could not be solved even with regularization.
    SingularHessian,
    /// Backtracking could not find an acceptable feasible step.
    LineSearchFailed,
    /// Stage cap exceeded before reaching the gap tolerance.
    IterationCap,
}

impl std::fmt::Display for BarrierError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            BarrierError::InfeasibleStart => write!(f, "start point is not strictly feasible"),
            BarrierError::SingularHessian => write!(f, "Newton system is singular"),
            BarrierError::LineSearchFailed => write!(f, "line search failed"),
            BarrierError::IterationCap => write!(f, "barrier stage cap exceeded"),
        }
    }
}

/// One PSD constraint block, affine in the variables.
#[derive(Debug, Clone)]
pub(crate) struct AffineBlock {
    pub base: DMatrix<f64>,
    pub coeffs: Vec<DMatrix<f64>>,
}

impl AffineBlock {
    fn eval(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let mut out = self.base.clone();
        for (xi, coeff) in x.iter().zip(&self.coeffs) {
            if *xi != 0.0 {
                out += coeff * *xi;
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
pub(crate) struct BarrierProblem {
    pub objective: DVector<f64>,
    pub blocks: Vec<AffineBlock>,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct BarrierParams {
    /// Stop when `gap < tol * (1 + |c'x|)`.
    pub tol: f64,
    /// Multiplicative gap reduction per stage.
    pub mu_reduction: f64,
    pub max_stages: usize,
    pub max_newton: usize,
}

impl Default for BarrierParams {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            mu_reduction: 0.2,
            max_stages: 200,
            max_newton: 60,
        }
    }
}

struct BlockState {
    /// `A_j(x)^-1 A_ji` for every variable.
    solved: Vec<DMatrix<f64>>,
}

fn factor_block(block: &AffineBlock, x: &DVector<f64>) -> Option<BlockState> {
    let chol = nalgebra::linalg::Cholesky::new(block.eval(x))?;
    let solved = block.coeffs.iter().map(|g| chol.solve(g)).collect();
    Some(BlockState { solved })
}

fn barrier_value(problem: &BarrierProblem, x: &DVector<f64>) -> Option<f64> {
    let mut total = 0.0;
    for block in &problem.blocks {
        let chol = nalgebra::linalg::Cholesky::new(block.eval(x))?;
        total -= 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    }
    Some(total)
}

/// Total barrier parameter: the sum of block sizes.
fn theta_total(problem: &BarrierProblem) -> f64 {
    problem.blocks.iter().map(|b| b.base.nrows() as f64).sum()
}

/// Early-exit predicate checked between Newton steps.
pub(crate) type StopCondition<'a> = &'a dyn Fn(&DVector<f64>) -> bool;

/// Minimizes the problem from a strictly feasible `x0`. `stop_when` is
/// checked between Newton steps and short-circuits the solve; feasibility of
/// the returned point is guaranteed either way.
pub(crate) fn minimize(
    problem: &BarrierProblem,
    x0: &DVector<f64>,
    params: &BarrierParams,
    stop_when: Option<StopCondition<'_>>,
) -> Result<DVector<f64>, BarrierError> {
    let q = problem.objective.len();
    let theta = theta_total(problem);
    let mut x = x0.clone();
    if barrier_value(problem, &x).is_none() {
        return Err(BarrierError::InfeasibleStart);
    }
    if let Some(stop) = stop_when {
        if stop(&x) {
            return Ok(x);
        }
    }

    let objective = |x: &DVector<f64>| problem.objective.dot(x);
    let mut t = theta / objective(&x).abs().max(1.0);

    for _ in 0..params.max_stages {
        // Newton loop for the current stage
        for _ in 0..params.max_newton {
            let mut grad = &problem.objective * t;
            let mut hess = DMatrix::<f64>::zeros(q, q);
            for block in &problem.blocks {
                let state = factor_block(block, &x).ok_or(BarrierError::InfeasibleStart)?;
                for i in 0..q {
                    grad[i] -= state.solved[i].trace();
                    for l in i..q {
                        let mut dot = 0.0;
                        let si = &state.solved[i];
                        let sl = &state.solved[l];
                        for a in 0..si.nrows() {
                            for b in 0..si.ncols() {
                                dot += si[(a, b)] * sl[(b, a)];
                            }
                        }
                        hess[(i, l)] += dot;
                        hess[(l, i)] = hess[(i, l)];
                    }
                }
            }

            let step = solve_newton(&hess, &grad)?;
            let decrement = grad.dot(&step);
            // step solves H s = -g, so the Newton decrement is -g's
            if decrement >= -1e-12 * (1.0 + t * objective(&x).abs()) {
                break;
            }

            let f_current = t * objective(&x)
                + barrier_value(problem, &x).ok_or(BarrierError::InfeasibleStart)?;
            let mut alpha = 1.0;
            let mut accepted = false;
            for _ in 0..60 {
                let candidate = &x + &step * alpha;
                if let Some(b) = barrier_value(problem, &candidate) {
                    let f_candidate = t * objective(&candidate) + b;
                    if f_candidate <= f_current + 0.25 * alpha * decrement {
                        x = candidate;
                        accepted = true;
                        break;
                    }
                }
                alpha *= 0.5;
            }
            if !accepted {
                return Err(BarrierError::LineSearchFailed);
            }
            if let Some(stop) = stop_when {
                if stop(&x) {
                    return Ok(x);
                }
            }
            if -decrement * alpha < 1e-13 * (1.0 + t * objective(&x).abs()) {
                break;
            }
        }

        let gap = theta / t;
        if gap < params.tol * (1.0 + objective(&x).abs()) {
            return Ok(x);
        }
        t /= params.mu_reduction;
    }
    Err(BarrierError::IterationCap)
}

fn solve_newton(hess: &DMatrix<f64>, grad: &DVector<f64>) -> Result<DVector<f64>, BarrierError> {
    let q = hess.nrows();
    let mut shift = 0.0;
    for _ in 0..8 {
        let regularized = if shift == 0.0 {
            hess.clone()
        } else {
            hess + DMatrix::identity(q, q) * shift
        };
        if let Some(chol) = nalgebra::linalg::Cholesky::new(regularized) {
            return Ok(chol.solve(&(-grad)));
        }
        shift = if shift == 0.0 {
            1e-12 * (1.0 + hess.trace().abs())
        } else {
            shift * 100.0
        };
    }
    Err(BarrierError::SingularHessian)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{dmatrix, dvector};

    #[test]
    fn scalar_bound_is_attained() {
        // minimize x subject to x - 1 >= 0
        let problem = BarrierProblem {
            objective: dvector![1.0],
            blocks: vec![AffineBlock {
                base: dmatrix![-1.0],
                coeffs: vec![dmatrix![1.0]],
            }],
        };
        let x = minimize(&problem, &dvector![5.0], &BarrierParams::default(), None).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-6, "x = {}", x[0]);
    }

    #[test]
    fn two_block_coupling() {
        // minimize x1 + x2 s.t. diag(x1, x2) >= I and x1 + x2 >= 3
        let problem = BarrierProblem {
            objective: dvector![1.0, 1.0],
            blocks: vec![
                AffineBlock {
                    base: dmatrix![-1.0, 0.0; 0.0, -1.0],
                    coeffs: vec![dmatrix![1.0, 0.0; 0.0, 0.0], dmatrix![0.0, 0.0; 0.0, 1.0]],
                },
                AffineBlock {
                    base: dmatrix![-3.0],
                    coeffs: vec![dmatrix![1.0], dmatrix![1.0]],
                },
            ],
        };
        let x = minimize(
            &problem,
            &dvector![4.0, 4.0],
            &BarrierParams::default(),
            None,
        )
        .unwrap();
        assert!((x[0] + x[1] - 3.0).abs() < 1e-6, "sum = {}", x[0] + x[1]);
        assert!(x[0] >= 1.0 - 1e-9 && x[1] >= 1.0 - 1e-9);
    }

    #[test]
    fn infeasible_start_is_rejected() {
        let problem = BarrierProblem {
            objective: dvector![1.0],
            blocks: vec![AffineBlock {
                base: dmatrix![-1.0],
                coeffs: vec![dmatrix![1.0]],
            }],
        };
        assert!(matches!(
            minimize(&problem, &dvector![0.5], &BarrierParams::default(), None),
            Err(BarrierError::InfeasibleStart)
        ));
    }

    #[test]
    fn early_stop_returns_a_feasible_point() {
        let problem = BarrierProblem {
            objective: dvector![-1.0], // maximize x
            blocks: vec![AffineBlock {
                base: dmatrix![4.0],
                coeffs: vec![dmatrix![-1.0]],
            }],
        };
        let stop = |x: &DVector<f64>| x[0] >= 2.0;
        let x = minimize(
            &problem,
            &dvector![2.5],
            &BarrierParams::default(),
            Some(&stop),
        )
        .unwrap();
        assert!(x[0] >= 2.0 && x[0] < 4.0 + 1e-9);
    }
}
