//! Model-based ground truth: Lyapunov solves, Kleinman policy iteration and
//! Hurwitz tests.
//!
//! Used by tests and the CLI's verification mode to cross-check what the
//! learner produced from data alone. Nothing in here is ever called by the
//! learner itself.

use std::fmt;

use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone, PartialEq)]
pub enum OracleError {
    /// The closed-loop matrix handed to the Lyapunov solver is not Hurwitz.
    NotHurwitz {
        abscissa: f64,
    },
    /// The supplied initial gain does not stabilize the damped plant.
    NotStabilizing {
        abscissa: f64,
    },
    /// Policy iteration did not reach the tolerance within the cap.
    MaxIterations {
        iterations: usize,
        gain_change: f64,
    },
    /// The eigenvalue/Schur iteration failed to converge.
    EigenFailure,
    /// The vectorized Lyapunov system is singular.
    SingularLyapunov,
    DimensionMismatch {
        what: String,
    },
}

impl fmt::Display for OracleError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OracleError::NotHurwitz { abscissa } => {
                write!(f, "matrix is not Hurwitz (spectral abscissa {abscissa:.6e})")
            }
            OracleError::NotStabilizing { abscissa } => {
                write!(f, "initial gain is not stabilizing (closed-loop abscissa {abscissa:.6e})")
            }
            OracleError::MaxIterations { iterations, gain_change } => write!(
                f,
                "policy iteration hit the cap after {iterations} steps (gain change {gain_change:.3e})"
            ),
            OracleError::EigenFailure => write!(f, "eigenvalue computation failed to converge"),
            OracleError::SingularLyapunov => write!(f, "Lyapunov system is singular"),
            OracleError::DimensionMismatch { what } => write!(f, "dimension mismatch: {what}"),
        }
    }
}

impl std::error::Error for OracleError {}

/// Solution of a continuous-time Riccati equation via policy iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct CareSolution {
    /// Value matrix, symmetric positive definite.
    pub p: DMatrix<f64>,
    /// Optimal gain `K = R^-1 B' P`.
    pub k: DMatrix<f64>,
    pub iterations: usize,
    /// Frobenius norm of the Riccati residual at the returned pair.
    pub residual: f64,
}

/// Largest real part over the eigenvalues of `a`; negative iff `a` is
/// Hurwitz.
pub fn spectral_abscissa(a: &DMatrix<f64>) -> Result<f64, OracleError> {
    if a.nrows() != a.ncols() {
        return Err(OracleError::DimensionMismatch {
            what: "matrix must be square".into(),
        });
    }
    let schur = nalgebra::linalg::Schur::try_new(a.clone(), 1e-14, 100_000)
        .ok_or(OracleError::EigenFailure)?;
    Ok(schur
        .complex_eigenvalues()
        .iter()
        .map(|ev| ev.re)
        .fold(f64::NEG_INFINITY, f64::max))
}

pub fn is_hurwitz(a: &DMatrix<f64>) -> Result<bool, OracleError> {
    Ok(spectral_abscissa(a)? < 0.0)
}

/// Solves `A_cl' P + P A_cl + M = 0` for symmetric `P` by Kronecker
/// vectorization of the n^2 x n^2 linear system, then symmetrizes.
///
/// `A_cl` must be Hurwitz; that is checked up front so the failure mode is
/// explicit rather than a mysterious singular solve.
pub fn solve_lyapunov(a_cl: &DMatrix<f64>, m: &DMatrix<f64>) -> Result<DMatrix<f64>, OracleError> {
    let n = a_cl.nrows();
    if a_cl.ncols() != n || m.nrows() != n || m.ncols() != n {
        return Err(OracleError::DimensionMismatch {
            what: "A_cl and M must be square with equal size".into(),
        });
    }
    let abscissa = spectral_abscissa(a_cl)?;
    if abscissa >= 0.0 {
        return Err(OracleError::NotHurwitz { abscissa });
    }
    let at = a_cl.transpose();
    let eye = DMatrix::<f64>::identity(n, n);
    let system = eye.kronecker(&at) + at.kronecker(&eye);
    let rhs = -DVector::from_column_slice(m.as_slice());
    let solution = system
        .lu()
        .solve(&rhs)
        .ok_or(OracleError::SingularLyapunov)?;
    let p = DMatrix::from_column_slice(n, n, solution.as_slice());
    Ok((&p + p.transpose()) * 0.5)
}

/// Frobenius norm of the Riccati residual
/// `(A - aI)'P + P(A - aI) + Q - P B R^-1 B' P`.
pub fn riccati_residual(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    alpha: f64,
    p: &DMatrix<f64>,
) -> f64 {
    let n = a.nrows();
    let a_damped = a - DMatrix::<f64>::identity(n, n) * alpha;
    let r_inv_bt = r
        .clone()
        .lu()
        .solve(&b.transpose())
        .expect("R must be invertible");
    (a_damped.transpose() * p + p * a_damped + q - p * b * r_inv_bt * p).norm()
}

/// Kleinman policy iteration for the damped Riccati equation.
///
/// Alternates the Lyapunov solve for the current gain with the improvement
/// `K <- R^-1 B' P` until the relative gain change drops below `tol`.
/// When `k0` is `None` a stabilizing start is bootstrapped internally by
/// solving at a large damping value first and stepping the damping down,
/// so callers never need a stabilizing gain of their own.
#[allow(clippy::too_many_arguments)]
pub fn kleinman(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    alpha: f64,
    k0: Option<&DMatrix<f64>>,
    tol: f64,
    max_iter: usize,
) -> Result<CareSolution, OracleError> {
    match k0 {
        Some(k0) => kleinman_from(a, b, q, r, alpha, k0, tol, max_iter),
        None => {
            let k0 = bootstrap_stabilizing_gain(a, b, r, alpha, max_iter)?;
            kleinman_from(a, b, q, r, alpha, &k0, tol, max_iter)
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn kleinman_from(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    alpha: f64,
    k0: &DMatrix<f64>,
    tol: f64,
    max_iter: usize,
) -> Result<CareSolution, OracleError> {
    let n = a.nrows();
    let m = b.ncols();
    if k0.nrows() != m || k0.ncols() != n {
        return Err(OracleError::DimensionMismatch {
            what: format!("K0 must be {m}x{n}, found {}x{}", k0.nrows(), k0.ncols()),
        });
    }
    let a_damped = a - DMatrix::<f64>::identity(n, n) * alpha;
    let closed = &a_damped - b * k0;
    let abscissa = spectral_abscissa(&closed)?;
    if abscissa >= 0.0 {
        return Err(OracleError::NotStabilizing { abscissa });
    }

    let r_lu = r.clone().lu();
    let mut k = k0.clone();
    let mut p_prev: Option<DMatrix<f64>> = None;
    for iteration in 1..=max_iter {
        let cost = q + k.transpose() * r * &k;
        let p = solve_lyapunov(&(&a_damped - b * &k), &cost)?;
        if let Some(prev) = &p_prev {
            // monotone nonincreasing in the Loewner order
            let drift = nalgebra::linalg::SymmetricEigen::try_new(&p - prev, 1e-13, 100_000)
                .ok_or(OracleError::EigenFailure)?
                .eigenvalues
                .max();
            debug_assert!(
                drift <= 1e-10 * (1.0 + p.norm()),
                "policy iteration lost monotonicity"
            );
        }
        let k_next = r_lu
            .solve(&(b.transpose() * &p))
            .ok_or(OracleError::SingularLyapunov)?;
        let change = (&k_next - &k).norm() / k.norm().max(1.0);
        k = k_next;
        p_prev = Some(p);
        if change < tol {
            let p = p_prev.unwrap();
            let residual = riccati_residual(a, b, q, r, alpha, &p);
            return Ok(CareSolution {
                p,
                k,
                iterations: iteration,
                residual,
            });
        }
    }
    Err(OracleError::MaxIterations {
        iterations: max_iter,
        gain_change: f64::INFINITY,
    })
}

/// Finds a gain that stabilizes `A - alpha I` using the same damping idea as
/// the learner: start from a damping large enough that the zero gain works,
/// then ride the optimal gain down to the requested damping.
fn bootstrap_stabilizing_gain(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    r: &DMatrix<f64>,
    alpha: f64,
    max_iter: usize,
) -> Result<DMatrix<f64>, OracleError> {
    let n = a.nrows();
    let m = b.ncols();
    let eye = DMatrix::<f64>::identity(n, n);
    let open_loop = spectral_abscissa(&(a - &eye * alpha))?;
    if open_loop < 0.0 {
        return Ok(DMatrix::zeros(m, n));
    }

    let q = DMatrix::<f64>::identity(n, n);
    let mut damping = alpha + open_loop + 1.0;
    let mut k = DMatrix::<f64>::zeros(m, n);
    for _ in 0..max_iter {
        let solution = kleinman_from(a, b, &q, r, damping, &k, 1e-10, max_iter)?;
        k = solution.k;
        if damping <= alpha {
            return Ok(k);
        }
        // step the damping as far down as the current gain allows
        let mut next = alpha;
        loop {
            let closed = a - &eye * next - b * &k;
            if spectral_abscissa(&closed)? < 0.0 {
                break;
            }
            next = 0.5 * (next + damping);
            if (damping - next) < 1e-12 * damping.max(1.0) {
                return Err(OracleError::MaxIterations {
                    iterations: max_iter,
                    gain_change: f64::INFINITY,
                });
            }
        }
        damping = next;
    }
    Err(OracleError::MaxIterations {
        iterations: max_iter,
        gain_change: f64::INFINITY,
    })
}
