//! The model-free learner: off-policy least-squares policy iteration with an
//! explicitly managed damping parameter, so learning can start from the zero
//! gain with no stabilizing controller known in advance.
//!
//! One policy-evaluation/improvement step solves the regression
//!
//! ```text
//! Theta(alpha) (nu(P); vec(K+)) = Xi
//! Theta(alpha) = (delta_xx - 2 alpha I_x,
//!                 -2 I_xu (I (x) R) - 2 I_xx (I (x) K'R))
//! Xi           = -I_x nu(Q + K'RK)
//! ```
//!
//! whose unique solution, under the excitation rank condition, coincides with
//! the Kleinman pair for the damped plant `A - alpha I`. The outer loop walks
//! `alpha` down to exactly zero in integer multiples of `eta = alpha0 / S`,
//! accepting a decrement only while the evaluated value matrix stays positive
//! definite and does not jump by more than `sigma`.

use std::fmt;
use std::io::Write;

use nalgebra::{DMatrix, DVector};

use crate::simulate::{nu, nu_inverse, sym_vec_len, DataMatrices, SimError};

pub const DEFAULT_SIGMA: f64 = 100.0;
pub const DEFAULT_EPSILON: f64 = 1e-6;
pub const DEFAULT_PD_TOL: f64 = 1e-9;
pub const DEFAULT_LS_RCOND: f64 = 1e-10;
pub const DEFAULT_MAX_OUTER: usize = 500;

#[derive(Debug, Clone, PartialEq)]
pub enum AdpError {
    /// The regression matrix lost column rank: the excitation rank condition
    /// does not hold for this data set.
    RankDeficient {
        rank: usize,
        required: usize,
    },
    /// The least-squares solution contains non-finite entries.
    NonFiniteSolution,
    /// The damping never reached zero: no decrement was accepted over
    /// `max_outer` consecutive improvement rounds.
    AlphaStalled {
        alpha: f64,
        calls: usize,
    },
    /// Convergence-phase iteration cap exceeded.
    IterationCap {
        iterations: usize,
    },
    /// The doubling search for an initial damping exceeded its cap.
    AlphaSearchExhausted {
        limit: f64,
    },
    BadInput(String),
}

impl fmt::Display for AdpError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AdpError::RankDeficient { rank, required } => write!(
                f,
                "excitation rank condition violated: regression rank {rank}, required {required}"
            ),
            AdpError::NonFiniteSolution => write!(f, "least-squares solution is not finite"),
            AdpError::AlphaStalled { alpha, calls } => write!(
                f,
                "damping stalled at alpha = {alpha} after {calls} rounds without a decrement"
            ),
            AdpError::IterationCap { iterations } => {
                write!(f, "no convergence within {iterations} iterations")
            }
            AdpError::AlphaSearchExhausted { limit } => {
                write!(f, "no certifying damping found below {limit}")
            }
            AdpError::BadInput(msg) => write!(f, "bad input: {msg}"),
        }
    }
}

impl std::error::Error for AdpError {}

impl From<SimError> for AdpError {
    fn from(e: SimError) -> Self {
        AdpError::BadInput(e.to_string())
    }
}

/// Weights and knobs of the learning loop. `eta()` is `alpha0 / step_count`;
/// the damping is tracked as an integer number of `eta` steps so it reaches
/// zero exactly instead of drifting through floating-point remainders.
#[derive(Debug, Clone, PartialEq)]
pub struct LearnerConfig {
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub alpha0: f64,
    /// S: number of eta-steps that make up alpha0.
    pub step_count: u32,
    /// Bound on the value-matrix jump accepted during a damping decrement.
    pub sigma: f64,
    /// Relative gain-change threshold that ends the undamped phase.
    pub epsilon: f64,
    pub pd_tol: f64,
    pub ls_rcond: f64,
    pub max_outer: usize,
}

impl LearnerConfig {
    pub fn new(q: DMatrix<f64>, r: DMatrix<f64>, alpha0: f64, step_count: u32) -> Self {
        Self {
            q,
            r,
            alpha0,
            step_count,
            sigma: DEFAULT_SIGMA,
            epsilon: DEFAULT_EPSILON,
            pd_tol: DEFAULT_PD_TOL,
            ls_rcond: DEFAULT_LS_RCOND,
            max_outer: DEFAULT_MAX_OUTER,
        }
    }

    pub fn eta(&self) -> f64 {
        self.alpha0 / self.step_count as f64
    }
}

/// One recorded step of the learner.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyIterate {
    pub k: usize,
    pub alpha: f64,
    pub gain: DMatrix<f64>,
    /// Evaluated value matrix; absent for the initial zero-gain iterate.
    pub value: Option<DMatrix<f64>>,
    pub lambda_max_p: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TerminalStatus {
    Converged,
    RankFailure,
    AlphaStalled,
    IterationCap,
}

/// Full iterate record of one learning run.
#[derive(Debug, Clone, PartialEq)]
pub struct LearnHistory {
    pub iterates: Vec<PolicyIterate>,
    pub status: TerminalStatus,
}

impl LearnHistory {
    /// CSV export: `k,alpha,lambda_max_P,gain_change` plus an optional
    /// `frobenius_gap_to_oracle` column when a reference gain is supplied.
    /// 17 significant digits throughout.
    pub fn to_csv<W: Write>(
        &self,
        oracle_gain: Option<&DMatrix<f64>>,
        mut w: W,
    ) -> std::io::Result<()> {
        let header = match oracle_gain {
            Some(_) => "k,alpha,lambda_max_P,gain_change,frobenius_gap_to_oracle",
            None => "k,alpha,lambda_max_P,gain_change",
        };
        writeln!(w, "{header}")?;
        for (idx, it) in self.iterates.iter().enumerate() {
            let lambda = it
                .lambda_max_p
                .map(|v| format!("{v:.16e}"))
                .unwrap_or_default();
            let change = if idx == 0 {
                String::new()
            } else {
                format!("{:.16e}", (&it.gain - &self.iterates[idx - 1].gain).norm())
            };
            match oracle_gain {
                Some(reference) => {
                    let gap = (&it.gain - reference).norm();
                    writeln!(
                        w,
                        "{},{:.16e},{},{},{:.16e}",
                        it.k, it.alpha, lambda, change, gap
                    )?;
                }
                None => writeln!(w, "{},{:.16e},{},{}", it.k, it.alpha, lambda, change)?,
            }
        }
        Ok(())
    }
}

/// Result of a successful learning run.
#[derive(Debug, Clone, PartialEq)]
pub struct LearnOutcome {
    pub gain: DMatrix<f64>,
    pub history: LearnHistory,
}

/// Eigenvalue range of a symmetric matrix.
#[derive(Debug, Clone, Copy)]
pub(crate) struct SymSpectrum {
    pub min: f64,
    pub max: f64,
}

impl SymSpectrum {
    /// Operator 2-norm of the symmetric matrix.
    pub fn norm2(&self) -> f64 {
        self.min.abs().max(self.max.abs())
    }
}

pub(crate) fn sym_spectrum(p: &DMatrix<f64>) -> Result<SymSpectrum, AdpError> {
    if p.iter().any(|v| !v.is_finite()) {
        return Err(AdpError::NonFiniteSolution);
    }
    let eigen = nalgebra::linalg::SymmetricEigen::try_new(p.clone(), 1e-13, 100_000)
        .ok_or(AdpError::NonFiniteSolution)?;
    Ok(SymSpectrum {
        min: eigen.eigenvalues.min(),
        max: eigen.eigenvalues.max(),
    })
}

fn is_positive_definite(spectrum: SymSpectrum, pd_tol: f64) -> bool {
    spectrum.min > pd_tol * (1.0 + spectrum.norm2())
}

/// Builds the regression `Theta(alpha) z = Xi` for evaluating gain `k_gain`
/// at damping `alpha`.
pub fn assemble_ls(
    dm: &DataMatrices,
    k_gain: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    alpha: f64,
) -> Result<(DMatrix<f64>, DVector<f64>), AdpError> {
    let n = dm.n;
    let m = dm.m;
    if k_gain.nrows() != m || k_gain.ncols() != n {
        return Err(AdpError::BadInput(format!(
            "gain must be {m}x{n}, found {}x{}",
            k_gain.nrows(),
            k_gain.ncols()
        )));
    }
    if q.nrows() != n || q.ncols() != n || r.nrows() != m || r.ncols() != m {
        return Err(AdpError::BadInput(
            "Q or R does not match the data dimensions".into(),
        ));
    }
    let nn2 = sym_vec_len(n);
    let z = dm.interval_count;
    let eye_n = DMatrix::<f64>::identity(n, n);

    let mut theta = DMatrix::zeros(z, nn2 + m * n);
    let left = if alpha == 0.0 {
        dm.delta_xx.clone()
    } else {
        &dm.delta_xx - &dm.i_x * (2.0 * alpha)
    };
    theta.view_mut((0, 0), (z, nn2)).copy_from(&left);
    let right = -2.0 * &dm.i_xu * eye_n.kronecker(r)
        - 2.0 * &dm.i_xx * eye_n.kronecker(&(k_gain.transpose() * r));
    theta.view_mut((0, nn2), (z, m * n)).copy_from(&right);

    let cost = q + k_gain.transpose() * r * k_gain;
    let xi = -(&dm.i_x * nu(&cost)?);
    Ok((theta, xi))
}

/// One off-policy policy-evaluation/improvement step at damping `alpha`.
///
/// Solves the regression by SVD with relative truncation `ls_rcond`; rank
/// deficiency surfaces as an error rather than being regularized away.
pub fn policy_step(
    dm: &DataMatrices,
    k_gain: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    alpha: f64,
    ls_rcond: f64,
) -> Result<(DMatrix<f64>, DMatrix<f64>), AdpError> {
    let (theta, xi) = assemble_ls(dm, k_gain, q, r, alpha)?;
    let n = dm.n;
    let m = dm.m;
    let nn2 = sym_vec_len(n);
    let cols = nn2 + m * n;

    let svd = nalgebra::linalg::SVD::try_new(theta, true, true, f64::EPSILON, 100_000)
        .ok_or(AdpError::NonFiniteSolution)?;
    let sigma_max = svd.singular_values.max();
    let rank = svd
        .singular_values
        .iter()
        .filter(|&&s| s > ls_rcond * sigma_max)
        .count();
    if rank < cols {
        return Err(AdpError::RankDeficient {
            rank,
            required: cols,
        });
    }
    let solution = svd
        .solve(&xi, ls_rcond * sigma_max)
        .map_err(|_| AdpError::NonFiniteSolution)?;
    if solution.iter().any(|v| !v.is_finite()) {
        return Err(AdpError::NonFiniteSolution);
    }
    let p = nu_inverse(&solution.rows(0, nn2).into_owned(), n)?;
    let k_next = DMatrix::from_column_slice(m, n, solution.rows(nn2, m * n).as_slice());
    Ok((p, k_next))
}

/// Result of one damping-decrease round.
#[derive(Debug, Clone, PartialEq)]
pub struct AlphaStep {
    /// New damping, as an integer number of eta-steps.
    pub alpha_steps: u32,
    pub value: DMatrix<f64>,
    pub gain: DMatrix<f64>,
    /// Number of eta-decrements accepted this round.
    pub accepted: usize,
}

/// Damping-decrease round: starting at `alpha_steps * eta`, repeatedly
/// evaluates the current gain one eta-step lower and accepts the decrement
/// while the value matrix stays positive definite and within `sigma` of the
/// most recently accepted one. If no decrement is accepted the damping is
/// kept and the pair is recomputed there, which is exactly the policy
/// improvement that unblocks the next round.
pub fn decrease_alpha(
    dm: &DataMatrices,
    alpha_steps: u32,
    k_gain: &DMatrix<f64>,
    value_prev: &DMatrix<f64>,
    cfg: &LearnerConfig,
) -> Result<AlphaStep, AdpError> {
    let eta = cfg.eta();
    let mut current = alpha_steps;
    let mut accepted = 0usize;
    let mut last_accepted: Option<(DMatrix<f64>, DMatrix<f64>)> = None;
    let mut reference = value_prev.clone();

    while current >= 1 {
        let trial = current - 1;
        let alpha_trial = trial as f64 * eta;
        let (p, k_next) = policy_step(dm, k_gain, &cfg.q, &cfg.r, alpha_trial, cfg.ls_rcond)?;
        let spectrum = sym_spectrum(&p)?;
        let jump = sym_spectrum(&(&p - &reference))?.norm2();
        if is_positive_definite(spectrum, cfg.pd_tol) && jump < cfg.sigma {
            current = trial;
            reference = p.clone();
            last_accepted = Some((p, k_next));
            accepted += 1;
        } else {
            break;
        }
    }

    match last_accepted {
        Some((value, gain)) => Ok(AlphaStep {
            alpha_steps: current,
            value,
            gain,
            accepted,
        }),
        None => {
            let alpha = current as f64 * eta;
            let (value, gain) = policy_step(dm, k_gain, &cfg.q, &cfg.r, alpha, cfg.ls_rcond)?;
            Ok(AlphaStep {
                alpha_steps: current,
                value,
                gain,
                accepted: 0,
            })
        }
    }
}

/// Learns the optimal gain for `(Q, R)` from data alone, starting at the
/// zero gain under damping `alpha0` and ending with undamped policy
/// iteration. Requires `Q` positive definite; for merely semidefinite
/// weights use [`learn_lqr_two_phase`].
pub fn learn_lqr(dm: &DataMatrices, cfg: &LearnerConfig) -> Result<LearnOutcome, AdpError> {
    if cfg.step_count == 0 || cfg.alpha0 <= 0.0 || cfg.alpha0.is_nan() {
        return Err(AdpError::BadInput(
            "alpha0 and step_count must be positive".into(),
        ));
    }
    let n = dm.n;
    let m = dm.m;
    let eta = cfg.eta();

    let mut alpha_steps = cfg.step_count;
    let mut gain = DMatrix::<f64>::zeros(m, n);
    let mut value_prev = DMatrix::<f64>::zeros(n, n);
    let mut iterates = vec![PolicyIterate {
        k: 0,
        alpha: cfg.alpha0,
        gain: gain.clone(),
        value: None,
        lambda_max_p: None,
    }];
    let mut k = 0usize;
    let mut stalled_rounds = 0usize;

    while alpha_steps >= 1 {
        let step = decrease_alpha(dm, alpha_steps, &gain, &value_prev, cfg)?;
        k += 1;
        if step.accepted == 0 {
            stalled_rounds += 1;
            if stalled_rounds >= cfg.max_outer {
                return Err(AdpError::AlphaStalled {
                    alpha: step.alpha_steps as f64 * eta,
                    calls: stalled_rounds,
                });
            }
        } else {
            stalled_rounds = 0;
        }
        alpha_steps = step.alpha_steps;
        let lambda = sym_spectrum(&step.value)?.max;
        gain = step.gain;
        value_prev = step.value.clone();
        iterates.push(PolicyIterate {
            k,
            alpha: alpha_steps as f64 * eta,
            gain: gain.clone(),
            value: Some(step.value),
            lambda_max_p: Some(lambda),
        });
    }

    // Undamped phase: plain policy iteration at alpha = 0.
    run_undamped(dm, cfg, &mut gain, &mut iterates, &mut k)?;
    Ok(LearnOutcome {
        gain,
        history: LearnHistory {
            iterates,
            status: TerminalStatus::Converged,
        },
    })
}

fn run_undamped(
    dm: &DataMatrices,
    cfg: &LearnerConfig,
    gain: &mut DMatrix<f64>,
    iterates: &mut Vec<PolicyIterate>,
    k: &mut usize,
) -> Result<(), AdpError> {
    for _ in 0..cfg.max_outer {
        let (p, k_next) = policy_step(dm, gain, &cfg.q, &cfg.r, 0.0, cfg.ls_rcond)?;
        *k += 1;
        let previous_norm = gain.norm();
        let change = (&k_next - &*gain).norm();
        let lambda = sym_spectrum(&p)?.max;
        *gain = k_next;
        iterates.push(PolicyIterate {
            k: *k,
            alpha: 0.0,
            gain: gain.clone(),
            value: Some(p),
            lambda_max_p: Some(lambda),
        });
        // the zero-gain start has no meaningful relative change
        if previous_norm > 0.0 && change / previous_norm < cfg.epsilon {
            return Ok(());
        }
    }
    Err(AdpError::IterationCap { iterations: *k })
}

/// Handles positive-semidefinite `Q`: first learns a stabilizing gain with
/// the identity weight, then runs undamped policy iteration with the true
/// `Q` from that gain and returns its limit.
pub fn learn_lqr_two_phase(
    dm: &DataMatrices,
    cfg: &LearnerConfig,
) -> Result<LearnOutcome, AdpError> {
    let mut surrogate = cfg.clone();
    surrogate.q = DMatrix::identity(dm.n, dm.n);
    let phase1 = learn_lqr(dm, &surrogate)?;

    let mut gain = phase1.gain;
    let mut iterates = phase1.history.iterates;
    let mut k = iterates.last().map_or(0, |it| it.k);
    run_undamped(dm, cfg, &mut gain, &mut iterates, &mut k)?;
    Ok(LearnOutcome {
        gain,
        history: LearnHistory {
            iterates,
            status: TerminalStatus::Converged,
        },
    })
}

/// Doubling search for a damping that certifies `A - alpha I` Hurwitz from
/// data alone: the smallest tested power of two for which evaluating the
/// zero gain yields a positive-definite value matrix of norm below `sigma`.
pub fn find_initial_alpha(dm: &DataMatrices, cfg: &LearnerConfig) -> Result<f64, AdpError> {
    const LIMIT: f64 = 1_073_741_824.0; // 2^30
    let zero_gain = DMatrix::<f64>::zeros(dm.m, dm.n);
    let mut alpha = 1.0;
    while alpha <= LIMIT {
        let (p, _) = policy_step(dm, &zero_gain, &cfg.q, &cfg.r, alpha, cfg.ls_rcond)?;
        let spectrum = sym_spectrum(&p)?;
        if is_positive_definite(spectrum, cfg.pd_tol) && spectrum.norm2() < cfg.sigma {
            return Ok(alpha);
        }
        alpha *= 2.0;
    }
    Err(AdpError::AlphaSearchExhausted { limit: LIMIT })
}
