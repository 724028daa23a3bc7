//! Trajectory generation and compression into the quadrature data matrices
//! that form the learner's only view of the plant.
//!
//! The pipeline is: excite the plant with a seeded sum of sinusoids, integrate
//! `x' = Ax + Bu(t, x)` with fixed-step RK4, then reduce the fine-grid samples
//! to four matrices per sampling interval `[k dt, (k+1) dt]`:
//!
//! ```text
//! delta_xx[k] = mu(x((k+1)dt)) - mu(x(k dt))     (exact endpoint difference)
//! i_x[k]     ~= integral of mu(x) ds             (trapezoid on the fine grid)
//! i_xx[k]    ~= integral of x (x) x ds
//! i_xu[k]    ~= integral of x (x) u ds
//! ```
//!
//! `mu`/`nu` are the half-vectorization maps with the duality
//! `mu(y)' nu(X) = y' X y` for symmetric `X`.

use std::fmt;
use std::io::{BufRead, Write};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::sysmodel::LtiSystem;

/// State-norm bound beyond which an open-loop experiment is abandoned.
pub const DIVERGENCE_GUARD: f64 = 1e6;

/// Default probe frequency band, rad per unit time.
pub const DEFAULT_FREQUENCY_RANGE: (f64, f64) = (0.5, 50.0);

/// Default relative singular-value tolerance for the excitation rank test.
pub const DEFAULT_RANK_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub enum SimError {
    /// State left the guard region or became non-finite; `t` is the first
    /// offending time.
    Diverged {
        t: f64,
        norm: f64,
    },
    /// Duration is not a positive integer multiple of the fine step.
    BadDuration {
        duration: f64,
        fine_step: f64,
    },
    /// Sampling interval is not an integer multiple of the fine step.
    GridMismatch {
        dt: f64,
        fine_step: f64,
    },
    /// Trajectory does not cover the requested number of intervals.
    TooShort {
        needed: usize,
        available: usize,
    },
    /// `nu` was handed a matrix that is not symmetric within tolerance.
    Asymmetric {
        deviation: f64,
    },
    DimensionMismatch {
        what: String,
    },
    Io(String),
    Parse(String),
}

impl fmt::Display for SimError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SimError::Diverged { t, norm } => {
                write!(f, "state diverged at t = {t} (|x| = {norm:.3e})")
            }
            SimError::BadDuration {
                duration,
                fine_step,
            } => {
                write!(
                    f,
                    "duration {duration} is not a positive multiple of step {fine_step}"
                )
            }
            SimError::GridMismatch { dt, fine_step } => {
                write!(
                    f,
                    "dt = {dt} is not an integer multiple of fine step {fine_step}"
                )
            }
            SimError::TooShort { needed, available } => {
                write!(f, "trajectory has {available} samples, {needed} required")
            }
            SimError::Asymmetric { deviation } => {
                write!(
                    f,
                    "matrix is not symmetric (relative deviation {deviation:.3e})"
                )
            }
            SimError::DimensionMismatch { what } => write!(f, "dimension mismatch: {what}"),
            SimError::Io(msg) => write!(f, "io error: {msg}"),
            SimError::Parse(msg) => write!(f, "parse error: {msg}"),
        }
    }
}

impl std::error::Error for SimError {}

/// Length of the half-vectorization of a symmetric `n x n` matrix.
pub fn sym_vec_len(n: usize) -> usize {
    n * (n + 1) / 2
}

/// Half-vectorization of the outer product of `y` with itself:
/// `(y1^2, y1 y2, ..., y1 yn, y2^2, ..., yn^2)`.
pub fn mu(y: &DVector<f64>) -> DVector<f64> {
    let n = y.len();
    let mut out = DVector::zeros(sym_vec_len(n));
    let mut k = 0;
    for i in 0..n {
        for j in i..n {
            out[k] = y[i] * y[j];
            k += 1;
        }
    }
    out
}

/// Half-vectorization of a symmetric matrix with doubled off-diagonal
/// entries, ordered like [`mu`]; satisfies `mu(y)' nu(X) = y' X y`.
pub fn nu(x: &DMatrix<f64>) -> Result<DVector<f64>, SimError> {
    let n = x.nrows();
    if x.ncols() != n {
        return Err(SimError::DimensionMismatch {
            what: "nu input must be square".into(),
        });
    }
    let deviation = (x - x.transpose()).norm() / (1.0 + x.norm());
    if deviation > 1e-10 {
        return Err(SimError::Asymmetric { deviation });
    }
    let mut out = DVector::zeros(sym_vec_len(n));
    let mut k = 0;
    for i in 0..n {
        for j in i..n {
            out[k] = if i == j { x[(i, i)] } else { 2.0 * x[(i, j)] };
            k += 1;
        }
    }
    Ok(out)
}

/// Inverse of [`nu`]: rebuilds the symmetric matrix from its
/// half-vectorization.
pub fn nu_inverse(v: &DVector<f64>, n: usize) -> Result<DMatrix<f64>, SimError> {
    if v.len() != sym_vec_len(n) {
        return Err(SimError::DimensionMismatch {
            what: format!(
                "nu vector has length {}, expected {}",
                v.len(),
                sym_vec_len(n)
            ),
        });
    }
    let mut out = DMatrix::zeros(n, n);
    let mut k = 0;
    for i in 0..n {
        for j in i..n {
            if i == j {
                out[(i, i)] = v[k];
            } else {
                out[(i, j)] = 0.5 * v[k];
                out[(j, i)] = 0.5 * v[k];
            }
            k += 1;
        }
    }
    Ok(out)
}

/// Kronecker product of two vectors, `a (x) b`, stacked `a`-major.
pub fn kron_vec(a: &DVector<f64>, b: &DVector<f64>) -> DVector<f64> {
    let mut out = DVector::zeros(a.len() * b.len());
    let mut k = 0;
    for i in 0..a.len() {
        for j in 0..b.len() {
            out[k] = a[i] * b[j];
            k += 1;
        }
    }
    out
}

/// One sinusoid of the probing signal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sinusoid {
    pub amplitude: f64,
    /// Angular frequency, rad per unit time.
    pub frequency: f64,
    pub phase: f64,
}

/// Exploration input `u(t) = -behavior_gain x(t) + probe(t)` with a
/// per-channel sum-of-sinusoids probe, reproducible from a seed.
#[derive(Debug, Clone, PartialEq)]
pub struct ExplorationPolicy {
    pub behavior_gain: DMatrix<f64>,
    /// One sinusoid list per input channel.
    pub probe: Vec<Vec<Sinusoid>>,
    pub seed: u64,
}

impl ExplorationPolicy {
    /// Frequencies needed per channel so the probe can excite all
    /// `n(n+1)/2 + mn` directions of the regression.
    pub fn default_frequency_count(n: usize, m: usize) -> usize {
        (sym_vec_len(n) + m * n).div_ceil(m)
    }

    /// Open-loop probing with default amplitude 1 and frequencies drawn
    /// uniformly from [`DEFAULT_FREQUENCY_RANGE`].
    pub fn seeded(n: usize, m: usize, seed: u64) -> Self {
        Self::seeded_with(
            n,
            m,
            seed,
            Self::default_frequency_count(n, m),
            1.0,
            DEFAULT_FREQUENCY_RANGE,
        )
    }

    /// Open-loop probing with explicit sinusoid count, amplitude and
    /// frequency band.
    pub fn seeded_with(
        n: usize,
        m: usize,
        seed: u64,
        count_per_channel: usize,
        amplitude: f64,
        frequency_range: (f64, f64),
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (lo, hi) = frequency_range;
        let probe = (0..m)
            .map(|_| {
                (0..count_per_channel)
                    .map(|_| Sinusoid {
                        amplitude,
                        frequency: rng.random_range(lo..hi),
                        phase: rng.random_range(0.0..std::f64::consts::TAU),
                    })
                    .collect()
            })
            .collect();
        Self {
            behavior_gain: DMatrix::zeros(m, n),
            probe,
            seed,
        }
    }

    /// Control applied during data collection at time `t` and state `x`.
    pub fn input_at(&self, t: f64, x: &DVector<f64>) -> DVector<f64> {
        let mut u = -(&self.behavior_gain * x);
        for (channel, sinusoids) in self.probe.iter().enumerate() {
            for s in sinusoids {
                u[channel] += s.amplitude * (s.frequency * t + s.phase).sin();
            }
        }
        u
    }
}

/// Uniformly sampled input/state record on the fine integration grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    fine_step: f64,
    times: Vec<f64>,
    states: Vec<DVector<f64>>,
    inputs: Vec<DVector<f64>>,
}

impl Trajectory {
    /// Builds a trajectory from explicit samples; the time grid must be
    /// uniform with spacing `fine_step`.
    pub fn from_samples<I>(fine_step: f64, samples: I) -> Result<Self, SimError>
    where
        I: IntoIterator<Item = (f64, DVector<f64>, DVector<f64>)>,
    {
        let mut times = Vec::new();
        let mut states = Vec::new();
        let mut inputs = Vec::new();
        for (t, x, u) in samples {
            times.push(t);
            states.push(x);
            inputs.push(u);
        }
        if times.len() < 2 {
            return Err(SimError::TooShort {
                needed: 2,
                available: times.len(),
            });
        }
        for w in times.windows(2) {
            if ((w[1] - w[0]) - fine_step).abs() > 1e-9 * fine_step.max(1e-12) {
                return Err(SimError::BadDuration {
                    duration: w[1] - w[0],
                    fine_step,
                });
            }
        }
        let dims_ok = states.iter().all(|x| x.len() == states[0].len())
            && inputs.iter().all(|u| u.len() == inputs[0].len());
        if !dims_ok {
            return Err(SimError::DimensionMismatch {
                what: "inconsistent sample dimensions".into(),
            });
        }
        Ok(Self {
            fine_step,
            times,
            states,
            inputs,
        })
    }

    pub fn fine_step(&self) -> f64 {
        self.fine_step
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn state_dim(&self) -> usize {
        self.states.first().map_or(0, |x| x.len())
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.first().map_or(0, |u| u.len())
    }

    pub fn sample(&self, k: usize) -> (f64, &DVector<f64>, &DVector<f64>) {
        (self.times[k], &self.states[k], &self.inputs[k])
    }

    /// CSV with header `t,x1..xn,u1..um` and 17 significant digits.
    pub fn to_csv<W: Write>(&self, mut w: W) -> Result<(), SimError> {
        let io = |e: std::io::Error| SimError::Io(e.to_string());
        let n = self.state_dim();
        let m = self.input_dim();
        let mut header = String::from("t");
        for i in 1..=n {
            header.push_str(&format!(",x{i}"));
        }
        for i in 1..=m {
            header.push_str(&format!(",u{i}"));
        }
        writeln!(w, "{header}").map_err(io)?;
        for k in 0..self.len() {
            let mut line = format!("{:.16e}", self.times[k]);
            for v in self.states[k].iter().chain(self.inputs[k].iter()) {
                line.push_str(&format!(",{v:.16e}"));
            }
            writeln!(w, "{line}").map_err(io)?;
        }
        Ok(())
    }

    /// Reads a trajectory written by [`Trajectory::to_csv`]; the state
    /// dimension is recovered from the header.
    pub fn from_csv<R: BufRead>(r: R) -> Result<Self, SimError> {
        let mut lines = r.lines();
        let header = lines
            .next()
            .ok_or_else(|| SimError::Parse("empty file".into()))?
            .map_err(|e| SimError::Io(e.to_string()))?;
        let fields: Vec<&str> = header.trim().split(',').collect();
        if fields.first() != Some(&"t") {
            return Err(SimError::Parse("header must start with 't'".into()));
        }
        let n = fields.iter().filter(|f| f.starts_with('x')).count();
        let m = fields.iter().filter(|f| f.starts_with('u')).count();
        if n == 0 || 1 + n + m != fields.len() {
            return Err(SimError::Parse("header must be t,x1..xn,u1..um".into()));
        }
        let mut times = Vec::new();
        let mut states = Vec::new();
        let mut inputs = Vec::new();
        for line in lines {
            let line = line.map_err(|e| SimError::Io(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let values: Vec<f64> = line
                .trim()
                .split(',')
                .map(|v| v.parse::<f64>().map_err(|e| SimError::Parse(e.to_string())))
                .collect::<Result<_, _>>()?;
            if values.len() != 1 + n + m {
                return Err(SimError::Parse(format!(
                    "row has {} fields, expected {}",
                    values.len(),
                    1 + n + m
                )));
            }
            times.push(values[0]);
            states.push(DVector::from_row_slice(&values[1..1 + n]));
            inputs.push(DVector::from_row_slice(&values[1 + n..]));
        }
        if times.len() < 2 {
            return Err(SimError::TooShort {
                needed: 2,
                available: times.len(),
            });
        }
        let fine_step = times[1] - times[0];
        for w in times.windows(2) {
            if ((w[1] - w[0]) - fine_step).abs() > 1e-9 * fine_step.max(1e-12) {
                return Err(SimError::Parse("non-uniform time grid".into()));
            }
        }
        Ok(Self {
            fine_step,
            times,
            states,
            inputs,
        })
    }
}

/// Integrates `x' = Ax + Bu(t, x)` with classical fixed-step RK4, evaluating
/// the policy at every stage time, and records each fine-grid sample.
pub fn simulate(
    sys: &LtiSystem,
    policy: &ExplorationPolicy,
    x0: &DVector<f64>,
    duration: f64,
    fine_step: f64,
) -> Result<Trajectory, SimError> {
    if x0.len() != sys.state_dim() {
        return Err(SimError::DimensionMismatch {
            what: format!(
                "x0 has length {}, state dimension is {}",
                x0.len(),
                sys.state_dim()
            ),
        });
    }
    if policy.behavior_gain.nrows() != sys.input_dim()
        || policy.behavior_gain.ncols() != sys.state_dim()
        || policy.probe.len() != sys.input_dim()
    {
        return Err(SimError::DimensionMismatch {
            what: "policy does not match the plant's input/state dimensions".into(),
        });
    }
    if fine_step <= 0.0 || duration <= 0.0 || fine_step.is_nan() || duration.is_nan() {
        return Err(SimError::BadDuration {
            duration,
            fine_step,
        });
    }
    let steps_f = duration / fine_step;
    let steps = steps_f.round();
    if steps < 1.0 || (steps_f - steps).abs() > 1e-9 * steps_f.max(1.0) {
        return Err(SimError::BadDuration {
            duration,
            fine_step,
        });
    }
    let steps = steps as usize;

    let h = fine_step;
    let deriv = |t: f64, x: &DVector<f64>| -> DVector<f64> {
        sys.a() * x + sys.b() * policy.input_at(t, x)
    };

    let mut times = Vec::with_capacity(steps + 1);
    let mut states = Vec::with_capacity(steps + 1);
    let mut inputs = Vec::with_capacity(steps + 1);
    let mut x = x0.clone();
    for k in 0..=steps {
        let t = k as f64 * h;
        let norm = x.norm();
        if !norm.is_finite() || norm > DIVERGENCE_GUARD {
            return Err(SimError::Diverged { t, norm });
        }
        times.push(t);
        states.push(x.clone());
        inputs.push(policy.input_at(t, &x));
        if k == steps {
            break;
        }
        let k1 = deriv(t, &x);
        let k2 = deriv(t + 0.5 * h, &(&x + &k1 * (0.5 * h)));
        let k3 = deriv(t + 0.5 * h, &(&x + &k2 * (0.5 * h)));
        let k4 = deriv(t + h, &(&x + &k3 * h));
        x += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
    }
    Ok(Trajectory {
        fine_step,
        times,
        states,
        inputs,
    })
}

/// The learner's entire interface to the dynamics: per-interval endpoint
/// differences of `mu(x)` and trapezoid integrals of `mu(x)`, `x (x) x`,
/// `x (x) u`.
#[derive(Debug, Clone, PartialEq)]
pub struct DataMatrices {
    pub delta_xx: DMatrix<f64>,
    pub i_x: DMatrix<f64>,
    pub i_xx: DMatrix<f64>,
    pub i_xu: DMatrix<f64>,
    pub dt: f64,
    pub interval_count: usize,
    pub n: usize,
    pub m: usize,
}

// Compensated accumulator; the reduction order inside each row is fixed so
// parallel callers see bit-identical results.
#[derive(Clone, Copy, Default)]
struct Kahan {
    sum: f64,
    carry: f64,
}

impl Kahan {
    #[inline]
    fn add(&mut self, v: f64) {
        let y = v - self.carry;
        let t = self.sum + y;
        self.carry = (t - self.sum) - y;
        self.sum = t;
    }
}

/// Reduces a fine-grid trajectory to [`DataMatrices`] over `count` intervals
/// of length `dt`.
pub fn build_data_matrices(
    traj: &Trajectory,
    dt: f64,
    count: usize,
) -> Result<DataMatrices, SimError> {
    let h = traj.fine_step();
    let ratio = dt / h;
    let per_interval = ratio.round();
    if per_interval < 1.0 || (ratio - per_interval).abs() > 1e-9 * ratio.max(1.0) {
        return Err(SimError::GridMismatch { dt, fine_step: h });
    }
    let per_interval = per_interval as usize;
    let needed = count * per_interval + 1;
    if count == 0 || traj.len() < needed {
        return Err(SimError::TooShort {
            needed,
            available: traj.len(),
        });
    }

    let n = traj.state_dim();
    let m = traj.input_dim();
    let nn2 = sym_vec_len(n);
    let mut delta_xx = DMatrix::zeros(count, nn2);
    let mut i_x = DMatrix::zeros(count, nn2);
    let mut i_xx = DMatrix::zeros(count, n * n);
    let mut i_xu = DMatrix::zeros(count, m * n);

    for k in 0..count {
        let start = k * per_interval;
        let end = start + per_interval;

        let mu_diff = mu(&traj.states[end]) - mu(&traj.states[start]);
        delta_xx.row_mut(k).tr_copy_from(&mu_diff);

        let mut acc_x = vec![Kahan::default(); nn2];
        let mut acc_xx = vec![Kahan::default(); n * n];
        let mut acc_xu = vec![Kahan::default(); m * n];
        for idx in start..=end {
            let w = if idx == start || idx == end {
                0.5 * h
            } else {
                h
            };
            let x = &traj.states[idx];
            let u = &traj.inputs[idx];
            let mut c = 0;
            for i in 0..n {
                for j in i..n {
                    acc_x[c].add(w * x[i] * x[j]);
                    c += 1;
                }
            }
            let mut c = 0;
            for i in 0..n {
                for j in 0..n {
                    acc_xx[c].add(w * x[i] * x[j]);
                    c += 1;
                }
            }
            let mut c = 0;
            for i in 0..n {
                for j in 0..m {
                    acc_xu[c].add(w * x[i] * u[j]);
                    c += 1;
                }
            }
        }
        for (c, acc) in acc_x.iter().enumerate() {
            i_x[(k, c)] = acc.sum;
        }
        for (c, acc) in acc_xx.iter().enumerate() {
            i_xx[(k, c)] = acc.sum;
        }
        for (c, acc) in acc_xu.iter().enumerate() {
            i_xu[(k, c)] = acc.sum;
        }
    }

    Ok(DataMatrices {
        delta_xx,
        i_x,
        i_xx,
        i_xu,
        dt,
        interval_count: count,
        n,
        m,
    })
}

/// Settings for a batch of independent one-interval experiments.
///
/// A single long open-loop record of an unstable plant is dominated by the
/// fastest mode after a fraction of a second, which leaves the regression
/// data numerically rank-deficient no matter how the probe is chosen.
/// Restarting from a fresh random state for every sampling interval yields
/// the same per-row integral identities while keeping the rows well scaled
/// and independent.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentPlan {
    pub dt: f64,
    pub interval_count: usize,
    pub fine_step: f64,
    pub seed: u64,
    pub frequency_count: usize,
    pub amplitude: f64,
    pub frequency_range: (f64, f64),
    /// Initial states are drawn uniformly from `[-x0_scale, x0_scale]^n`.
    pub x0_scale: f64,
}

impl ExperimentPlan {
    pub fn for_plant(
        sys: &LtiSystem,
        dt: f64,
        interval_count: usize,
        fine_step: f64,
        seed: u64,
    ) -> Self {
        Self {
            dt,
            interval_count,
            fine_step,
            seed,
            frequency_count: ExplorationPolicy::default_frequency_count(
                sys.state_dim(),
                sys.input_dim(),
            ),
            amplitude: 1.0,
            frequency_range: DEFAULT_FREQUENCY_RANGE,
            x0_scale: 1.0,
        }
    }
}

/// Runs `interval_count` independent experiments of length `dt`, each from a
/// fresh seeded initial state with a freshly drawn probe, and stacks the
/// resulting single-interval rows into one [`DataMatrices`].
pub fn collect_experiments(
    sys: &LtiSystem,
    plan: &ExperimentPlan,
) -> Result<DataMatrices, SimError> {
    if plan.interval_count == 0 {
        return Err(SimError::TooShort {
            needed: 1,
            available: 0,
        });
    }
    let n = sys.state_dim();
    let m = sys.input_dim();
    let mut master = ChaCha8Rng::seed_from_u64(plan.seed);
    let mut parts = Vec::with_capacity(plan.interval_count);
    for _ in 0..plan.interval_count {
        let probe_seed: u64 = master.random();
        let policy = ExplorationPolicy::seeded_with(
            n,
            m,
            probe_seed,
            plan.frequency_count,
            plan.amplitude,
            plan.frequency_range,
        );
        let x0 = DVector::from_fn(n, |_, _| master.random_range(-plan.x0_scale..plan.x0_scale));
        let traj = simulate(sys, &policy, &x0, plan.dt, plan.fine_step)?;
        parts.push(build_data_matrices(&traj, plan.dt, 1)?);
    }
    DataMatrices::stack(&parts)
}

impl DataMatrices {
    /// Number of unknowns in the policy-evaluation regression,
    /// `n(n+1)/2 + mn`.
    pub fn required_rank(&self) -> usize {
        sym_vec_len(self.n) + self.m * self.n
    }

    /// Vertically concatenates data sets with matching dimensions and
    /// sampling interval.
    pub fn stack(parts: &[DataMatrices]) -> Result<DataMatrices, SimError> {
        let first = parts.first().ok_or(SimError::TooShort {
            needed: 1,
            available: 0,
        })?;
        let total: usize = parts.iter().map(|p| p.interval_count).sum();
        let mut out = DataMatrices {
            delta_xx: DMatrix::zeros(total, first.delta_xx.ncols()),
            i_x: DMatrix::zeros(total, first.i_x.ncols()),
            i_xx: DMatrix::zeros(total, first.i_xx.ncols()),
            i_xu: DMatrix::zeros(total, first.i_xu.ncols()),
            dt: first.dt,
            interval_count: total,
            n: first.n,
            m: first.m,
        };
        let mut row = 0;
        for part in parts {
            if part.n != first.n || part.m != first.m {
                return Err(SimError::DimensionMismatch {
                    what: "data sets have mismatched state/input dimensions".into(),
                });
            }
            if (part.dt - first.dt).abs() > 1e-12 * first.dt.max(1.0) {
                return Err(SimError::DimensionMismatch {
                    what: "data sets have mismatched sampling intervals".into(),
                });
            }
            for k in 0..part.interval_count {
                out.delta_xx.row_mut(row).copy_from(&part.delta_xx.row(k));
                out.i_x.row_mut(row).copy_from(&part.i_x.row(k));
                out.i_xx.row_mut(row).copy_from(&part.i_xx.row(k));
                out.i_xu.row_mut(row).copy_from(&part.i_xu.row(k));
                row += 1;
            }
        }
        Ok(out)
    }

    /// Excitation rank test with the default tolerance; see
    /// [`DataMatrices::check_rank_with_tol`].
    pub fn check_rank(&self) -> (bool, usize) {
        self.check_rank_with_tol(DEFAULT_RANK_TOL)
    }

    /// Numerical rank of `(I_x, I_xu)` from its singular values, using the
    /// threshold `rel_tol * sigma_max`. Satisfied iff the rank equals
    /// `n(n+1)/2 + mn`.
    pub fn check_rank_with_tol(&self, rel_tol: f64) -> (bool, usize) {
        let z = self.interval_count;
        let cols = self.required_rank();
        let mut concat = DMatrix::zeros(z, cols);
        concat
            .view_mut((0, 0), (z, self.i_x.ncols()))
            .copy_from(&self.i_x);
        concat
            .view_mut((0, self.i_x.ncols()), (z, self.i_xu.ncols()))
            .copy_from(&self.i_xu);
        let svd = match nalgebra::linalg::SVD::try_new(concat, false, false, f64::EPSILON, 100_000)
        {
            Some(svd) => svd,
            None => return (false, 0),
        };
        let sigma_max = svd.singular_values.max();
        if sigma_max <= 0.0 || sigma_max.is_nan() {
            return (false, 0);
        }
        let rank = svd
            .singular_values
            .iter()
            .filter(|&&s| s > rel_tol * sigma_max)
            .count();
        (rank == cols, rank)
    }

    /// Single-file bundle: a JSON header line recording `n`, `m`, `Z`, `dt`,
    /// then one CSV row per interval holding
    /// `delta_xx | i_x | i_xx | i_xu` concatenated.
    pub fn to_csv<W: Write>(&self, mut w: W) -> Result<(), SimError> {
        let io = |e: std::io::Error| SimError::Io(e.to_string());
        writeln!(
            w,
            "{{\"n\": {}, \"m\": {}, \"z\": {}, \"dt\": {:.16e}}}",
            self.n, self.m, self.interval_count, self.dt
        )
        .map_err(io)?;
        for k in 0..self.interval_count {
            let row: Vec<String> = self
                .delta_xx
                .row(k)
                .iter()
                .chain(self.i_x.row(k).iter())
                .chain(self.i_xx.row(k).iter())
                .chain(self.i_xu.row(k).iter())
                .map(|v| format!("{v:.16e}"))
                .collect();
            writeln!(w, "{}", row.join(",")).map_err(io)?;
        }
        Ok(())
    }

    /// Reads a bundle written by [`DataMatrices::to_csv`].
    pub fn from_csv<R: BufRead>(r: R) -> Result<Self, SimError> {
        let mut lines = r.lines();
        let header = lines
            .next()
            .ok_or_else(|| SimError::Parse("empty file".into()))?
            .map_err(|e| SimError::Io(e.to_string()))?;
        let meta: serde_json::Value =
            serde_json::from_str(&header).map_err(|e| SimError::Parse(e.to_string()))?;
        let get = |key: &str| -> Result<f64, SimError> {
            meta.get(key)
                .and_then(|v| v.as_f64())
                .ok_or_else(|| SimError::Parse(format!("header is missing '{key}'")))
        };
        let n = get("n")? as usize;
        let m = get("m")? as usize;
        let z = get("z")? as usize;
        let dt = get("dt")?;
        let nn2 = sym_vec_len(n);
        let width = 2 * nn2 + n * n + m * n;
        let mut delta_xx = DMatrix::zeros(z, nn2);
        let mut i_x = DMatrix::zeros(z, nn2);
        let mut i_xx = DMatrix::zeros(z, n * n);
        let mut i_xu = DMatrix::zeros(z, m * n);
        let mut k = 0;
        for line in lines {
            let line = line.map_err(|e| SimError::Io(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            if k >= z {
                return Err(SimError::Parse("more rows than declared".into()));
            }
            let values: Vec<f64> = line
                .trim()
                .split(',')
                .map(|v| v.parse::<f64>().map_err(|e| SimError::Parse(e.to_string())))
                .collect::<Result<_, _>>()?;
            if values.len() != width {
                return Err(SimError::Parse(format!(
                    "row has {} fields, expected {width}",
                    values.len()
                )));
            }
            for (c, v) in values[..nn2].iter().enumerate() {
                delta_xx[(k, c)] = *v;
            }
            for (c, v) in values[nn2..2 * nn2].iter().enumerate() {
                i_x[(k, c)] = *v;
            }
            for (c, v) in values[2 * nn2..2 * nn2 + n * n].iter().enumerate() {
                i_xx[(k, c)] = *v;
            }
            for (c, v) in values[2 * nn2 + n * n..].iter().enumerate() {
                i_xu[(k, c)] = *v;
            }
            k += 1;
        }
        if k != z {
            return Err(SimError::Parse(format!("{k} rows found, {z} declared")));
        }
        Ok(Self {
            delta_xx,
            i_x,
            i_xx,
            i_xu,
            dt,
            interval_count: z,
            n,
            m,
        })
    }
}
