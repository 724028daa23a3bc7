//! Data-driven synthesis of a graph-structured stabilizing gain.
//!
//! Given a centralized stabilizing gain `K_s` (from the learner) and the same
//! data matrices, the feasibility problem
//!
//! ```text
//! find  P_d, D, E
//! s.t.  Theta(K_s) (nu(P_d); vec(E)) = -I_x nu(D)
//!       D >= cI,  P_d >= cI,  P_d structured
//! ```
//!
//! is solved as a trace-minimization SDP. Under the excitation rank
//! condition the equality uniquely determines `(E, D)` from `P_d`, so the
//! solver eliminates them through one least-squares factorization computed up
//! front and runs an interior-point method purely in the free (allowed-block)
//! coordinates of `P_d`. Forbidden blocks never enter the variable vector,
//! which makes the returned certificate structured exactly rather than
//! approximately. The final gain is `K_d = s R'^-1 E` with the scaling `s`
//! chosen so the closed loop inherits a Lyapunov decrease from `P_d`.

use std::fmt;
use std::io::Write;

use nalgebra::{DMatrix, DVector};

use crate::adp::{assemble_ls, learn_lqr, sym_spectrum, AdpError, LearnerConfig};
use crate::barrier::{minimize, AffineBlock, BarrierError, BarrierParams, BarrierProblem};
use crate::simulate::{nu, nu_inverse, sym_vec_len, DataMatrices};
use crate::sysmodel::{BlockMask, BlockPartition, InteractionGraph, ModelError, SparsityStructure};

pub const DEFAULT_SAFETY: f64 = 1.01;
pub const DEFAULT_SDP_TOL: f64 = 1e-8;
pub const DEFAULT_MAX_SDP_ITER: usize = 200;

/// Phase-1 margin below which the structured feasibility problem is declared
/// infeasible.
const INFEASIBILITY_MARGIN: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub enum SdpError {
    /// No structured certificate exists for this graph and plant: the
    /// best achievable joint eigenvalue margin is `margin <= 0`.
    Infeasible {
        margin: f64,
    },
    NumericalFailure(String),
    NotPositiveDefinite(String),
    BadInput(String),
}

impl fmt::Display for SdpError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SdpError::Infeasible { margin } => write!(
                f,
                "structured stabilization is infeasible (best eigenvalue margin {margin:.3e})"
            ),
            SdpError::NumericalFailure(msg) => write!(f, "SDP solver failed: {msg}"),
            SdpError::NotPositiveDefinite(msg) => write!(f, "not positive definite: {msg}"),
            SdpError::BadInput(msg) => write!(f, "bad input: {msg}"),
        }
    }
}

impl std::error::Error for SdpError {}

impl From<BarrierError> for SdpError {
    fn from(e: BarrierError) -> Self {
        SdpError::NumericalFailure(e.to_string())
    }
}

/// Error of the full distributed pipeline, keeping the failing phase
/// distinguishable.
#[derive(Debug, Clone, PartialEq)]
pub enum DistributedError {
    Learning(AdpError),
    Synthesis(SdpError),
    Model(ModelError),
}

impl fmt::Display for DistributedError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DistributedError::Learning(e) => write!(f, "centralized learning failed: {e}"),
            DistributedError::Synthesis(e) => write!(f, "structured synthesis failed: {e}"),
            DistributedError::Model(e) => write!(f, "model error: {e}"),
        }
    }
}

impl std::error::Error for DistributedError {}

impl From<AdpError> for DistributedError {
    fn from(e: AdpError) -> Self {
        DistributedError::Learning(e)
    }
}

impl From<SdpError> for DistributedError {
    fn from(e: SdpError) -> Self {
        DistributedError::Synthesis(e)
    }
}

impl From<ModelError> for DistributedError {
    fn from(e: ModelError) -> Self {
        DistributedError::Model(e)
    }
}

/// Knobs of the structured synthesis stage.
#[derive(Debug, Clone, PartialEq)]
pub struct SdpConfig {
    /// Lower eigenvalue floor for both the certificate and its decrement.
    pub c: f64,
    /// Block-diagonal input weight used by the scaling rule.
    pub r_prime: DMatrix<f64>,
    /// Multiplier (>= 1) on the scaling lower bound.
    pub safety: f64,
    pub sdp_tol: f64,
    pub max_sdp_iter: usize,
}

impl SdpConfig {
    pub fn new(c: f64, r_prime: DMatrix<f64>) -> Self {
        Self {
            c,
            r_prime,
            safety: DEFAULT_SAFETY,
            sdp_tol: DEFAULT_SDP_TOL,
            max_sdp_iter: DEFAULT_MAX_SDP_ITER,
        }
    }
}

/// Feasibility and structure diagnostics of a synthesis run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthesisResiduals {
    /// `|Theta_s (nu(P_d); vec(E)) + I_x nu(D)|_2`.
    pub equality_residual: f64,
    pub min_eig_d: f64,
    pub min_eig_p: f64,
    pub structure_violation_p: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistributedSynthesisResult {
    pub p_d: DMatrix<f64>,
    pub d: DMatrix<f64>,
    pub e: DMatrix<f64>,
    pub s: f64,
    pub k_d: DMatrix<f64>,
    pub residuals: SynthesisResiduals,
}

impl DistributedSynthesisResult {
    /// CSV bundle: the three matrices as labeled sections plus one summary
    /// line with the scaling and residuals.
    pub fn to_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let mut write_matrix = |name: &str, m: &DMatrix<f64>| -> std::io::Result<()> {
            writeln!(w, "matrix,{name},{},{}", m.nrows(), m.ncols())?;
            for i in 0..m.nrows() {
                let row: Vec<String> = m.row(i).iter().map(|v| format!("{v:.16e}")).collect();
                writeln!(w, "{}", row.join(","))?;
            }
            Ok(())
        };
        write_matrix("K_d", &self.k_d)?;
        write_matrix("P_d", &self.p_d)?;
        write_matrix("D", &self.d)?;
        writeln!(
            w,
            "summary,s,trace_P_d,equality_residual,min_eig_D,min_eig_P,structure_violation_P"
        )?;
        writeln!(
            w,
            "summary,{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}",
            self.s,
            self.p_d.trace(),
            self.residuals.equality_residual,
            self.residuals.min_eig_d,
            self.residuals.min_eig_p,
            self.residuals.structure_violation_p
        )
    }
}

/// Constraint matrix of the data-based feasibility form: the same `Theta` as
/// the learner's regression at zero damping, paired with `I_x` because the
/// right-hand side `-I_x nu(D)` is a variable here.
pub fn assemble_stab(
    dm: &DataMatrices,
    k_s: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>), AdpError> {
    let zero_q = DMatrix::<f64>::zeros(dm.n, dm.n);
    let (theta, _) = assemble_ls(dm, k_s, &zero_q, r, 0.0)?;
    Ok((theta, dm.i_x.clone()))
}

/// Indices of the `nu(P)` coordinates that belong to allowed blocks, plus a
/// flag for diagonal coordinates (trace contributions).
fn free_coordinates(p_mask: &BlockMask, partition: &BlockPartition) -> (Vec<usize>, Vec<bool>) {
    let n = partition.total_states();
    let block_of: Vec<usize> = (0..partition.agent_count())
        .flat_map(|a| std::iter::repeat_n(a, partition.state_dims()[a]))
        .collect();
    let mut free = Vec::new();
    let mut diagonal = Vec::new();
    let mut idx = 0;
    for i in 0..n {
        for j in i..n {
            if p_mask.allowed(block_of[i], block_of[j]) {
                free.push(idx);
                diagonal.push(i == j);
            }
            idx += 1;
        }
    }
    (free, diagonal)
}

/// Linear maps from the free certificate coordinates to the full triple,
/// derived once from the data: `(vec(E); nu(D)) = W p_free`.
struct EliminationMap {
    n: usize,
    m: usize,
    free: Vec<usize>,
    diagonal: Vec<bool>,
    /// `mn x q` map to `vec(E)`.
    w_e: DMatrix<f64>,
    /// `n(n+1)/2 x q` map to `nu(D)`.
    w_d: DMatrix<f64>,
}

impl EliminationMap {
    fn build(
        theta_s: &DMatrix<f64>,
        i_x: &DMatrix<f64>,
        p_mask: &BlockMask,
        partition: &BlockPartition,
        rcond: f64,
    ) -> Result<Self, SdpError> {
        let n = partition.total_states();
        let m = partition.total_inputs();
        let nn2 = sym_vec_len(n);
        let z = theta_s.nrows();
        if theta_s.ncols() != nn2 + m * n || i_x.nrows() != z || i_x.ncols() != nn2 {
            return Err(SdpError::BadInput(
                "constraint matrices do not match the partition dimensions".into(),
            ));
        }
        let (free, diagonal) = free_coordinates(p_mask, partition);
        let q = free.len();

        // [Theta_E | I_x] (vec(E); nu(D)) = -Theta_P nu(P): full column rank
        // under the excitation condition, so (E, D) is a linear function of
        // the free P coordinates.
        let unknowns = m * n + nn2;
        let mut lhs = DMatrix::zeros(z, unknowns);
        lhs.view_mut((0, 0), (z, m * n))
            .copy_from(&theta_s.view((0, nn2), (z, m * n)));
        lhs.view_mut((0, m * n), (z, nn2)).copy_from(i_x);
        let svd = nalgebra::linalg::SVD::try_new(lhs, true, true, f64::EPSILON, 100_000)
            .ok_or_else(|| SdpError::NumericalFailure("SVD did not converge".into()))?;
        let sigma_max = svd.singular_values.max();
        let rank = svd
            .singular_values
            .iter()
            .filter(|&&s| s > rcond * sigma_max)
            .count();
        if rank < unknowns {
            return Err(SdpError::NumericalFailure(format!(
                "elimination system is rank deficient ({rank} of {unknowns}); \
                 the excitation rank condition does not hold"
            )));
        }

        let mut w = DMatrix::zeros(unknowns, q);
        for (col, &coord) in free.iter().enumerate() {
            let rhs = -theta_s.column(coord).into_owned();
            let sol = svd
                .solve(&rhs, rcond * sigma_max)
                .map_err(|msg| SdpError::NumericalFailure(msg.into()))?;
            w.column_mut(col).copy_from(&sol);
        }
        Ok(Self {
            n,
            m,
            free,
            diagonal,
            w_e: w.view((0, 0), (m * n, q)).into_owned(),
            w_d: w.view((m * n, 0), (nn2, q)).into_owned(),
        })
    }

    fn certificate(&self, p_free: &DVector<f64>) -> DMatrix<f64> {
        let mut full = DVector::zeros(sym_vec_len(self.n));
        for (col, &coord) in self.free.iter().enumerate() {
            full[coord] = p_free[col];
        }
        nu_inverse(&full, self.n).expect("free coordinates form a valid half-vectorization")
    }

    fn decrement(&self, p_free: &DVector<f64>) -> DMatrix<f64> {
        let d_vec = &self.w_d * p_free;
        nu_inverse(&d_vec, self.n).expect("nu coordinates of D are well formed")
    }

    fn gain_factor(&self, p_free: &DVector<f64>) -> DMatrix<f64> {
        let e_vec = &self.w_e * p_free;
        DMatrix::from_column_slice(self.m, self.n, e_vec.as_slice())
    }

    /// Coefficient matrices of `P` and `D` per free coordinate.
    fn basis(&self) -> (Vec<DMatrix<f64>>, Vec<DMatrix<f64>>) {
        let q = self.free.len();
        let mut p_basis = Vec::with_capacity(q);
        let mut d_basis = Vec::with_capacity(q);
        for col in 0..q {
            let mut unit = DVector::zeros(q);
            unit[col] = 1.0;
            p_basis.push(self.certificate(&unit));
            d_basis.push(self.decrement(&unit));
        }
        (p_basis, d_basis)
    }
}

/// Solves the trace-minimization SDP over structured certificates.
///
/// Phase 1 maximizes the joint eigenvalue margin of `(P, D)` at unit trace to
/// find a strictly feasible interior point (or prove there is none); phase 2
/// scales it past the `c` floor and minimizes `trace(P_d)` along the central
/// path. Forbidden blocks of `P_d` are exactly zero by construction.
pub type CertificateTriple = (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>);

pub fn solve_structured_sdp(
    theta_s: &DMatrix<f64>,
    i_x: &DMatrix<f64>,
    structure: &SparsityStructure,
    partition: &BlockPartition,
    cfg: &SdpConfig,
) -> Result<CertificateTriple, SdpError> {
    if cfg.c <= 0.0 || cfg.c.is_nan() {
        return Err(SdpError::BadInput(
            "the eigenvalue floor c must be positive".into(),
        ));
    }
    let map = EliminationMap::build(theta_s, i_x, structure.p_mask(), partition, 1e-10)?;
    let n = map.n;
    let q = map.free.len();
    let (p_basis, d_basis) = map.basis();
    let eye = DMatrix::<f64>::identity(n, n);

    // Phase 1: maximize t subject to P(p) >= tI, D(p) >= tI, trace(P(p)) = n.
    // The trace constraint is eliminated by parameterizing p = p0 + N z with
    // trace(P(p0)) = n and trace(P(N e_j)) = 0.
    let p0 = DVector::from_fn(q, |i, _| if map.diagonal[i] { 1.0 } else { 0.0 });
    let diag_idx: Vec<usize> = (0..q).filter(|&i| map.diagonal[i]).collect();
    let off_idx: Vec<usize> = (0..q).filter(|&i| !map.diagonal[i]).collect();
    let mut null_basis: Vec<DVector<f64>> = Vec::with_capacity(q - 1);
    for &i in &off_idx {
        let mut v = DVector::zeros(q);
        v[i] = 1.0;
        null_basis.push(v);
    }
    for pair in diag_idx.windows(2) {
        let mut v = DVector::zeros(q);
        v[pair[0]] = 1.0;
        v[pair[1]] = -1.0;
        null_basis.push(v);
    }

    let combine = |basis: &[DMatrix<f64>], weights: &DVector<f64>| -> DMatrix<f64> {
        let mut out = DMatrix::zeros(n, n);
        for (w, g) in weights.iter().zip(basis) {
            if *w != 0.0 {
                out += g * *w;
            }
        }
        out
    };

    let phase1_vars = null_basis.len() + 1; // (z, t)
    let mut p_block = AffineBlock {
        base: combine(&p_basis, &p0),
        coeffs: Vec::new(),
    };
    let mut d_block = AffineBlock {
        base: combine(&d_basis, &p0),
        coeffs: Vec::new(),
    };
    for v in &null_basis {
        p_block.coeffs.push(combine(&p_basis, v));
        d_block.coeffs.push(combine(&d_basis, v));
    }
    p_block.coeffs.push(-&eye);
    d_block.coeffs.push(-&eye);

    let mut objective = DVector::zeros(phase1_vars);
    objective[phase1_vars - 1] = -1.0; // maximize t
    let margin0 = sym_spectrum(&p_block.base)
        .map_err(|e| SdpError::NumericalFailure(e.to_string()))?
        .min
        .min(
            sym_spectrum(&d_block.base)
                .map_err(|e| SdpError::NumericalFailure(e.to_string()))?
                .min,
        );
    let mut x0 = DVector::zeros(phase1_vars);
    x0[phase1_vars - 1] = margin0 - 0.1 * (1.0 + margin0.abs());

    let params = BarrierParams {
        tol: cfg.sdp_tol.max(1e-10),
        mu_reduction: 0.2,
        max_stages: cfg.max_sdp_iter,
        max_newton: 60,
    };
    let go_margin = 1e-3;
    let stop = move |x: &DVector<f64>| x[phase1_vars - 1] >= go_margin;
    let problem = BarrierProblem {
        objective,
        blocks: vec![p_block, d_block],
    };
    let phase1 = minimize(&problem, &x0, &params, Some(&stop))?;
    let margin = phase1[phase1_vars - 1];
    if margin <= INFEASIBILITY_MARGIN {
        return Err(SdpError::Infeasible { margin });
    }

    let mut p_feasible = p0.clone();
    for (v, z) in null_basis.iter().zip(phase1.iter()) {
        p_feasible += v * *z;
    }

    // Scale the interior point past the c floor with headroom.
    let lam_p = sym_spectrum(&map.certificate(&p_feasible))
        .map_err(|e| SdpError::NumericalFailure(e.to_string()))?
        .min;
    let lam_d = sym_spectrum(&map.decrement(&p_feasible))
        .map_err(|e| SdpError::NumericalFailure(e.to_string()))?
        .min;
    let floor = lam_p.min(lam_d);
    if floor <= 0.0 {
        return Err(SdpError::Infeasible { margin: floor });
    }
    let p_start = &p_feasible * (1.25 * cfg.c / floor);

    // Phase 2: minimize trace(P(p)) subject to P(p) >= cI, D(p) >= cI.
    let trace_coeffs = DVector::from_fn(q, |i, _| p_basis[i].trace());
    let blocks = vec![
        AffineBlock {
            base: -&eye * cfg.c,
            coeffs: p_basis.clone(),
        },
        AffineBlock {
            base: -&eye * cfg.c,
            coeffs: d_basis.clone(),
        },
    ];
    let problem = BarrierProblem {
        objective: trace_coeffs,
        blocks,
    };
    let p_opt = minimize(&problem, &p_start, &params, None)?;

    Ok((
        map.certificate(&p_opt),
        map.decrement(&p_opt),
        map.gain_factor(&p_opt),
    ))
}

/// Applies the scaling rule `s = safety * lam_max(K_s' R' K_s) / lam_min(D)`
/// (with `s = safety` when the numerator vanishes) and projects the scaled
/// gain `s R'^-1 E` onto the gain mask so its forbidden blocks are exactly
/// zero.
pub fn scale_gain(
    k_s: &DMatrix<f64>,
    r_prime: &DMatrix<f64>,
    d: &DMatrix<f64>,
    e: &DMatrix<f64>,
    k_mask: &BlockMask,
    safety: f64,
) -> Result<(f64, DMatrix<f64>), SdpError> {
    let d_spectrum = sym_spectrum(d).map_err(|e| SdpError::NumericalFailure(e.to_string()))?;
    if d_spectrum.min <= 0.0 {
        return Err(SdpError::NotPositiveDefinite(format!(
            "D has minimum eigenvalue {:.3e}",
            d_spectrum.min
        )));
    }
    let weighted = k_s.transpose() * r_prime * k_s;
    let numerator = sym_spectrum(&weighted)
        .map_err(|e| SdpError::NumericalFailure(e.to_string()))?
        .max;
    let s = if numerator == 0.0 {
        safety
    } else {
        safety * numerator / d_spectrum.min
    };
    let r_lu = r_prime.clone().lu();
    let unscaled = r_lu
        .solve(e)
        .ok_or_else(|| SdpError::NotPositiveDefinite("R' is singular".into()))?;
    let k_d = k_mask
        .project(&(unscaled * s))
        .map_err(|err| SdpError::BadInput(err.to_string()))?;
    Ok((s, k_d))
}

/// Full distributed pipeline: learn a centralized stabilizing gain with unit
/// weights, then synthesize the structured gain from the same data.
pub fn learn_distributed(
    dm: &DataMatrices,
    graph: &InteractionGraph,
    partition: &BlockPartition,
    cfg: &SdpConfig,
    learner_cfg: &LearnerConfig,
) -> Result<DistributedSynthesisResult, DistributedError> {
    let n = partition.total_states();
    let m = partition.total_inputs();
    if n != dm.n || m != dm.m {
        return Err(DistributedError::Synthesis(SdpError::BadInput(format!(
            "partition is {n}x{m}, data is {}x{}",
            dm.n, dm.m
        ))));
    }
    let structure = SparsityStructure::new(partition, graph)?;
    if cfg.r_prime.nrows() != m || cfg.r_prime.ncols() != m {
        return Err(DistributedError::Synthesis(SdpError::BadInput(
            "R' does not match the input dimension".into(),
        )));
    }
    let r_violation = structure.r_mask().violation(&cfg.r_prime)?;
    if r_violation > 0.0 {
        return Err(DistributedError::Synthesis(SdpError::BadInput(format!(
            "R' must be block-diagonal; off-block magnitude {r_violation:.3e}"
        ))));
    }

    let mut centralized_cfg = learner_cfg.clone();
    centralized_cfg.q = DMatrix::identity(n, n);
    centralized_cfg.r = DMatrix::identity(m, m);
    let k_s = learn_lqr(dm, &centralized_cfg)?.gain;

    let r_assembly = DMatrix::<f64>::identity(m, m);
    let (theta_s, i_x) = assemble_stab(dm, &k_s, &r_assembly)?;
    let (p_d, d, e) = solve_structured_sdp(&theta_s, &i_x, &structure, partition, cfg)?;
    let (s, k_d) = scale_gain(&k_s, &cfg.r_prime, &d, &e, structure.k_mask(), cfg.safety)?;

    let residuals = synthesis_residuals(&theta_s, &i_x, &structure, &p_d, &d, &e)
        .map_err(DistributedError::Synthesis)?;
    Ok(DistributedSynthesisResult {
        p_d,
        d,
        e,
        s,
        k_d,
        residuals,
    })
}

/// Diagnostics for a candidate triple against the data equality and the
/// structure/eigenvalue requirements.
pub fn synthesis_residuals(
    theta_s: &DMatrix<f64>,
    i_x: &DMatrix<f64>,
    structure: &SparsityStructure,
    p_d: &DMatrix<f64>,
    d: &DMatrix<f64>,
    e: &DMatrix<f64>,
) -> Result<SynthesisResiduals, SdpError> {
    let bad = |e: AdpError| SdpError::NumericalFailure(e.to_string());
    let sim = |e: crate::simulate::SimError| SdpError::BadInput(e.to_string());
    let mut stacked = DVector::zeros(theta_s.ncols());
    let nn2 = sym_vec_len(p_d.nrows());
    stacked.rows_mut(0, nn2).copy_from(&nu(p_d).map_err(sim)?);
    stacked
        .rows_mut(nn2, e.nrows() * e.ncols())
        .copy_from(&DVector::from_column_slice(e.as_slice()));
    let equality_residual = (theta_s * stacked + i_x * nu(d).map_err(sim)?).norm();
    Ok(SynthesisResiduals {
        equality_residual,
        min_eig_d: sym_spectrum(d).map_err(bad)?.min,
        min_eig_p: sym_spectrum(p_d).map_err(bad)?.min,
        structure_violation_p: structure
            .p_mask()
            .violation(p_d)
            .map_err(|e| SdpError::BadInput(e.to_string()))?,
    })
}
