//! The batch pipeline behind `relqr run` and `relqr verify`: data
//! collection, learning, optional distributed synthesis, oracle
//! cross-checks, and the CSV outputs.

use std::fs;
use std::io::{BufRead, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use sha2::{Digest, Sha256};

use relqr::adp::{find_initial_alpha, learn_lqr, learn_lqr_two_phase, AdpError, LearnOutcome};
use relqr::distributed::{learn_distributed, DistributedError, SdpError};
use relqr::oracle;
use relqr::simulate::{
    build_data_matrices, collect_experiments, simulate, DataMatrices, ExperimentPlan,
    ExplorationPolicy,
};

use crate::config::Scenario;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_RANK: i32 = 2;
pub const EXIT_ALPHA_STALL: i32 = 3;
pub const EXIT_SDP_INFEASIBLE: i32 = 4;

macro_rules! info {
    ($quiet:expr, $($arg:tt)*) => {
        if !$quiet {
            println!($($arg)*);
        }
    };
}

fn fail(message: &str, code: i32) -> i32 {
    eprintln!("error: {message}");
    code
}

fn adp_exit_code(err: &AdpError) -> i32 {
    match err {
        AdpError::RankDeficient { .. } => EXIT_RANK,
        AdpError::AlphaStalled { .. } => EXIT_ALPHA_STALL,
        _ => EXIT_CONFIG,
    }
}

fn write_matrix_section<W: Write>(w: &mut W, name: &str, m: &DMatrix<f64>) -> std::io::Result<()> {
    writeln!(w, "matrix,{name},{},{}", m.nrows(), m.ncols())?;
    for i in 0..m.nrows() {
        let row: Vec<String> = m.row(i).iter().map(|v| format!("{v:.16e}")).collect();
        writeln!(w, "{}", row.join(","))?;
    }
    Ok(())
}

/// Reads a named matrix back from a sectioned CSV written by
/// [`write_matrix_section`].
fn read_matrix_section(path: &Path, name: &str) -> Option<DMatrix<f64>> {
    let file = fs::File::open(path).ok()?;
    let mut lines = std::io::BufReader::new(file).lines();
    while let Some(Ok(line)) = lines.next() {
        let fields: Vec<&str> = line.trim().split(',').collect();
        if fields.len() == 4 && fields[0] == "matrix" && fields[1] == name {
            let rows: usize = fields[2].parse().ok()?;
            let cols: usize = fields[3].parse().ok()?;
            let mut values = Vec::with_capacity(rows * cols);
            for _ in 0..rows {
                let row = lines.next()?.ok()?;
                for v in row.trim().split(',') {
                    values.push(v.parse::<f64>().ok()?);
                }
            }
            if values.len() != rows * cols {
                return None;
            }
            return Some(DMatrix::from_row_slice(rows, cols, &values));
        }
    }
    None
}

fn collect_data(scenario: &Scenario, seed: u64) -> Result<DataMatrices, String> {
    let sys = &scenario.sys;
    let data = &scenario.data;
    let excitation = &scenario.excitation;
    let frequency_count = excitation.frequency_count.unwrap_or_else(|| {
        ExplorationPolicy::default_frequency_count(sys.state_dim(), sys.input_dim())
    });
    if data.restart_per_interval {
        let plan = ExperimentPlan {
            dt: data.dt,
            interval_count: data.intervals,
            fine_step: data.fine_step,
            seed,
            frequency_count,
            amplitude: excitation.amplitude,
            frequency_range: (excitation.frequency_min, excitation.frequency_max),
            x0_scale: data.x0_scale,
        };
        collect_experiments(sys, &plan).map_err(|e| e.to_string())
    } else {
        let policy = ExplorationPolicy::seeded_with(
            sys.state_dim(),
            sys.input_dim(),
            seed,
            frequency_count,
            excitation.amplitude,
            (excitation.frequency_min, excitation.frequency_max),
        );
        let x0 = DVector::from_row_slice(&scenario.x0);
        let duration = data.intervals as f64 * data.dt;
        let traj =
            simulate(sys, &policy, &x0, duration, data.fine_step).map_err(|e| e.to_string())?;
        build_data_matrices(&traj, data.dt, data.intervals).map_err(|e| e.to_string())
    }
}

/// Resolves `alpha0` ("auto" runs the data-driven search) and the step count
/// so that `alpha0 = S eta` holds exactly with the configured step size.
fn resolve_damping(
    scenario: &Scenario,
    dm: &DataMatrices,
    quiet: bool,
) -> Result<(f64, u32), AdpError> {
    let alpha0 = match scenario.alpha0 {
        Some(value) => value,
        None => {
            let found = find_initial_alpha(dm, &scenario.learner_template)?;
            info!(quiet, "auto damping search certified alpha0 = {found}");
            found
        }
    };
    match (scenario.eta, scenario.steps) {
        (None, Some(steps)) => Ok((alpha0, steps)),
        (Some(eta), None) => {
            let ratio = alpha0 / eta;
            let rounded = ratio.round();
            let steps = if (ratio - rounded).abs() < 1e-6 * ratio.max(1.0) {
                rounded as u32
            } else {
                ratio.ceil() as u32
            };
            // keep eta exact and enlarge alpha0 to the next step multiple
            Ok((steps as f64 * eta, steps.max(1)))
        }
        _ => unreachable!("validated in config"),
    }
}

pub fn run(
    config_path: &Path,
    output_override: Option<&Path>,
    seed_override: Option<u64>,
    quiet: bool,
) -> i32 {
    let (config, raw_bytes) = match crate::config::ScenarioConfig::load(config_path) {
        Ok(loaded) => loaded,
        Err(e) => return fail(&e.to_string(), EXIT_CONFIG),
    };
    let scenario = match config.validate() {
        Ok(s) => s,
        Err(e) => return fail(&e.to_string(), EXIT_CONFIG),
    };
    let output_dir = output_override
        .unwrap_or(&scenario.output_dir)
        .to_path_buf();
    if let Err(e) = fs::create_dir_all(&output_dir) {
        return fail(
            &format!("cannot create {}: {e}", output_dir.display()),
            EXIT_CONFIG,
        );
    }
    let seed = seed_override.unwrap_or(scenario.excitation.seed);

    // manifest: config digest + toolkit version
    let digest = Sha256::digest(&raw_bytes);
    let digest_hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
    let manifest = format!(
        "config_sha256={digest_hex} version={} seed={seed}\n",
        env!("CARGO_PKG_VERSION")
    );
    if let Err(e) = fs::write(output_dir.join("manifest.txt"), manifest) {
        return fail(&format!("cannot write manifest: {e}"), EXIT_CONFIG);
    }

    info!(
        quiet,
        "collecting data: Z = {}, dt = {}", scenario.data.intervals, scenario.data.dt
    );
    let dm = match collect_data(&scenario, seed) {
        Ok(dm) => dm,
        Err(e) => return fail(&e, EXIT_CONFIG),
    };
    let (rank_ok, rank) = dm.check_rank();
    if !rank_ok {
        return fail(
            &format!(
                "excitation rank condition violated: rank((I_x, I_xu)) = {rank}, \
                 required {} - increase data.intervals or enrich the probe",
                dm.required_rank()
            ),
            EXIT_RANK,
        );
    }

    let (alpha0, steps) = match resolve_damping(&scenario, &dm, quiet) {
        Ok(resolved) => resolved,
        Err(e) => return fail(&e.to_string(), adp_exit_code(&e)),
    };
    let mut learner_cfg = scenario.learner_template.clone();
    learner_cfg.alpha0 = alpha0;
    learner_cfg.step_count = steps;

    info!(
        quiet,
        "learning with alpha0 = {alpha0}, eta = {}",
        learner_cfg.eta()
    );
    let q_min_eig =
        match nalgebra::linalg::SymmetricEigen::try_new(learner_cfg.q.clone(), 1e-13, 100_000) {
            Some(eigen) => eigen.eigenvalues.min(),
            None => return fail("state weight eigendecomposition failed", EXIT_CONFIG),
        };
    let outcome: LearnOutcome = {
        let result = if q_min_eig > 1e-12 * (1.0 + learner_cfg.q.norm()) {
            learn_lqr(&dm, &learner_cfg)
        } else {
            info!(
                quiet,
                "state weight is semidefinite: using the two-phase scheme"
            );
            learn_lqr_two_phase(&dm, &learner_cfg)
        };
        match result {
            Ok(outcome) => outcome,
            Err(e) => return fail(&e.to_string(), adp_exit_code(&e)),
        }
    };
    info!(
        quiet,
        "learned gain after {} iterates; final alpha = {}",
        outcome.history.iterates.len() - 1,
        outcome
            .history
            .iterates
            .last()
            .map(|it| it.alpha)
            .unwrap_or(f64::NAN)
    );

    // oracle reference (used by history/verify outputs when enabled)
    let oracle_gain = if scenario.verify {
        match oracle::kleinman(
            scenario.sys.a(),
            scenario.sys.b(),
            &learner_cfg.q,
            &learner_cfg.r,
            0.0,
            None,
            1e-12,
            500,
        ) {
            Ok(sol) => Some(sol),
            Err(e) => return fail(&format!("oracle verification failed: {e}"), EXIT_CONFIG),
        }
    } else {
        None
    };

    // history.csv and figure_data.csv
    let write_result = (|| -> std::io::Result<()> {
        let mut history = fs::File::create(output_dir.join("history.csv"))?;
        outcome
            .history
            .to_csv(oracle_gain.as_ref().map(|sol| &sol.k), &mut history)?;

        let mut figure = fs::File::create(output_dir.join("figure_data.csv"))?;
        writeln!(figure, "k,alpha,lambda_max_P")?;
        for it in &outcome.history.iterates {
            let lambda = it
                .lambda_max_p
                .map(|v| format!("{v:.16e}"))
                .unwrap_or_default();
            writeln!(figure, "{},{:.16e},{}", it.k, it.alpha, lambda)?;
        }
        fs::write(
            output_dir.join("plot.gnuplot"),
            "set datafile separator ','\n\
             set key autotitle columnhead\n\
             set xlabel 'iteration k'\n\
             plot 'figure_data.csv' using 1:2 with steps title 'alpha', \\\n\
             \t'figure_data.csv' using 1:3 with linespoints title 'lambda_max(P_k)'\n",
        )?;
        Ok(())
    })();
    if let Err(e) = write_result {
        return fail(&format!("cannot write outputs: {e}"), EXIT_CONFIG);
    }

    // distributed synthesis
    let mut synthesis = None;
    if let Some(sdp_cfg) = &scenario.distributed {
        let (partition, graph) = scenario.topology.as_ref().expect("validated in config");
        info!(quiet, "synthesizing structured gain: c = {}", sdp_cfg.c);
        match learn_distributed(&dm, graph, partition, sdp_cfg, &learner_cfg) {
            Ok(result) => {
                let bundle = fs::File::create(output_dir.join("distributed.csv"))
                    .and_then(|mut f| result.to_csv(&mut f));
                if let Err(e) = bundle {
                    return fail(&format!("cannot write distributed.csv: {e}"), EXIT_CONFIG);
                }
                synthesis = Some(result);
            }
            Err(DistributedError::Synthesis(SdpError::Infeasible { margin })) => {
                return fail(
                    &format!(
                        "structured stabilization is infeasible for this graph \
                         (margin {margin:.3e})"
                    ),
                    EXIT_SDP_INFEASIBLE,
                );
            }
            Err(DistributedError::Learning(e)) => return fail(&e.to_string(), adp_exit_code(&e)),
            Err(e) => return fail(&e.to_string(), EXIT_CONFIG),
        }
    }

    // gains.csv
    let gains_result = (|| -> std::io::Result<()> {
        let mut gains = fs::File::create(output_dir.join("gains.csv"))?;
        write_matrix_section(&mut gains, "K_star", &outcome.gain)?;
        if let Some(result) = &synthesis {
            write_matrix_section(&mut gains, "K_d", &result.k_d)?;
        }
        Ok(())
    })();
    if let Err(e) = gains_result {
        return fail(&format!("cannot write gains.csv: {e}"), EXIT_CONFIG);
    }

    // verify.csv: oracle cross-checks against the hidden plant
    if let Some(oracle_sol) = &oracle_gain {
        let verify_result = (|| -> std::io::Result<()> {
            let mut file = fs::File::create(output_dir.join("verify.csv"))?;
            write_matrix_section(&mut file, "K_oracle", &oracle_sol.k)?;
            writeln!(file, "quantity,value")?;
            let open = oracle::spectral_abscissa(scenario.sys.a()).unwrap_or(f64::NAN);
            writeln!(file, "open_loop_abscissa,{open:.16e}")?;
            writeln!(file, "care_residual,{:.16e}", oracle_sol.residual)?;
            let closed = scenario.sys.a() - scenario.sys.b() * &outcome.gain;
            let closed_abscissa = oracle::spectral_abscissa(&closed).unwrap_or(f64::NAN);
            writeln!(file, "closed_loop_abscissa_K_star,{closed_abscissa:.16e}")?;
            let gap = (&outcome.gain - &oracle_sol.k).norm();
            writeln!(file, "gap_K_star_frobenius,{gap:.16e}")?;
            if let Some(result) = &synthesis {
                let closed_d = scenario.sys.a() - scenario.sys.b() * &result.k_d;
                let abscissa_d = oracle::spectral_abscissa(&closed_d).unwrap_or(f64::NAN);
                writeln!(file, "closed_loop_abscissa_K_d,{abscissa_d:.16e}")?;
            }
            Ok(())
        })();
        if let Err(e) = verify_result {
            return fail(&format!("cannot write verify.csv: {e}"), EXIT_CONFIG);
        }
        info!(quiet, "verification written to verify.csv");
    }

    info!(quiet, "done; outputs in {}", output_dir.display());
    EXIT_OK
}

pub fn verify(config_path: &Path, output_override: Option<&Path>, quiet: bool) -> i32 {
    let (config, _) = match crate::config::ScenarioConfig::load(config_path) {
        Ok(loaded) => loaded,
        Err(e) => return fail(&e.to_string(), EXIT_CONFIG),
    };
    let scenario = match config.validate() {
        Ok(s) => s,
        Err(e) => return fail(&e.to_string(), EXIT_CONFIG),
    };
    let output_dir = output_override.unwrap_or(&scenario.output_dir);

    let open = match oracle::spectral_abscissa(scenario.sys.a()) {
        Ok(v) => v,
        Err(e) => return fail(&e.to_string(), EXIT_CONFIG),
    };
    let solution = match oracle::kleinman(
        scenario.sys.a(),
        scenario.sys.b(),
        &scenario.learner_template.q,
        &scenario.learner_template.r,
        0.0,
        None,
        1e-12,
        500,
    ) {
        Ok(sol) => sol,
        Err(e) => return fail(&e.to_string(), EXIT_CONFIG),
    };

    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    let print_result = (|| -> std::io::Result<()> {
        write_matrix_section(&mut out, "K_oracle", &solution.k)?;
        writeln!(out, "quantity,value")?;
        writeln!(out, "open_loop_abscissa,{open:.16e}")?;
        writeln!(out, "care_residual,{:.16e}", solution.residual)?;
        let closed = scenario.sys.a() - scenario.sys.b() * &solution.k;
        let abscissa = oracle::spectral_abscissa(&closed).unwrap_or(f64::NAN);
        writeln!(out, "closed_loop_abscissa_K_oracle,{abscissa:.16e}")?;

        let gains_path = output_dir.join("gains.csv");
        for name in ["K_star", "K_d"] {
            if let Some(gain) = read_matrix_section(&gains_path, name) {
                let closed = scenario.sys.a() - scenario.sys.b() * &gain;
                let abscissa = oracle::spectral_abscissa(&closed).unwrap_or(f64::NAN);
                writeln!(out, "closed_loop_abscissa_{name},{abscissa:.16e}")?;
            }
        }
        Ok(())
    })();
    if let Err(e) = print_result {
        return fail(&format!("cannot print verification: {e}"), EXIT_CONFIG);
    }
    info!(quiet, "# verification complete");
    EXIT_OK
}
