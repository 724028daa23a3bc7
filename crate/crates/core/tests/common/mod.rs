//! Shared fixtures for the integration suites: the three-agent coupled
//! benchmark plant and the gain table it should learn.

#![allow(dead_code)]

use nalgebra::{dmatrix, DMatrix};
use relqr::sysmodel::{BlockPartition, InteractionGraph, LtiSystem};

/// Three coupled two-state agents with one input each; open-loop unstable.
pub fn benchmark_plant() -> LtiSystem {
    let a = dmatrix![
        0.48, 0.23, 0.89, 0.86, 0.0,  0.0;
        0.12, 0.07, 0.16, 0.73, 0.0,  0.0;
        0.64, 0.03, 0.57, 0.71, 0.65, 0.30;
        0.47, 0.16, 0.62, 0.25, 0.13, 0.67;
        0.0,  0.0,  0.40, 0.95, 0.11, 0.63;
        0.0,  0.0,  0.14, 0.69, 0.90, 0.08
    ];
    let b = dmatrix![
        0.37, 0.0,  0.0;
        0.92, 0.0,  0.0;
        0.0,  0.09, 0.0;
        0.0,  0.52, 0.0;
        0.0,  0.0,  0.91;
        0.0,  0.0,  0.31
    ];
    LtiSystem::new(a, b).unwrap()
}

/// Optimal gain for the benchmark plant with unit weights, to two decimals.
pub fn benchmark_gain() -> DMatrix<f64> {
    dmatrix![
        3.51, 0.86,  3.82, 2.53, 0.62, 0.23;
        4.36, 0.05,  5.59, 4.34, 1.63, 1.32;
        1.75, -0.01, 3.17, 3.09, 2.45, 2.18
    ]
}

pub fn benchmark_partition() -> BlockPartition {
    BlockPartition::new(vec![2, 2, 2], vec![1, 1, 1]).unwrap()
}

/// Chain topology: agent 1 talks to 0 and 2.
pub fn benchmark_graph() -> InteractionGraph {
    InteractionGraph::new(3, &[(0, 1), (1, 2)]).unwrap()
}

/// The damping schedule and weights used throughout the benchmark runs:
/// alpha0 = 2.46 walked down in eta = 0.001 steps, sigma = 100.
pub fn benchmark_learner_config() -> relqr::adp::LearnerConfig {
    relqr::adp::LearnerConfig::new(DMatrix::identity(6, 6), DMatrix::identity(3, 3), 2.46, 2460)
}

/// Restarted-experiment data for the benchmark plant: Z = 60 intervals of
/// dt = 0.05, probe band capped at `band_hi`.
pub fn benchmark_data(fine_step: f64, band_hi: f64, seed: u64) -> relqr::simulate::DataMatrices {
    let sys = benchmark_plant();
    let mut plan = relqr::simulate::ExperimentPlan::for_plant(&sys, 0.05, 60, fine_step, seed);
    plan.frequency_range = (0.5, band_hi);
    relqr::simulate::collect_experiments(&sys, &plan).unwrap()
}

/// Spectral norm of a possibly nonsymmetric matrix.
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    nalgebra::linalg::SVD::try_new(m.clone(), false, false, f64::EPSILON, 100_000)
        .expect("SVD convergence")
        .singular_values
        .max()
}
