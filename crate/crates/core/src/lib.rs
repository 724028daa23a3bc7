//! Data-driven continuous-time LQR learning and graph-structured distributed
//! stabilization for linear systems with unknown dynamics.
//!
//! The crate is organized around one data artifact and two consumers:
//!
//! - [`sysmodel`]: plants, block partitions, interaction graphs and the
//!   block-sparsity patterns of structured gains and certificates.
//! - [`simulate`]: exploration policies, fixed-step integration, and the
//!   reduction of raw trajectories to the quadrature data matrices that are
//!   the learner's only view of the plant.
//! - [`adp`]: the model-free learner, which walks a damping parameter down
//!   to zero so no initial stabilizing gain is needed.
//! - [`distributed`]: structured-certificate synthesis on top of the learned
//!   centralized gain.
//! - [`oracle`]: model-based Riccati/Lyapunov ground truth for tests and
//!   verification runs; never consulted by the learner.

pub mod adp;
mod barrier;
pub mod distributed;
pub mod oracle;
pub mod simulate;
pub mod sysmodel;
