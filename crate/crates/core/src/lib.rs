//! QGFN: GFlowNet forward policies combined with n-step action values into
//! behavior policies whose greediness is a single inference-time knob.
//!
//! The crate is organized bottom-up:
//!
//! - [`env`]: constructive-generation DAGs (two-doors, prepend/append bit
//!   strings, and a variable-length string landscape) plus exhaustive
//!   enumeration for small instances.
//! - [`approx`]: tanh MLPs with analytic backprop and an Adam optimizer.
//! - [`gfn`]: trajectory balance and SubTB(1) with a uniform backward policy.
//! - [`qlearn`]: n-step TD targets, the Q regression loss and EMA targets.
//! - [`policy`]: the mixing rules that turn `(P_F, Q)` into a behavior policy.
//! - [`oracle`]: exact flows, terminal distributions and `Q^pi` by DP.
//! - [`metrics`]: mode tracking, diversity and rank correlation.
//! - [`trainer`]: the joint training loop, checkpoints and analysis probes.
//! - [`cli`]: config parsing and the `qgfn` command implementations.

pub mod approx;
pub mod cli;
pub mod env;
pub mod error;
pub mod gfn;
pub mod metrics;
pub mod oracle;
pub mod par;
pub mod policy;
pub mod qlearn;
pub mod trainer;

pub use error::{Error, Result};

/// Version tag embedded in every emitted artifact (metrics, checkpoints,
/// probe and sweep outputs).
pub const SCHEMA_VERSION: u32 = 1;
