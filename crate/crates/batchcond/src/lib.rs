//! Batched adaptive experiments with conditionally valid inference.
//!
//! This crate simulates multi-armed experiments run in batches, where the
//! sampling probabilities for each batch are chosen adaptively (Thompson
//! sampling or epsilon-greedy) from the results of earlier batches, and then
//! constructs confidence intervals for linear functionals `eta' mu` of the
//! arm means — including targets chosen adaptively at the end, such as "the
//! mean of the empirically best arm".
//!
//! Naive normal-theory intervals are invalid in this setting because the
//! batch designs, the target, and the data are dependent. The crate
//! implements four procedures whose conditional behavior can be compared:
//!
//! * **last-only** — discard all but the final batch; valid but wasteful.
//! * **leftover** — augment the final batch with the single linear
//!   combination of earlier batches that remains usable after conditioning
//!   on the adaptive design; valid and strictly tighter.
//! * **pivot** — a weighted pivot that is unconditionally valid for fixed
//!   targets but degrades under adaptive target selection.
//! * **polyhedral** — for epsilon-greedy designs, exact conditional
//!   inference given the polyhedral selection event, computed by Gibbs
//!   sampling a constrained Gaussian.
//!
//! Module layout mirrors the pipeline: [`model`] (parameters and sufficient
//! statistics), [`stochastics`] (seeded streams and constrained-Gaussian
//! sampling), [`policies`] (adaptive designs and selection events),
//! [`simulator`] (trajectory generation), [`inference`] (the four interval
//! procedures), [`harness`] (replication, summaries, CSV artifacts), and
//! [`twobatch`] (a fully worked two-batch, two-arm example with a
//! Rao-Blackwell improvement of the usual estimator).

pub mod error;
pub mod harness;
pub mod inference;
pub mod model;
pub mod policies;
pub mod simulator;
pub mod stochastics;
pub mod twobatch;

pub use error::{Error, Result};
