//! Decision fusion for cooperative spectrum sensing.
//!
//! A single PU shares a channel with `N` interfering SUs. Each sensing SU
//! reports one bit per slot; a fusion rule maps the joint observation vector
//! to a busy/idle decision that trades SU transmission opportunities against
//! PU protection. This crate provides:
//!
//! - exact probability/throughput arithmetic over observation vectors
//!   ([`model`]),
//! - the throughput-optimal Bayesian fusion rule plus k-out-of-N baselines
//!   and exact rule evaluation ([`fusion`]),
//! - throughput maximization under a PU-throughput floor: greedy
//!   approximation, exhaustive oracle, knapsack view, and a hard-instance
//!   generator ([`constrained`]),
//! - a pseudo-polynomial count table over rounded log-weights that lifts the
//!   greedy algorithm past the enumeration cap ([`dp`]),
//! - sensing-set selection under reporting-delay budgets ([`selection`]),
//! - a slot-level Monte-Carlo simulator ([`sim`]), and
//! - a seeded experiment harness with CSV output ([`experiment`]).
//!
//! All numeric code is generic over the scalar type via [`scalar::Real`]
//! (f32 or f64); the aliases below fix f64, which is what the CLI and the
//! acceptance suite use.

pub mod constrained;
pub mod dp;
pub mod error;
pub mod experiment;
pub mod fusion;
pub mod model;
pub mod scalar;
pub mod selection;
pub mod sim;

pub use error::{Error, Result};
pub use scalar::Real;

/// f64 concrete aliases for the common types.
pub type Instance64 = model::Instance<f64>;
pub type SensorProfile64 = model::SensorProfile<f64>;
pub type SensorSet64 = model::SensorSet<f64>;
pub type SystemParams64 = model::SystemParams<f64>;
pub type DecisionRule64 = fusion::DecisionRule<f64>;
pub type RuleEvaluation64 = fusion::RuleEvaluation<f64>;
pub type ConstrainedSolution64 = constrained::ConstrainedSolution<f64>;
pub type SelectionResult64 = selection::SelectionResult<f64>;
pub type SimSummary64 = sim::SimSummary<f64>;
