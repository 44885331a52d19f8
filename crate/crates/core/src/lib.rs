//! Budget-constrained white-box adversarial attack engine and benchmark
//! harness for tiny differentiable classifiers.
//!
//! The crate provides:
//! - an L-inf threat model with box constraints ([`threat`]),
//! - attack surrogate losses with analytic logit gradients ([`loss`]),
//! - tiny linear/MLP models with hand-written backprop, adversarial
//!   training and a binary bundle format ([`model`], [`data`]),
//! - step-size schedules ([`schedule`]) and initialization strategies
//!   ([`init`]),
//! - a per-image forward/backward budget ledger with reallocation
//!   ([`budget`]) and the instrumented execution engine ([`engine`]),
//! - seven attack pipelines from a plain PGD baseline to multi-phase
//!   budget-adaptive strategies ([`attack`]),
//! - ground-truth robustness oracles for validation ([`oracle`]), and
//! - the scoring harness and config format ([`harness`]).

pub mod attack;
pub mod budget;
pub mod data;
pub mod engine;
pub mod error;
pub mod harness;
pub mod init;
pub mod loss;
pub mod model;
pub mod oracle;
pub mod rng;
pub mod schedule;
pub mod threat;

pub use error::{Error, Result};
