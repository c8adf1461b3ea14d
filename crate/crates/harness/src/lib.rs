//! Verification suite and regret-scaling experiments for `nacb-core`.
//!
//! [`checks::verify_all`] runs every property check against the exact
//! oracle and returns one report entry per check; [`sweep::regret_sweep`]
//! runs the learner over a grid of horizons and fits the regret exponent.

pub mod checks;
pub mod sweep;

pub use checks::{verify_all, verify_suite, CheckResult, Level, Status, SuiteConfig, VerifyReport};
pub use sweep::{regret_sweep, SweepConfig, SweepResult};
