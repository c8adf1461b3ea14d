//! Natural actor-critic with batching (NAC-B) for infinite-horizon
//! average-reward MDPs under the unichain assumption.
//!
//! The crate has three layers:
//!
//! - the model: [`mdp`], [`policy`], [`envs`];
//! - an exact oracle over a fixed policy: [`chain`] computes the recurrent
//!   structure, stationary distribution, gain/bias, policy gradient, Fisher
//!   matrix, natural gradient and the TD critic fixed point by dense linear
//!   algebra;
//! - the learner: [`linrec`] is the stochastic linear recursion engine that
//!   both inner loops in [`estimators`] instantiate, and [`nacb`] runs the
//!   full single-trajectory algorithm.
//!
//! All numerics are generic over [`Scalar`] (`f32` or `f64`); the aliases at
//! the crate root fix the scalar to `f64`, which is what the CLI and the
//! verification harness use.

pub mod chain;
pub mod envs;
pub mod error;
pub mod estimators;
pub mod format;
pub mod linalg;
pub mod linrec;
pub mod mdp;
pub mod nacb;
pub mod policy;

use nalgebra::RealField;
use num_traits::{FromPrimitive, ToPrimitive};

pub use error::{Error, Result};

/// Real scalar type the numerics are written against.
pub trait Scalar: RealField + Copy + FromPrimitive + ToPrimitive + Send + Sync + 'static {
    /// Converts an `f64` literal into this scalar.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal must be representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    /// A tolerance of `x`, floored at a small multiple of machine epsilon so
    /// that `f64` tolerances stay meaningful for `f32`.
    #[inline]
    fn tol(x: f64) -> Self {
        let floor = Self::default_epsilon() * Self::lit(64.0);
        Self::lit(x).max(floor)
    }
}

impl<T> Scalar for T where T: RealField + Copy + FromPrimitive + ToPrimitive + Send + Sync + 'static {}

pub type Mdp = mdp::TabularMdp<f64>;
pub type Policy = policy::SoftmaxPolicy<f64>;
pub type Kernel = mdp::StochasticMatrix<f64>;
pub type Analysis = chain::ChainAnalysis<f64>;
pub type Values = chain::ValueBundle<f64>;
pub type Features = estimators::CriticFeatures<f64>;
pub type Trace = nacb::RegretTrace<f64>;
