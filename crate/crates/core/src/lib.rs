//! Distributionally robust Bayesian Merton (DRBC) portfolio pipeline.
//!
//! The crate is organised bottom-up:
//!
//! - [`market`]: market specification, synthetic price paths and the
//!   observation process `Y(t)`.
//! - [`prior`]: empirical drift priors built from windowed log-returns.
//! - [`quadrature`] and [`merton`]: Gaussian-weight integration and the
//!   Bayesian Merton closed forms (mixture `F`, budget multiplier, value
//!   function, optimal fractions).
//! - [`robust`]: influence function and the Wasserstein worst-case
//!   pushforward of an empirical prior.
//! - [`calibration`]: ambiguity-radius selection from the projection limit law.
//! - [`policies`]: benchmark strategies (plug-in Merton, DRMV, DRC surrogate).
//! - [`backtest`]: rolling-window trading loop, metrics and experiment suites.

// `!(x > 0.0)` is used on purpose so that NaN inputs are rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![allow(clippy::needless_range_loop)]

pub mod backtest;
pub mod calibration;
pub mod error;
pub mod market;
pub mod merton;
pub mod policies;
pub mod prior;
pub mod quadrature;
pub mod rng;
pub mod robust;
pub mod utility;

pub use error::{DrbcError, Result};
pub use market::{DriftModel, KappaLaw, MarketSpec, PathGrid, SinusoidalDriftSpec};
pub use merton::{BudgetSolution, PriorKernel};
pub use prior::{EmpiricalPrior, WindowingMode, WindowingSpec};
pub use quadrature::{GaussianRule, QuadratureMethod, QuadratureSpec};
pub use utility::PowerUtility;
