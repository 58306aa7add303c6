//! Epidemic change-point detection for integer-valued time series.
//!
//! The test compares Poisson quasi-maximum likelihood estimates computed on
//! the three segments induced by every admissible break pair and rejects the
//! no-change hypothesis when the largest normalized contrast exceeds a
//! critical value of the supremum of squared Brownian-bridge increments.
//!
//! Modules, bottom-up:
//! - [`model`]: families, parameter spaces, conditional-mean recursion;
//! - [`simulate`]: Poisson- and NB-INGARCH trajectories;
//! - [`qmle`]: quasi-likelihood, estimator, sandwich matrices;
//! - [`bridge`]: Monte-Carlo critical values;
//! - [`scan`]: the test statistic, decision and break estimator;
//! - [`io`] and [`experiment`]: CSV/JSON surfaces and the size/power harness.

pub mod bridge;
pub mod error;
pub mod experiment;
pub mod io;
pub mod model;
mod optim;
pub mod qmle;
pub mod scan;
pub mod simulate;

pub use error::{Error, Result};
pub use model::{CountSeries, Family, InitPolicy, ModelSpec, Noise, Segment, Theta};
