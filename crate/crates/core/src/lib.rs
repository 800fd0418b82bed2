//! Parameter averaging for two-player min-max training dynamics.
//!
//! The crate is organised bottom-up:
//!
//! - [`params`]: flat parameter vectors split between the two players.
//! - [`autodiff`]: reverse-mode differentiation with gradients that can be
//!   differentiated again.
//! - [`games`]: the bilinear saddle game and a mixture-of-Gaussians GAN.
//! - [`dynamics`]: one-step training operators and the continuous flow.
//! - [`averaging`]: moving average, exponential moving average and
//!   parameterized online averaging, tracked outside the training loop.
//! - [`analysis`]: closed-form bilinear results, Jacobians, eigenvalues and
//!   the spectrum of the EMA operator.
//! - [`metrics`]: exact Wasserstein-1 between point clouds, mode coverage.
//! - [`harness`]: experiment configuration, seeded runs and CSV reports.

pub mod analysis;
pub mod autodiff;
pub mod averaging;
pub mod dynamics;
pub mod error;
pub mod games;
pub mod harness;
pub mod metrics;
pub mod params;

pub use analysis::{EmaStability, SpectrumMatchReport, SpectrumReport};
pub use averaging::{AveragerBank, AveragerKind, AveragerState};
pub use dynamics::{OptimizerKind, OptimizerState, StepPlan, Trajectory, UpdateMode};
pub use error::{Error, Result};
pub use games::{Batch, BilinearGame, Game, MixtureSpec, MogGanGame, Penalty};
pub use harness::{Experiment, ExperimentConfig, ExperimentReport, RunRecord, SummaryRow};
pub use metrics::ModeReport;
pub use params::{ParamVector, Player};
