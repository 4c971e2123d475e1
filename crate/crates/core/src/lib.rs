//! Data-driven model predictive control toolkit.
//!
//! The crate identifies linear and nonlinear dynamic models from input-output
//! data and closes the loop with receding-horizon controllers:
//!
//! - [`realization`]: Ho-Kalman-Kung state-space realization from impulse data
//! - [`spc`]: subspace predictive control with a least-squares Hankel predictor
//! - [`deepc`]: data-enabled predictive control on raw Hankel data
//! - [`pem`]: prediction-error identification of linear state-space models
//! - [`neural`]: recurrent and state-space neural network models and training
//! - [`mpc`]: prediction stacking, QP/NLP assembly, and the closed-loop runner
//!
//! supported by [`numerics`] (SVD, pseudoinverse, QP, NLP), [`hankel`]
//! (block-Hankel construction, persistency of excitation), and [`plants`]
//! (ground-truth simulators and excitation signals).

pub mod deepc;
pub mod error;
pub mod hankel;
pub mod mpc;
pub mod neural;
pub mod numerics;
pub mod pem;
pub mod plants;
pub mod realization;
pub mod spc;

pub use error::{Error, Result};
pub use numerics::{Matrix, Vector};
