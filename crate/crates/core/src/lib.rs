//! Task-oriented communication over a noisy channel under distribution shift.
//!
//! The crate covers the whole pipeline: colored multi-domain datasets, an AWGN
//! channel with a peak power constraint, stochastic feature encoders, the
//! information-bottleneck family of training objectives (with an invariance
//! penalty and class-conditional latent priors), semantic-shift detection and
//! an experiment runner. [`sem_oracle`] holds the linear-Gaussian reference
//! model used to check the invariance argument in closed form.

pub mod channel;
pub mod datasets;
pub mod detection;
pub mod encoder_decoder;
pub mod error;
pub mod experiments;
pub mod objectives;
pub mod sem_oracle;
pub mod trainer;

pub use error::{Error, Result};
