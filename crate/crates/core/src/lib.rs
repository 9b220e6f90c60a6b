//! Imputation of missing swaption volatility quotes by pseudo-Gibbs sampling
//! on a variational autoencoder, with shifted-SABR calibration of the
//! completed cubes and a Monte-Carlo delta-hedging study.

pub mod calibration;
pub mod error;
pub mod gibbs;
pub mod hedge;
pub mod interp;
pub mod normal;
pub mod pipeline;
pub mod sabr;
pub mod synth;
pub mod vae;
pub mod volcube;

pub use error::{Error, Result};
