//! Neural operator quantum states for driven transverse-field Ising models.
//!
//! A Fourier neural operator turns a driving protocol into time-dependent
//! context tokens; an autoregressive transformer conditioned on those tokens
//! by cross-attention gives the wavefunction `ψ(σ, t)`. Training minimises
//! the variance of the local Schrödinger residual, and a dense exact
//! propagator serves as the reference at small sizes.

pub mod ansatz;
pub mod checkpoint;
pub mod error;
pub mod finetune;
pub mod io;
pub mod lattice;
pub mod model;
pub mod neural_operator;
pub mod oracle;
pub mod protocols;
pub mod report;
pub mod tape;
pub mod training;
pub mod vmc;
pub mod workers;

pub use error::{Error, Result};
