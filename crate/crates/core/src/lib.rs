//! Physics-trajectory forecasting and residual-stream feature analysis.
//!
//! The crate covers the whole experiment graph: simulate coupled Hamiltonian
//! systems ([`physics`]), serialize channels into digit prompts
//! ([`tokenizer`]), capture residual streams into tensor files
//! ([`activation`]), train sparse autoencoders on them ([`sae`]), correlate
//! their codes with energy ([`correlation`]), ablate energy-correlated codes
//! during generation ([`intervention`]) and score forecasts ([`forecast`]).
//! [`mock`] provides a deterministic model speaking the adapter wire
//! protocol ([`protocol`]) so the full pipeline ([`pipeline`]) runs without a
//! language model.

pub mod activation;
pub mod config;
pub mod correlation;
pub mod error;
pub mod forecast;
pub mod intervention;
pub mod io;
pub mod mock;
pub mod physics;
pub mod pipeline;
pub mod protocol;
pub mod sae;
pub mod tokenizer;

pub use error::{Error, Result};
