//! Decomposable transformer point processes.
//!
//! Inter-event times follow a log-normal mixture conditioned on the previous
//! mark ([`lognorm_mix`]); marks follow a softmax classifier over
//! continuous-time attention embeddings of the full history
//! ([`ctx_attention`]). The two parts are fitted separately and combined for
//! likelihood evaluation ([`metrics`]), next-event and long-horizon prediction
//! ([`inference`]), and thinning-based simulation ([`generative`]).

pub mod cli;
pub mod ctx_attention;
pub mod error;
pub mod event_data;
pub mod generative;
pub mod inference;
pub mod io;
pub mod lognorm_mix;
pub mod metrics;

pub use error::{Error, Result};
