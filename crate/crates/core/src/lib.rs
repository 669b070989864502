//! Isochronal phase of stochastically perturbed patterns in semilinear
//! evolution equations: spectral models, exponential integrators, the isochron
//! map with its derivatives, and a term-by-term Itô ledger for the phase.

pub mod audit;
pub mod config;
pub mod error;
pub mod flow;
pub mod isochron;
pub mod ledger;
pub mod manifold;
pub mod models;
pub mod par;
pub mod spectral;
pub mod stochastic;

pub use error::{Error, Result};
