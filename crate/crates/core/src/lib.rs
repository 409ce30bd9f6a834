//! Traveling fronts of reaction-diffusion systems: front computation,
//! weighted spectra, Lyapunov-Perron stable manifolds and the stable
//! foliation near the front.

pub mod cli;
pub mod error;
pub mod evolve;
pub mod front;
pub mod grid;
pub mod linalg;
pub mod manifold;
pub mod model;
pub mod spectrum;

pub use error::{Error, Result};
