//! Data-driven feedback stabilization through Koopman bilinear surrogates.
//!
//! The pipeline identifies a bilinear model `ż = Λz + uBz` in realified Koopman
//! eigenfunction coordinates from unforced trajectory data, synthesizes a
//! quadratic control Lyapunov function for it, and closes the loop on the true
//! plant with a Lyapunov-constrained MPC.

pub mod bilinear;
pub mod clf;
pub mod config;
pub mod controller;
pub mod dictionary;
pub mod edmd;
pub mod error;
pub mod linalg;
pub mod pipeline;
pub mod simulator;

pub use bilinear::KoopmanBilinearModel;
pub use clf::Clf;
pub use dictionary::Dictionary;
pub use edmd::{KoopmanSpectrum, SnapshotSet};
pub use error::{Error, Result};
pub use simulator::Plant;
