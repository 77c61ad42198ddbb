//! Voxel-wise tracer kinetic parameter estimation for dynamic PET.
//!
//! The crate provides:
//! - an exact forward model of the irreversible two-tissue compartment
//!   model with analytic parameter sensitivities ([`kinetics`]);
//! - Gaussian Fourier feature encodings and a sine-activation coordinate
//!   network trained against that forward model ([`encoding`],
//!   [`network`], [`training`]);
//! - a classical per-voxel Levenberg-Marquardt fitter that serves as the
//!   accuracy oracle ([`nlls`]);
//! - synthetic phantoms with known ground truth ([`phantom`]);
//! - binary volume formats, normalization rules, and evaluation
//!   artifacts ([`dataio`], [`evaluate`]).

pub mod config;
pub mod dataio;
pub mod encoding;
pub mod error;
pub mod evaluate;
pub mod kinetics;
pub mod network;
pub mod nlls;
pub mod optim;
pub mod phantom;
pub mod reference;
pub mod tolerances;
pub mod training;

pub use error::{Error, Result};
