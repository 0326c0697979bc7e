//! Duality-based filtering, smoothing and filter-stability tools for
//! continuous-time finite-state hidden Markov models and linear-Gaussian
//! models.
//!
//! The crate is `no_std` (it needs `alloc`). File formats, CSV export and
//! the experiment runner live in the companion `hmm-duality-cli` crate.
//!
//! Layout:
//!
//! * [`models`]: rate matrices, observation matrices, HMM and linear-Gaussian
//!   models, carré du champ, ergodic classes.
//! * [`sim`]: exact CTMC paths, white-noise observations, linear-Gaussian paths.
//! * [`filters`]: Wonham, Zakai, Zakai solution operator, Kalman-Bucy, the
//!   Kalman filter for Markov chains.
//! * [`duality`]: controllable subspace, observability, stabilizability,
//!   controllability gramian, dual LQ problems and the duality-principle checks.
//! * [`stability`]: divergences, Poincaré constants, twin-filter experiments.
//! * [`smoothing`]: forward-backward, RTS and Fraser-Potter smoothers.
//! * [`catalog`]: named demo models.
#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod catalog;
pub mod duality;
pub mod error;
pub mod filters;
pub mod linalg;
pub mod models;
pub mod rng;
pub mod sim;
pub mod smoothing;
pub mod stability;
pub mod stats;

pub use error::{Error, Result};
pub use models::{
    HmmModel, LinearGaussianModel, ObservationMatrix, RateMatrix, SimplexVector, ValidationReport,
};
pub use rng::RngSeed;
pub use sim::{Measure, ObservationPath, StatePath};

pub use nalgebra::{DMatrix, DVector};
