//! Identification of autonomous ODE systems, and reconstruction of the
//! missing time labels, from point clouds whose observation instants are
//! known only in distribution.
//!
//! The pipeline segments a long unlabeled trajectory into ordered pieces,
//! fits one surrogate network per piece against a sliced Wasserstein loss
//! while extracting sparse dictionary coefficients by thresholded ridge
//! regression, refines those coefficients through a differentiable RK4 solve,
//! and finally labels every sample by projection onto the identified
//! trajectory.

pub mod datagen;
pub mod dictionary;
pub mod dmphase;
pub mod error;
pub mod labeling;
pub mod odesolve;
pub mod par;
pub mod pipeline;
pub mod piphase;
pub mod plots;
pub mod rng;
pub mod segmentation;
pub mod surrogate;
pub mod swd;
pub mod timedist;

pub use error::{Error, Result};
