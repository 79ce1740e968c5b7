//! Numeric core of the tactile force-feedback stack.
//!
//! The crate is `no_std` + `alloc` when built without the default `std`
//! feature. With `std` the Poisson solver gains an FFT-backed sine
//! transform and the matrix kernels use runtime CPU feature detection.
//!
//! Pipeline, left to right:
//!
//! * [`sim`]: synthetic gel. Indenter geometry to depth, depth to normals,
//!   normals to an RGB tactile frame, and Hertzian ground-truth force.
//! * [`mlp`]: per-pixel RGBXY to surface-normal regressor trained with Adam.
//! * [`poisson`]: normals to gradients, divergence, DST-I Poisson solve.
//! * [`regress`]: cubic depth-to-force calibration and live force estimation.
//! * [`teleop`]: position-force bilateral loop around all of the above.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod error;
pub mod grid;
pub(crate) mod linalg;
pub mod mlp;
pub mod poisson;
pub mod regress;
pub mod rng;
pub mod sim;
pub mod teleop;

pub use error::{Error, Result};
pub use grid::Grid;
