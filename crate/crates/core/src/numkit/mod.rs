//! Minimal dense numeric kernels, seeded randomness, and sampling primitives.
//!
//! Everything here is deliberately scalar and single-threaded: matrix
//! products use a fixed accumulation order so results are bit-reproducible
//! across runs and thread counts, and every random draw goes through
//! [`SeededRng`] so a seed fully determines the artifact.

mod count;
mod matrix;
mod rng;
mod sample;

pub use count::{choose, ln_choose};
pub use matrix::Matrix;
pub use rng::SeededRng;
pub use sample::{multinomial_without_replacement, uniform_without_replacement};
