//! Activation watermarking and attestation for toy quantized transformer models.
//!
//! The library has three layers:
//!
//! * offline watermark embedding: per-block signature allocation, channel
//!   selection, a gradient-descent stage on the full-precision block and a
//!   zeroth-order stage on the quantized block ([`watermark`]);
//! * model plumbing: a small transformer with hand-written gradients
//!   ([`model`]) and per-channel INT8/INT4 quantization ([`quant`]);
//! * online attestation: a deterministic discrete-event simulation of an
//!   enclave that samples blocks, copies them out of a staged read-only
//!   region, decrypts the key store, and verifies watermarks with an
//!   early-exit pipeline ([`attest`]), plus adversary harnesses ([`attacks`]).

pub mod error;
pub mod model;
pub mod numkit;
pub mod quant;

pub use error::Error;
pub use model::{ActivationTrace, ModelShape, ToyBlock, ToyModel};
pub use numkit::{Matrix, SeededRng};
pub use quant::{BitWidth, QuantizedBlock, QuantizedModel};
