//! Multi-antenna NOMA downlink with limited CSI feedback.
//!
//! The crate models a zero-forcing NOMA downlink in which each user feeds
//! back a quantized channel direction over a `B_{n,k}`-bit random vector
//! codebook. It provides:
//!
//! * closed-form ergodic-rate lower bounds and a rate-loss upper bound
//!   ([`analysis`]) built on the special functions in [`specfun`],
//! * joint feedback-bit and power allocation ([`allocation`]),
//! * distance-based user clustering and system configuration ([`system`]),
//! * channel drawing, quantization and beamforming ([`channel`]), and
//! * Monte Carlo verification of all of the above ([`montecarlo`]).
//!
//! The analytical core is generic over the scalar type via
//! [`scalar::FloatT`]; the simulation layer is fixed at `f64`.

pub mod allocation;
pub mod analysis;
pub mod channel;
pub mod montecarlo;
pub mod scalar;
pub mod specfun;
pub mod system;

pub use scalar::FloatT;

/// Default scalar type used by the command-line tools.
pub type Real = f64;

/// Single-precision alias for the analytical core.
pub type Real32 = f32;
