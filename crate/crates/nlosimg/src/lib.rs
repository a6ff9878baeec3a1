//! Radar imaging of non-line-of-sight targets through a passive modular
//! reflector, using the beams a base station already sweeps for initial
//! access.
//!
//! The pipeline is `reflector` design, `channel` synthesis, `imaging` by
//! back-projection, then `velocity` estimation. `resolution` holds the
//! closed-form predictions and the spectral-coverage oracle they are checked
//! against.

pub mod channel;
pub mod codebook;
pub mod error;
pub mod geometry;
pub mod imaging;
pub mod io;
pub mod reflector;
pub mod resolution;
pub mod scenario;
pub mod velocity;

pub use error::{Error, Result};

/// Speed of light in vacuum, m/s.
pub const C0: f64 = 299_792_458.0;

/// Normalized sinc, sin(πu)/(πu).
pub fn sinc(u: f64) -> f64 {
    if u.abs() < 1e-12 {
        1.0
    } else {
        let a = std::f64::consts::PI * u;
        a.sin() / a
    }
}
