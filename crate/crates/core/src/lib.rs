//! Commutator frames, almost-exponential maps and control-ball measurements
//! for involutive families of vector fields.

pub mod error;
pub mod families;
pub mod fields;
pub mod flows;
pub mod linalg;
pub mod measures;
pub mod metrics;
pub mod multilinear;
pub mod ode;
pub mod poly;
pub mod pullback;
pub mod suite;

pub use error::{GeoError, Result};
