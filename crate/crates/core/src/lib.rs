//! Privacy-preserving state estimation for linear time-invariant systems
//! observed through a pool of randomly sampled sensors.
//!
//! Each step, one sensor out of a heterogeneous pool is selected at random
//! and its measurement is fused into a Luenberger-style observer. The
//! observer may add Gaussian masking noise to its estimate so that the
//! published estimates reveal as little as possible about which sensors
//! contributed. The crate provides:
//!
//! - [`model`]: plant, sensor-pool, and observer descriptions plus validation;
//! - [`covariance`]: exact error-covariance propagation and its steady state;
//! - [`leakage`]: a log-determinant upper bound on the per-step information
//!   leaked about sensor identities, and masking-noise calibration against a
//!   leakage target;
//! - [`simulate`]: reproducible sampled trajectories and Monte Carlo ensembles;
//! - [`adversary`]: sensor-identity detectors and their empirical evaluation;
//! - [`harness`]: experiment configuration, sweeps, and CSV persistence;
//! - [`synth`]: deterministic random configurations for testing and profiling.
//!
//! The numerics are generic over the scalar type through [`FloatScalar`];
//! `f64` aliases for the main domain types live at the crate root.

pub mod adversary;
pub mod covariance;
mod error;
pub mod harness;
pub mod leakage;
mod linalg;
pub mod model;
pub mod simulate;
pub mod synth;

pub use error::{Error, Result};

/// Scalar types the numerics are generic over (`f32`, `f64`).
pub trait FloatScalar:
    nalgebra::RealField + Copy + num_traits::FromPrimitive + num_traits::ToPrimitive
{
}

impl<T> FloatScalar for T where
    T: nalgebra::RealField + Copy + num_traits::FromPrimitive + num_traits::ToPrimitive
{
}

/// Dynamically sized matrix over the generic scalar.
pub type Matrix<T> = nalgebra::DMatrix<T>;
/// Dynamically sized column vector over the generic scalar.
pub type Vector<T> = nalgebra::DVector<T>;

pub type SystemModel64 = model::SystemModel<f64>;
pub type Sensor64 = model::Sensor<f64>;
pub type SensorPool64 = model::SensorPool<f64>;
pub type ObserverConfig64 = model::ObserverConfig<f64>;
pub type Trajectory64 = simulate::Trajectory<f64>;
pub type EnsembleStats64 = simulate::EnsembleStats<f64>;

/// Converts an `f64` constant into the generic scalar.
pub(crate) fn real<T: FloatScalar>(x: f64) -> T {
    T::from_f64(x).expect("constant representable in scalar type")
}
