//! Simulation and analysis toolkit for a photoionization single-atom
//! detector: electrostatic ion optics near an atom chip, Monte Carlo
//! ionization and detection, coincidence calibration of the ion detection
//! efficiency, and time-of-flight mass discrimination.
//!
//! Everything is SI internally (metres, seconds, volts, kilograms).

// Input checks are written `!(x > 0.0)` so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod calibrate;
pub mod coincidence;
pub mod config;
pub mod detector;
pub mod error;
pub mod fields;
pub mod geometry;
pub mod rng;
pub mod scan;
pub mod source;
pub mod transport;
pub mod units;

pub type Vec3 = nalgebra::Vector3<f64>;

pub use calibrate::{CalibrationResult, CountReport};
pub use coincidence::{CoincidenceSpectrum, GaussianFit, WindowSpec};
pub use config::RunConfig;
pub use detector::{CemModel, ElectronChannelModel, PulseStream};
pub use error::{Error, Result};
pub use fields::{FieldBasis, PotentialGrid, SolveReport};
pub use geometry::{Assembly, Electrode, GeometryParams, Medium, Role, Shape, VoltageConfig};
pub use rng::SimRng;
pub use scan::{ScanResult, TofSpectrum};
pub use source::{BeamMode, IonBirthEvent, IonizationModel};
pub use transport::{ParticleState, Species, Status, Trajectory};
