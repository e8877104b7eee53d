//! Physical constants (CODATA 2018) and unit helpers. Everything internal is SI.

pub const ELEMENTARY_CHARGE: f64 = 1.602_176_634e-19;
pub const ATOMIC_MASS_UNIT: f64 = 1.660_539_066_60e-27;
pub const ELECTRON_MASS: f64 = 9.109_383_701_5e-31;
pub const BOLTZMANN: f64 = 1.380_649e-23;

/// Atomic mass of 87Rb in unified atomic mass units.
pub const RB87_MASS_U: f64 = 86.909_180_527;

pub const MM: f64 = 1e-3;
pub const UM: f64 = 1e-6;
pub const NM: f64 = 1e-9;
pub const NS: f64 = 1e-9;
pub const US: f64 = 1e-6;
