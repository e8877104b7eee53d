use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{integrate, IntegrateOptions, ParticleState, Species, Status};
use crate::error::{Error, Result};
use crate::fields::PotentialGrid;
use crate::geometry::Assembly;
use crate::units::NS;

/// Lumped electron path from the ionization region to the electron CEM.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElectronTransitModel {
    pub offset: f64,
    pub jitter: f64,
}

impl Default for ElectronTransitModel {
    fn default() -> Self {
        Self {
            offset: 10.0 * NS,
            jitter: 20.0 * NS,
        }
    }
}

impl ElectronTransitModel {
    pub fn from_ns(offset_ns: f64, jitter_ns: f64) -> Self {
        Self {
            offset: offset_ns * NS,
            jitter: jitter_ns * NS,
        }
    }
}

/// Pulse time of the electron released with an ion born at `birth`, or
/// `None` if its straight path towards the barrier misses the aperture.
/// Exactly one normal draw is made per call.
pub fn electron_transit<R: Rng + ?Sized>(
    assembly: &Assembly,
    model: &ElectronTransitModel,
    birth: &ParticleState,
    rng: &mut R,
) -> Option<f64> {
    let jitter = Normal::new(0.0, 1.0).expect("unit normal").sample(rng) * model.jitter;
    let aperture = assembly.landmarks.electron_aperture_radius?;
    let r = birth.position[0].hypot(birth.position[1]);
    (r < aperture).then_some(birth.time + model.offset + jitter)
}

/// Diagnostic: integrates the electron through the solved field until it
/// leaves the grid through the barrier aperture, then lets it drift
/// field-free to the collector plate. Returns the arrival time at the
/// collector, or `None` if the electron hits an electrode.
pub fn electron_transit_full<R: Rng + ?Sized>(
    grid: &PotentialGrid,
    assembly: &Assembly,
    birth: &ParticleState,
    opts: &IntegrateOptions,
    rng: &mut R,
) -> Result<Option<f64>> {
    let collector = assembly
        .landmarks
        .electron_collector_distance
        .ok_or_else(|| Error::InvalidInput("electron transit needs the calibration assembly".into()))?;
    let electron = Species::electron();
    let opts = IntegrateOptions {
        dt_init: opts.dt_init.min(1e-12),
        t_max: opts.t_max.min(1e-6),
        ..*opts
    };
    let tr = integrate(grid, assembly, &electron, birth, &opts, rng)?;
    if tr.status != Status::Escaped {
        return Ok(None);
    }
    let last = tr.last();
    let bottom = assembly.domain.min[2];
    let vz = last.velocity[2];
    if last.position[2] > bottom + 1e-6 || vz >= 0.0 {
        return Ok(None);
    }
    Ok(Some(last.time + collector / vz.abs()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_calibration_assembly, build_detector_assembly, GeometryParams};
    use crate::rng::seeded;
    use crate::Vec3;

    #[test]
    fn aperture_containment_and_zero_jitter() {
        let a = build_calibration_assembly(&GeometryParams::default()).unwrap();
        let model = ElectronTransitModel::from_ns(10.0, 0.0);
        let mut rng = seeded(5);
        let on_axis = ParticleState::at_rest(Vec3::new(0.0, 0.0, 0.7e-3), 1e-3);
        let t = electron_transit(&a, &model, &on_axis, &mut rng).unwrap();
        assert_eq!(t, 1e-3 + 10e-9);
        let off = ParticleState::at_rest(Vec3::new(0.4e-3, 0.0, 0.7e-3), 0.0);
        assert!(electron_transit(&a, &model, &off, &mut rng).is_none());
    }

    #[test]
    fn jitter_has_the_configured_spread() {
        let a = build_calibration_assembly(&GeometryParams::default()).unwrap();
        let model = ElectronTransitModel::from_ns(10.0, 20.0);
        let mut rng = seeded(6);
        let birth = ParticleState::at_rest(Vec3::new(0.0, 0.0, 0.7e-3), 0.0);
        let n = 20_000;
        let d: Vec<f64> = (0..n)
            .map(|_| electron_transit(&a, &model, &birth, &mut rng).unwrap())
            .collect();
        let mean = d.iter().sum::<f64>() / n as f64;
        let sd = (d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
        assert!((mean - 10e-9).abs() < 1e-9);
        assert!((sd / 20e-9 - 1.0).abs() < 0.03);
    }

    #[test]
    fn detector_assembly_has_no_electron_channel() {
        let a = build_detector_assembly(&GeometryParams::default()).unwrap();
        let birth = ParticleState::at_rest(Vec3::new(0.0, 0.0, 0.7e-3), 0.0);
        assert!(electron_transit(&a, &ElectronTransitModel::default(), &birth, &mut seeded(1)).is_none());
    }
}
