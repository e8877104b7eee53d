//! Photoionization events in the cavity mode.
//!
//! The ionization rate is linear in the local intensity, so births form a
//! homogeneous Poisson process in time whose positions follow the Gaussian
//! transverse profile of the mode and are uniform along its axis.

use std::f64::consts::TAU;

use rand::Rng;
use rand_distr::{Distribution, Exp, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::transport::Species;
use crate::units::{NM, UM};
use crate::Vec3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BeamMode {
    /// Centre of the active segment.
    pub origin: Vec3,
    /// Unit vector along the optical axis. Must lie in the `xy` plane, i.e.
    /// parallel to the extraction electrode.
    pub direction: Vec3,
    /// 1/e^2 intensity radius.
    pub waist: f64,
    /// Circulating power in watts.
    pub power: f64,
    /// Length of the axis over which ions are produced.
    pub segment_length: f64,
}

impl BeamMode {
    pub fn new(origin: Vec3, direction: Vec3, waist: f64, power: f64, segment_length: f64) -> Result<Self> {
        let norm = direction.norm();
        if !(norm > 0.0) {
            return Err(Error::InvalidInput("beam direction must be non-zero".into()));
        }
        let mode = Self {
            origin,
            direction: direction / norm,
            waist,
            power,
            segment_length,
        };
        mode.validate()?;
        Ok(mode)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.waist > 0.0) {
            return Err(Error::InvalidInput(format!(
                "beam waist must be positive, got {}",
                self.waist
            )));
        }
        if !(self.segment_length > 0.0) {
            return Err(Error::InvalidInput("active segment length must be positive".into()));
        }
        if !(self.power >= 0.0) {
            return Err(Error::InvalidInput("circulating power must be non-negative".into()));
        }
        if (self.direction.norm() - 1.0).abs() > 1e-9 || self.direction[2].abs() > 1e-9 {
            return Err(Error::InvalidInput(
                "beam axis must be a unit vector parallel to the extraction electrode".into(),
            ));
        }
        Ok(())
    }

    /// Two unit vectors completing the axis to a right-handed frame.
    fn transverse(&self) -> (Vec3, Vec3) {
        let a = Vec3::z().cross(&self.direction).normalize();
        let b = self.direction.cross(&a);
        (a, b)
    }

    fn radial_distance(&self, p: &Vec3) -> f64 {
        let d = p - self.origin;
        (d - d.dot(&self.direction) * self.direction).norm()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IonizationModel {
    /// Ions per second per watt of circulating power over the active segment.
    pub rate_per_watt: f64,
    pub species: Species,
    /// When set, births are thinned by the `cos^2` standing-wave pattern of
    /// this wavelength. Off by default.
    pub standing_wave_wavelength: Option<f64>,
}

impl IonizationModel {
    pub fn new(rate_per_watt: f64, species: Species) -> Self {
        Self {
            rate_per_watt,
            species,
            standing_wave_wavelength: None,
        }
    }

    /// Standing-wave modulation for the 778.1 nm two-photon light.
    pub fn with_standing_wave(mut self) -> Self {
        self.standing_wave_wavelength = Some(778.1066 * NM);
        self
    }

    pub fn rate(&self, mode: &BeamMode) -> f64 {
        self.rate_per_watt * mode.power
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IonBirthEvent {
    pub time: f64,
    pub position: Vec3,
    pub species: String,
}

#[derive(Serialize)]
struct EventRecord<'a> {
    t: f64,
    x: f64,
    y: f64,
    z: f64,
    species: &'a str,
}

/// Peak-normalized intensity of the fundamental Gaussian mode.
pub fn intensity_at(mode: &BeamMode, p: &Vec3) -> f64 {
    let r = mode.radial_distance(p);
    (-2.0 * r * r / (mode.waist * mode.waist)).exp()
}

/// Births over `[0, duration)`, sorted by time. Positions are truncated to
/// a cylinder of radius `3 w0` around the axis by redrawing.
pub fn sample_events<R: Rng + ?Sized>(
    mode: &BeamMode,
    model: &IonizationModel,
    duration: f64,
    rng: &mut R,
) -> Result<Vec<IonBirthEvent>> {
    if !(duration > 0.0) {
        return Err(Error::InvalidInput(format!(
            "duration must be positive, got {duration}"
        )));
    }
    mode.validate()?;
    let rate = model.rate(mode);
    if !(rate > 0.0) {
        return Ok(Vec::new());
    }
    let gaps = Exp::new(rate).map_err(|e| Error::InvalidInput(e.to_string()))?;
    let mut events = Vec::with_capacity((rate * duration * 1.05) as usize + 16);
    let mut t = 0.0;
    loop {
        t += gaps.sample(rng);
        if t >= duration {
            break;
        }
        let p = sample_birth_position(mode, model, rng);
        events.push(IonBirthEvent {
            time: t,
            position: p,
            species: model.species.name.clone(),
        });
    }
    Ok(events)
}

/// One birth position: uniform along the active segment (optionally
/// thinned by the standing wave), Gaussian across it with `sigma = w0 / 2`
/// per axis, truncated at `3 w0`.
pub fn sample_birth_position<R: Rng + ?Sized>(mode: &BeamMode, model: &IonizationModel, rng: &mut R) -> Vec3 {
    let radial = Normal::new(0.0, 0.5 * mode.waist).expect("positive waist");
    let (a, b) = mode.transverse();
    let r_max = 3.0 * mode.waist;
    let s = loop {
        let s = mode.segment_length * (rng.random::<f64>() - 0.5);
        match model.standing_wave_wavelength {
            Some(l) => {
                let c = (TAU / l * s).cos();
                if rng.random::<f64>() < c * c {
                    break s;
                }
            }
            None => break s,
        }
    };
    let (u, v) = loop {
        let u = radial.sample(rng);
        let v = radial.sample(rng);
        if u.hypot(v) <= r_max {
            break (u, v);
        }
    };
    mode.origin + s * mode.direction + u * a + v * b
}

/// One JSON object per line: `{"t":..,"x":..,"y":..,"z":..,"species":..}`.
pub fn to_json_lines(events: &[IonBirthEvent]) -> Result<String> {
    let mut out = String::new();
    for e in events {
        let rec = EventRecord {
            t: e.time,
            x: e.position[0],
            y: e.position[1],
            z: e.position[2],
            species: &e.species,
        };
        out.push_str(&serde_json::to_string(&rec)?);
        out.push('\n');
    }
    Ok(out)
}

/// Default cavity mode: waist 46 um along `y`, 1.5 mm active segment.
pub fn default_beam(center: Vec3, power: f64) -> BeamMode {
    BeamMode {
        origin: center,
        direction: Vec3::y(),
        waist: 46.0 * UM,
        power,
        segment_length: 1.5e-3,
    }
}
