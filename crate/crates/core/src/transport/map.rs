use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{integrate, maxwell_boltzmann, IntegrateOptions, ParticleState, Species};
use crate::error::{Error, Result};
use crate::fields::PotentialGrid;
use crate::geometry::Assembly;
use crate::rng::{substream, tag};
use crate::Vec3;

/// Birth positions for a detection map, all at one height above the chip.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LaunchSpec {
    /// `(x, y)` birth positions in metres.
    pub points: Vec<[f64; 2]>,
    pub height: f64,
}

impl LaunchSpec {
    /// Square lattice of pitch `pitch` clipped to a disc of `radius`.
    pub fn disc(radius: f64, pitch: f64, height: f64) -> Self {
        let n = (radius / pitch).floor() as i64;
        let mut points = Vec::new();
        for i in -n..=n {
            for j in -n..=n {
                let (x, y) = (i as f64 * pitch, j as f64 * pitch);
                if x * x + y * y <= radius * radius * (1.0 + 1e-12) {
                    points.push([x, y]);
                }
            }
        }
        Self { points, height }
    }

    /// Points along the `+x` axis at the given radial offsets.
    pub fn radial(offsets: &[f64], height: f64) -> Self {
        Self {
            points: offsets.iter().map(|&r| [r, 0.0]).collect(),
            height,
        }
    }

    pub fn radius(&self) -> f64 {
        self.points.iter().map(|p| p[0].hypot(p[1])).fold(0.0, f64::max)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapOptions {
    pub species: Species,
    /// Temperature of the initial Maxwell-Boltzmann velocities.
    pub temperature_k: f64,
    pub integrate: IntegrateOptions,
}

impl Default for MapOptions {
    fn default() -> Self {
        Self {
            species: Species::rb87_ion(),
            temperature_k: 0.0,
            integrate: IntegrateOptions::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapEntry {
    pub x0: f64,
    pub y0: f64,
    pub n: usize,
    pub detected: usize,
    /// Reached the mesh window, before the transmission draw.
    pub reached: usize,
}

impl MapEntry {
    pub fn fraction(&self) -> f64 {
        self.detected as f64 / self.n.max(1) as f64
    }

    pub fn reached_fraction(&self) -> f64 {
        self.reached as f64 / self.n.max(1) as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionMap {
    pub entries: Vec<MapEntry>,
    pub height: f64,
}

impl DetectionMap {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("x0_m,y0_m,fraction,reached_fraction,n\n");
        for e in &self.entries {
            s.push_str(&format!(
                "{:e},{:e},{},{},{}\n",
                e.x0,
                e.y0,
                e.fraction(),
                e.reached_fraction(),
                e.n
            ));
        }
        s
    }

    pub fn total_detected(&self) -> usize {
        self.entries.iter().map(|e| e.detected).sum()
    }

    pub fn total(&self) -> usize {
        self.entries.iter().map(|e| e.n).sum()
    }
}

/// Monte Carlo estimate of the detection probability for each birth point.
/// Particle `k` of point `p` uses substream `p * n_samples + k` of a seed
/// drawn once from `rng`, so the result does not depend on thread count.
pub fn detection_map<R: Rng + ?Sized>(
    grid: &PotentialGrid,
    assembly: &Assembly,
    launch: &LaunchSpec,
    n_samples: usize,
    opts: &MapOptions,
    rng: &mut R,
) -> Result<DetectionMap> {
    if launch.points.is_empty() || n_samples == 0 {
        return Err(Error::InvalidInput(
            "detection map needs at least one point and one sample".into(),
        ));
    }
    let seed: u64 = rng.random();
    let base = launch.height;
    let entries = launch
        .points
        .par_iter()
        .enumerate()
        .map(|(pi, &[x0, y0])| -> Result<MapEntry> {
            let mut detected = 0;
            let mut reached = 0;
            for k in 0..n_samples {
                let mut r = substream(seed, tag::PARTICLE, (pi * n_samples + k) as u64);
                let v = maxwell_boltzmann(&opts.species, opts.temperature_k, &mut r);
                let start = ParticleState {
                    position: Vec3::new(x0, y0, base),
                    velocity: v,
                    time: 0.0,
                };
                let tr = integrate(grid, assembly, &opts.species, &start, &opts.integrate, &mut r)?;
                if tr.detected() {
                    detected += 1;
                }
                if tr.reached_mesh() {
                    reached += 1;
                }
            }
            Ok(MapEntry {
                x0,
                y0,
                n: n_samples,
                detected,
                reached,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DetectionMap { entries, height: base })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn disc_lattice_is_clipped() {
        let l = LaunchSpec::disc(1e-3, 0.25e-3, 1e-6);
        assert!(l.points.iter().all(|p| p[0].hypot(p[1]) <= 1e-3 * (1.0 + 1e-9)));
        assert!(l.points.contains(&[0.0, 0.0]));
        assert_eq!(l.points.len(), 49);
        assert!((l.radius() - 1e-3).abs() < 1e-15);
    }
}
