//! Precomputed transport over a box of birth positions.
//!
//! Integrating every ion of a long calibration run is needlessly slow: the
//! outcome depends almost entirely on the birth position. The table stores,
//! on a lattice, whether an ion born at rest reaches the CEM and when. Lookups
//! interpolate the arrival indicator trilinearly (used as a probability) and
//! correct the flight time to first order for the initial velocity.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{integrate, IntegrateOptions, ParticleState, Species};
use crate::error::{Error, Result};
use crate::fields::PotentialGrid;
use crate::geometry::{Aabb, Assembly};
use crate::rng::seeded;
use crate::Vec3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableSpec {
    pub region: Aabb,
    pub dims: [usize; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransportTable {
    pub species: Species,
    pub spec: TableSpec,
    /// 1 where an ion born at rest reaches the CEM (mesh always
    /// transmitting), 0 otherwise.
    arrive: Vec<f64>,
    /// Flight time, NaN where the ion does not arrive.
    tof: Vec<f64>,
    /// Acceleration at each node, for the initial-velocity correction.
    accel: Vec<Vec3>,
}

impl TransportTable {
    pub fn build(
        grid: &PotentialGrid,
        assembly: &Assembly,
        species: &Species,
        spec: &TableSpec,
        opts: &IntegrateOptions,
    ) -> Result<Self> {
        if spec.dims.iter().any(|&n| n < 2) {
            return Err(Error::InvalidInput(
                "transport table needs at least 2 nodes per axis".into(),
            ));
        }
        let [nx, ny, nz] = spec.dims;
        let opts = IntegrateOptions {
            mesh_absorbs: false,
            record: false,
            ..*opts
        };
        let qm = species.charge / species.mass;
        let nodes: Vec<(usize, Vec3)> = (0..nx * ny * nz)
            .map(|n| {
                let (i, j, k) = (n / (ny * nz), (n / nz) % ny, n % nz);
                (n, node_position(spec, i, j, k))
            })
            .collect();
        let results = nodes
            .par_iter()
            .map(|&(n, p)| -> Result<(f64, f64, Vec3)> {
                let start = ParticleState::at_rest(p, 0.0);
                let accel = qm * grid.field_at(&p)?;
                let tr = integrate(grid, assembly, species, &start, &opts, &mut seeded(n as u64))?;
                Ok(match tr.tof {
                    Some(t) => (1.0, t, accel),
                    None => (0.0, f64::NAN, accel),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut arrive = Vec::with_capacity(results.len());
        let mut tof = Vec::with_capacity(results.len());
        let mut accel = Vec::with_capacity(results.len());
        for (a, t, acc) in results {
            arrive.push(a);
            tof.push(t);
            accel.push(acc);
        }
        Ok(Self {
            species: species.clone(),
            spec: spec.clone(),
            arrive,
            tof,
            accel,
        })
    }

    /// Fraction of lattice nodes whose ions arrive.
    pub fn arrival_fraction(&self) -> f64 {
        self.arrive.iter().sum::<f64>() / self.arrive.len() as f64
    }

    fn corners(&self, p: &Vec3) -> Option<[(usize, f64); 8]> {
        let r = &self.spec.region;
        if !r.contains(p) {
            return None;
        }
        let mut base = [0usize; 3];
        let mut t = [0.0; 3];
        for d in 0..3 {
            let n = self.spec.dims[d];
            let x = (p[d] - r.min[d]) / (r.max[d] - r.min[d]) * (n - 1) as f64;
            let c = (x.floor() as usize).min(n - 2);
            base[d] = c;
            t[d] = x - c as f64;
        }
        let [_, ny, nz] = self.spec.dims;
        let mut out = [(0usize, 0.0); 8];
        for (m, slot) in out.iter_mut().enumerate() {
            let (a, b, c) = (m >> 2, (m >> 1) & 1, m & 1);
            let w = (if a == 1 { t[0] } else { 1.0 - t[0] })
                * (if b == 1 { t[1] } else { 1.0 - t[1] })
                * (if c == 1 { t[2] } else { 1.0 - t[2] });
            *slot = (((base[0] + a) * ny + base[1] + b) * nz + base[2] + c, w);
        }
        Some(out)
    }

    /// Interpolated arrival probability; zero outside the table region.
    pub fn arrival_probability(&self, p: &Vec3) -> f64 {
        self.corners(p)
            .map(|cs| cs.iter().map(|&(n, w)| w * self.arrive[n]).sum())
            .unwrap_or(0.0)
    }

    /// Flight time for an ion born at `p` with velocity `v`, interpolated
    /// over the arriving corners. The first-order velocity correction is
    /// `-(v . a_hat) / |a|`: an ion already moving along the force gains
    /// that much time on one starting from rest.
    pub fn flight_time(&self, p: &Vec3, v: &Vec3) -> Option<f64> {
        let cs = self.corners(p)?;
        let mut wsum = 0.0;
        let mut t = 0.0;
        let mut acc = Vec3::zeros();
        for &(n, w) in &cs {
            acc += w * self.accel[n];
            if self.arrive[n] > 0.0 {
                wsum += w;
                t += w * self.tof[n];
            }
        }
        if wsum <= 0.0 {
            return None;
        }
        let mut t = t / wsum;
        let a = acc.norm();
        if a > 0.0 {
            t -= v.dot(&acc) / (a * a);
        }
        Some(t)
    }

    /// Arrival draw and flight time for one ion. Always consumes exactly
    /// one uniform from `rng`.
    pub fn sample<R: Rng + ?Sized>(&self, p: &Vec3, v: &Vec3, rng: &mut R) -> Option<f64> {
        let u: f64 = rng.random();
        if u < self.arrival_probability(p) {
            self.flight_time(p, v)
        } else {
            None
        }
    }
}

fn node_position(spec: &TableSpec, i: usize, j: usize, k: usize) -> Vec3 {
    let r = &spec.region;
    let f = |d: usize, n: usize| r.min[d] + (r.max[d] - r.min[d]) * n as f64 / (spec.dims[d] - 1) as f64;
    Vec3::new(f(0, i), f(1, j), f(2, k))
}
