//! Charged-particle motion through a solved field: adaptive RK4 with step
//! doubling, geometric collision detection and the mesh transmission draw.

mod electron;
mod map;
mod table;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::PotentialGrid;
use crate::geometry::{Assembly, Medium, MeshPlane, Role};
use crate::units::{ATOMIC_MASS_UNIT, BOLTZMANN, ELECTRON_MASS, ELEMENTARY_CHARGE, MM, RB87_MASS_U, UM};
use crate::Vec3;

pub use electron::{electron_transit, electron_transit_full, ElectronTransitModel};
pub use map::{detection_map, DetectionMap, LaunchSpec, MapEntry, MapOptions};
pub use table::{TableSpec, TransportTable};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Species {
    pub name: String,
    /// kg
    pub mass: f64,
    /// C
    pub charge: f64,
}

impl Species {
    pub fn new(name: &str, mass_u: f64, charge_e: f64) -> Self {
        Self {
            name: name.to_string(),
            mass: mass_u * ATOMIC_MASS_UNIT,
            charge: charge_e * ELEMENTARY_CHARGE,
        }
    }

    pub fn rb87_ion() -> Self {
        Self::new("Rb+", RB87_MASS_U, 1.0)
    }

    pub fn rb2_ion() -> Self {
        Self::new("Rb2+", 2.0 * RB87_MASS_U, 1.0)
    }

    pub fn k39_ion() -> Self {
        Self::new("K+", 38.963_706_486, 1.0)
    }

    pub fn electron() -> Self {
        Self {
            name: "e-".to_string(),
            mass: ELECTRON_MASS,
            charge: -ELEMENTARY_CHARGE,
        }
    }

    /// Looks up one of the built-in species by name.
    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "Rb+" | "rb" | "Rb" => Some(Self::rb87_ion()),
            "Rb2+" | "rb2" | "Rb2" => Some(Self::rb2_ion()),
            "K+" | "k" | "K" => Some(Self::k39_ion()),
            "e-" | "electron" => Some(Self::electron()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mass > 0.0) || self.charge == 0.0 || !self.charge.is_finite() {
            return Err(Error::InvalidInput(format!(
                "species {} needs positive mass and nonzero charge",
                self.name
            )));
        }
        Ok(())
    }

    pub fn mass_to_charge(&self) -> f64 {
        self.mass / self.charge.abs()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParticleState {
    pub position: Vec3,
    pub velocity: Vec3,
    pub time: f64,
}

impl ParticleState {
    pub fn at_rest(position: Vec3, time: f64) -> Self {
        Self {
            position,
            velocity: Vec3::zeros(),
            time,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Status {
    HitCem,
    HitElectrode(String),
    AbsorbedByMesh,
    Escaped,
    TimedOut,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub species: String,
    pub samples: Vec<ParticleState>,
    pub status: Status,
    /// Flight time for CEM hits.
    pub tof: Option<f64>,
    /// Time at which the exit mesh plane was crossed inside its window,
    /// whether or not the particle was transmitted.
    pub mesh_time: Option<f64>,
    pub steps: usize,
    /// Largest excursion of total energy from its initial value, relative to
    /// `initial kinetic + |q U_e|`.
    pub energy_drift: f64,
}

impl Trajectory {
    pub fn first(&self) -> &ParticleState {
        &self.samples[0]
    }

    pub fn last(&self) -> &ParticleState {
        self.samples.last().expect("trajectory has samples")
    }

    pub fn detected(&self) -> bool {
        self.status == Status::HitCem
    }

    /// Reached the mesh inside its window, before any transmission loss.
    pub fn reached_mesh(&self) -> bool {
        self.mesh_time.is_some()
    }

    /// CSV rows `t,x,y,z,vx,vy,vz` with a header.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("t_s,x_m,y_m,z_m,vx_m_s,vy_m_s,vz_m_s\n");
        for p in &self.samples {
            s.push_str(&format!(
                "{:e},{:e},{:e},{:e},{:e},{:e},{:e}\n",
                p.time, p.position[0], p.position[1], p.position[2], p.velocity[0], p.velocity[1], p.velocity[2]
            ));
        }
        s
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntegrateOptions {
    pub dt_init: f64,
    /// Relative accuracy; also bounds the total energy drift as a fraction
    /// of `initial kinetic + |q U_e|`.
    pub tol: f64,
    pub t_max: f64,
    /// Keep every accepted step, otherwise only the first and last states.
    pub record: bool,
    /// Longest allowed step in space; defaults to the grid spacing.
    pub max_step_length: Option<f64>,
    /// When false the mesh always transmits (the draw is still made).
    pub mesh_absorbs: bool,
}

impl Default for IntegrateOptions {
    fn default() -> Self {
        Self {
            dt_init: 1e-9,
            tol: 1e-5,
            t_max: 50e-6,
            record: false,
            max_step_length: None,
            mesh_absorbs: true,
        }
    }
}

/// Returns the elapsed time of a CEM hit.
pub fn time_of_flight(traj: &Trajectory) -> Result<f64> {
    match (&traj.status, traj.tof) {
        (Status::HitCem, Some(t)) => Ok(t),
        (s, _) => Err(Error::NotDetected(format!("{s:?}"))),
    }
}

/// Isotropic Maxwell-Boltzmann velocity at temperature `t_kelvin`.
pub fn maxwell_boltzmann<R: Rng + ?Sized>(species: &Species, t_kelvin: f64, rng: &mut R) -> Vec3 {
    let sigma = (BOLTZMANN * t_kelvin.max(0.0) / species.mass).sqrt();
    let n = Normal::new(0.0, 1.0).expect("unit normal");
    Vec3::new(n.sample(rng), n.sample(rng), n.sample(rng)) * sigma
}

/// Bisection accuracy for surface crossings.
const SURFACE_TOL: f64 = 1.0 * UM;

struct Tracer<'a> {
    grid: &'a PotentialGrid,
    assembly: &'a Assembly,
    mesh: Option<MeshPlane>,
    qm: f64,
}

#[derive(Clone, Copy)]
struct Deriv {
    accel: Vec3,
    phi: f64,
}

enum Hit {
    None,
    Conductor(usize),
    Outside,
}

impl Tracer<'_> {
    #[inline]
    fn eval(&self, x: &Vec3) -> Option<Deriv> {
        if !self.assembly.domain.contains(x) {
            return None;
        }
        self.grid.potential_and_field(x).ok().map(|(phi, e)| Deriv {
            accel: self.qm * e,
            phi,
        })
    }

    /// One classical RK4 step; `None` if a stage leaves the domain.
    fn rk4(&self, x: &Vec3, v: &Vec3, a0: &Vec3, dt: f64) -> Option<(Vec3, Vec3)> {
        let h2 = 0.5 * dt;
        let x2 = x + h2 * v;
        let v2 = v + h2 * a0;
        let a2 = self.eval(&x2)?.accel;
        let x3 = x + h2 * v2;
        let v3 = v + h2 * a2;
        let a3 = self.eval(&x3)?.accel;
        let x4 = x + dt * v3;
        let v4 = v + dt * a3;
        let a4 = self.eval(&x4)?.accel;
        let xn = x + dt / 6.0 * (v + 2.0 * v2 + 2.0 * v3 + v4);
        let vn = v + dt / 6.0 * (a0 + 2.0 * a2 + 2.0 * a3 + a4);
        Some((xn, vn))
    }

    fn hit_at(&self, x: &Vec3) -> Hit {
        if !self.assembly.domain.contains(x) {
            return Hit::Outside;
        }
        match self.assembly.classify_padded(x, 0.0) {
            Medium::Conductor(i, _) => Hit::Conductor(i),
            _ => Hit::None,
        }
    }

    /// Smallest fraction of the step `[0, dt]` at which the particle is
    /// inside a conductor or outside the domain, found by bisection on
    /// sub-steps from the step start.
    fn locate_surface(&self, x: &Vec3, v: &Vec3, a0: &Vec3, dt: f64) -> (f64, Vec3, Vec3) {
        let mut lo = 0.0;
        let mut hi = 1.0;
        let mut end = self.advance(x, v, a0, dt);
        let mut x_lo = *x;
        while (end.0 - x_lo).norm() > SURFACE_TOL && hi - lo > 1e-12 {
            let mid = 0.5 * (lo + hi);
            let s = self.advance(x, v, a0, mid * dt);
            if matches!(self.hit_at(&s.0), Hit::None) {
                lo = mid;
                x_lo = s.0;
            } else {
                hi = mid;
                end = s;
            }
        }
        (hi * dt, end.0, end.1)
    }

    /// RK4 sub-step that degrades to a drift when a stage leaves the domain.
    fn advance(&self, x: &Vec3, v: &Vec3, a0: &Vec3, dt: f64) -> (Vec3, Vec3) {
        self.rk4(x, v, a0, dt)
            .unwrap_or_else(|| (x + dt * v + 0.5 * dt * dt * a0, v + dt * a0))
    }
}

/// Integrates `m dv/dt = q E(x)` from `start` until the particle hits a
/// conductor, is absorbed by the mesh, leaves the domain or runs out of time.
pub fn integrate<R: Rng + ?Sized>(
    grid: &PotentialGrid,
    assembly: &Assembly,
    species: &Species,
    start: &ParticleState,
    opts: &IntegrateOptions,
    rng: &mut R,
) -> Result<Trajectory> {
    species.validate()?;
    if !(opts.tol > 0.0 && opts.dt_init > 0.0) {
        return Err(Error::InvalidInput(
            "integrator tolerance and initial step must be positive".into(),
        ));
    }
    if let Medium::Conductor(i, _) = assembly.classify_point(&start.position)? {
        return Err(Error::StartsInConductor(assembly.electrodes[i].id.clone()));
    }
    let tracer = Tracer {
        grid,
        assembly,
        mesh: assembly.mesh(),
        qm: species.charge / species.mass,
    };
    let q = species.charge;
    let m = species.mass;
    let mut x = start.position;
    let mut v = start.velocity;
    let mut t = start.time;
    let mut d = tracer.eval(&x).ok_or(Error::OutOfDomain([x[0], x[1], x[2]]))?;

    let ke0 = 0.5 * m * v.norm_squared();
    let qu = (q * assembly.extraction_voltage()).abs();
    let e_ref = (ke0 + qu).max(f64::MIN_POSITIVE);
    let e0 = q * d.phi + ke0;
    let v_ref = (2.0 * qu / m).sqrt();
    let v_scale = v_ref.max(v.norm());
    let v_floor = 0.05 * v_ref;
    let cap = opts.max_step_length.unwrap_or(grid.spacing);
    let path_scale = 2.0 * assembly.domain.extent().norm();
    let pos_scale = 1.0 * MM;

    let mut dt = opts.dt_init;
    if v_scale > 0.0 {
        dt = dt.min(cap / v_scale);
    }
    let mut samples = vec![*start];
    let mut steps = 0usize;
    let mut drift = 0.0f64;
    let mut mesh_time = None;
    let t_end = start.time + opts.t_max;

    let status = loop {
        if t >= t_end {
            break Status::TimedOut;
        }
        let speed = v.norm().max(v_floor);
        let mut h = dt.min(t_end - t);
        if speed > 0.0 {
            h = h.min(cap / speed);
        }
        let full = tracer.rk4(&x, &v, &d.accel, h);
        let half = tracer.rk4(&x, &v, &d.accel, 0.5 * h).and_then(|(xm, vm)| {
            let am = tracer.eval(&xm)?;
            tracer.rk4(&xm, &vm, &am.accel, 0.5 * h)
        });
        let (Some((x1, v1)), Some((x2, v2))) = (full, half) else {
            // A stage left the domain. Shrink the step until the particle
            // is close enough to the boundary to call it an exit.
            if h * v.norm().max(v_floor) < SURFACE_TOL || h < 1e-18 {
                let (ts, xs, vs) = tracer.locate_surface(&x, &v, &d.accel, h.max(1e-18));
                samples.push(ParticleState {
                    position: xs,
                    velocity: vs,
                    time: t + ts,
                });
                break Status::Escaped;
            }
            dt = 0.5 * h;
            continue;
        };
        let xn = x2 + (x2 - x1) / 15.0;
        let vn = v2 + (v2 - v1) / 15.0;
        let err_x = (x2 - x1).norm() / (opts.tol * pos_scale);
        let err_v = if v_scale > 0.0 {
            (v2 - v1).norm() / (opts.tol * v_scale)
        } else {
            0.0
        };
        let dn = tracer.eval(&xn);
        let mut err = err_x.max(err_v);
        if let Some(dn) = &dn {
            let step_len = (xn - x).norm();
            let e_old = q * d.phi + 0.5 * m * v.norm_squared();
            let e_new = q * dn.phi + 0.5 * m * vn.norm_squared();
            let allowed = opts.tol * e_ref * (step_len / path_scale).max(1e-6);
            err = err.max((e_new - e_old).abs() / allowed);
        }
        if err > 1.0 {
            dt = h * (0.9 * err.powf(-0.25)).max(0.1);
            continue;
        }
        steps += 1;

        // Mesh plane crossing inside the window.
        if let (Some(mesh), None) = (&tracer.mesh, mesh_time) {
            let s0 = mesh.signed_distance(&x);
            let s1 = mesh.signed_distance(&xn);
            if s0 < 0.0 && s1 >= 0.0 {
                let f = s0 / (s0 - s1);
                let xc = x + f * (xn - x);
                if mesh.window_contains(&xc) {
                    let tc = t + f * h;
                    mesh_time = Some(tc);
                    let u: f64 = rng.random();
                    if opts.mesh_absorbs && u >= mesh.transmission {
                        samples.push(ParticleState {
                            position: xc,
                            velocity: v + f * (vn - v),
                            time: tc,
                        });
                        break Status::AbsorbedByMesh;
                    }
                }
            }
        }

        match tracer.hit_at(&xn) {
            Hit::None => {}
            hit => {
                let (ts, xs, vs) = tracer.locate_surface(&x, &v, &d.accel, h);
                let tc = t + ts;
                samples.push(ParticleState {
                    position: xs,
                    velocity: vs,
                    time: tc,
                });
                break match hit {
                    Hit::Conductor(i) => {
                        let e = &assembly.electrodes[i];
                        if e.role == Role::Cem {
                            Status::HitCem
                        } else {
                            Status::HitElectrode(e.id.clone())
                        }
                    }
                    _ => Status::Escaped,
                };
            }
        }
        let Some(dn) = dn else {
            // Unreachable in practice: `hit_at` already caught domain exits.
            break Status::Escaped;
        };
        drift = drift.max((q * dn.phi + 0.5 * m * vn.norm_squared() - e0).abs() / e_ref);
        x = xn;
        v = vn;
        t += h;
        d = dn;
        if opts.record {
            samples.push(ParticleState {
                position: x,
                velocity: v,
                time: t,
            });
        }
        dt = h * (0.9 * err.max(1e-10).powf(-0.2)).clamp(0.2, 4.0);
    };

    let last = *samples.last().expect("start sample");
    if !opts.record && status == Status::TimedOut && last.time < t {
        samples.push(ParticleState {
            position: x,
            velocity: v,
            time: t,
        });
    }
    // Keep sample times strictly increasing.
    samples.dedup_by(|b, a| b.time <= a.time);
    let tof = (status == Status::HitCem).then(|| samples.last().expect("sample").time - start.time);
    Ok(Trajectory {
        species: species.name.clone(),
        samples,
        status,
        tof,
        mesh_time,
        steps,
        energy_drift: drift,
    })
}
