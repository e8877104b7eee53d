//! Voltage scans, voltage optimization and time-of-flight spectra.
//!
//! Transport scans estimate the detected fraction of ions born in the beam,
//! using the same random substream for particle `k` at every scan point so
//! that differences between points are not swamped by sampling noise.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibrate::{estimate_efficiency, simulate_calibration, ExperimentSetup};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::fields::FieldBasis;
use crate::geometry::{Assembly, VoltageConfig};
use crate::rng::{substream, tag};
use crate::source::{sample_birth_position, BeamMode, IonizationModel};
use crate::transport::{integrate, maxwell_boltzmann, IntegrateOptions, ParticleState, Species, Status};
use crate::Vec3;

/// Stray field (V/m) under which the extraction scan of the default
/// assembly rises at low `u_e` and levels off above about 40 V.
pub const REFERENCE_STRAY_FIELD: [f64; 3] = [0.0, 60.0, 0.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanPoint {
    pub x: f64,
    pub value: f64,
    pub error: f64,
    pub n: usize,
    /// Why the point has no value, if it failed.
    pub flag: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanResult {
    pub axis: String,
    pub unit: String,
    /// What `value` is (`detected_fraction`, `eta_i`, ...).
    pub quantity: String,
    /// Values divided by the largest one.
    pub normalized: bool,
    pub points: Vec<ScanPoint>,
}

impl ScanResult {
    pub fn values(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.value).collect()
    }

    /// Divides values and errors by the largest value.
    pub fn normalize(mut self) -> Self {
        let max = self
            .points
            .iter()
            .filter(|p| p.flag.is_none())
            .map(|p| p.value)
            .fold(0.0, f64::max);
        if max > 0.0 {
            for p in &mut self.points {
                p.value /= max;
                p.error /= max;
            }
        }
        self.normalized = true;
        self
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!(
            "# axis: {} [{}]\n# quantity: {}\n# normalized: {}\n",
            self.axis, self.unit, self.quantity, self.normalized
        );
        s.push_str(&format!("{}_{},{},error,n,flag\n", self.axis, self.unit, self.quantity));
        for p in &self.points {
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                p.x,
                p.value,
                p.error,
                p.n,
                p.flag.as_deref().unwrap_or("")
            ));
        }
        s
    }

    /// Error-weighted mean of the last `k` valid points and its standard
    /// error.
    pub fn plateau_estimate(&self, k: usize) -> Option<(f64, f64)> {
        let valid: Vec<&ScanPoint> = self
            .points
            .iter()
            .filter(|p| p.flag.is_none() && p.error > 0.0)
            .collect();
        if valid.len() < k || k == 0 {
            return None;
        }
        let (mut sw, mut swx) = (0.0, 0.0);
        for p in &valid[valid.len() - k..] {
            let w = 1.0 / (p.error * p.error);
            sw += w;
            swx += w * p.value;
        }
        Some((swx / sw, sw.sqrt().recip()))
    }
}

/// Field basis, geometry and birth model shared by the transport scans.
#[derive(Clone, Debug)]
pub struct ScanContext {
    pub basis: FieldBasis,
    pub assembly: Assembly,
    pub beam: BeamMode,
    pub ionization: IonizationModel,
    pub temperature_k: f64,
    pub stray_field: Vec3,
    pub integrate: IntegrateOptions,
}

impl ScanContext {
    /// `basis` must have been solved for the configured assembly geometry.
    pub fn new(cfg: &RunConfig, basis: FieldBasis) -> Result<Self> {
        let assembly = cfg.assembly()?;
        Ok(Self {
            beam: cfg.beam(&assembly)?,
            ionization: cfg.ionization()?,
            temperature_k: cfg.scan.temperature_k,
            stray_field: cfg.stray_field(),
            integrate: cfg.integrate_options(),
            basis,
            assembly,
        })
    }

    pub fn species(&self) -> &Species {
        &self.ionization.species
    }

    /// Detected fraction over `n` births and its binomial error. Birth `k`
    /// always uses substream `k` of `seed`.
    pub fn detection_rate(&self, v: &VoltageConfig, n: usize, seed: u64) -> Result<(f64, f64)> {
        if n == 0 {
            return Err(Error::InvalidInput("need at least one sample per point".into()));
        }
        let grid = self.basis.combine_voltages(v, self.stray_field);
        let asm = self.assembly.with_voltages(v).with_stray_field(self.stray_field);
        let species = self.species();
        let hits = (0..n)
            .into_par_iter()
            .map(|k| -> Result<usize> {
                let mut r = substream(seed, tag::PARTICLE, k as u64);
                let p = sample_birth_position(&self.beam, &self.ionization, &mut r);
                let vel = maxwell_boltzmann(species, self.temperature_k, &mut r);
                let start = ParticleState {
                    position: p,
                    velocity: vel,
                    time: 0.0,
                };
                let tr = integrate(&grid, &asm, species, &start, &self.integrate, &mut r)?;
                Ok(tr.detected() as usize)
            })
            .try_reduce(|| 0, |a, b| Ok(a + b))?;
        let f = hits as f64 / n as f64;
        Ok((f, (f * (1.0 - f) / n as f64).sqrt()))
    }

    /// Fraction of births at rest along the beam axis (ten points over the
    /// active segment) that reach the CEM with the mesh always passing.
    pub fn axial_impact_fraction(&self, v: &VoltageConfig) -> Result<f64> {
        let grid = self.basis.combine_voltages(v, self.stray_field);
        let asm = self.assembly.with_voltages(v).with_stray_field(self.stray_field);
        let opts = IntegrateOptions {
            mesh_absorbs: false,
            ..self.integrate
        };
        let m = 10;
        let hits = (0..m)
            .into_par_iter()
            .map(|i| -> Result<usize> {
                let s = self.beam.segment_length * ((i as f64 + 0.5) / m as f64 - 0.5);
                let start = ParticleState::at_rest(self.beam.origin + s * self.beam.direction, 0.0);
                let tr = integrate(
                    &grid,
                    &asm,
                    self.species(),
                    &start,
                    &opts,
                    &mut crate::rng::seeded(i as u64),
                )?;
                Ok((tr.status == Status::HitCem) as usize)
            })
            .try_reduce(|| 0, |a, b| Ok(a + b))?;
        Ok(hits as f64 / m as f64)
    }
}

fn point(x: f64, r: Result<(f64, f64)>, n: usize) -> ScanPoint {
    match r {
        Ok((value, error)) => ScanPoint {
            x,
            value,
            error,
            n,
            flag: None,
        },
        Err(e) => ScanPoint {
            x,
            value: f64::NAN,
            error: f64::NAN,
            n,
            flag: Some(e.to_string()),
        },
    }
}

/// Search settings for re-optimizing ratios at each scan point.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Reoptimize {
    pub bounds: RatioBounds,
    pub budget: usize,
    pub samples: usize,
}

/// Detected fraction against the extraction voltage. All voltages of `base`,
/// the CEM included, are scaled with `u_e`. With `reoptimize`, the tube and
/// deflection ratios are then optimized at every `u_e`.
pub fn scan_extraction_voltage<R: Rng + ?Sized>(
    ctx: &ScanContext,
    base: &VoltageConfig,
    u_e_values: &[f64],
    n: usize,
    reoptimize: Option<&Reoptimize>,
    rng: &mut R,
) -> Result<ScanResult> {
    let seed: u64 = rng.random();
    let mut points = Vec::with_capacity(u_e_values.len());
    for &u_e in u_e_values {
        let v = match reoptimize {
            Some(o) => {
                let start = VoltageConfig {
                    u_e,
                    ..base.scaled(u_e / base.u_e)
                };
                match optimize_ratios(ctx, &start, &o.bounds, o.budget, o.samples, seed) {
                    Ok(best) => best.voltages,
                    Err(e) => {
                        points.push(point(u_e.abs(), Err(e), n));
                        continue;
                    }
                }
            }
            None => base.scaled(u_e / base.u_e),
        };
        points.push(point(u_e.abs(), ctx.detection_rate(&v, n, seed), n));
    }
    Ok(ScanResult {
        axis: "u_e".into(),
        unit: "V".into(),
        quantity: "detected_fraction".into(),
        normalized: false,
        points,
    })
}

/// Normalized detected fraction against `u_t / u_e`. With `reoptimize`, the
/// deflection ratio is optimized per point within its bounds.
pub fn scan_tube_ratio<R: Rng + ?Sized>(
    ctx: &ScanContext,
    base: &VoltageConfig,
    ratios: &[f64],
    n: usize,
    reoptimize: Option<&Reoptimize>,
    rng: &mut R,
) -> Result<ScanResult> {
    let seed: u64 = rng.random();
    let mut points = Vec::with_capacity(ratios.len());
    for &tr in ratios {
        let dr = match reoptimize {
            Some(o) => {
                let bounds = RatioBounds {
                    tube: [tr, tr],
                    ..o.bounds
                };
                let start = VoltageConfig::from_ratios(base.u_e, tr, base.deflection_ratio(), base.u_c);
                match optimize_ratios(ctx, &start, &bounds, o.budget, o.samples, seed) {
                    Ok(best) => best.voltages.deflection_ratio(),
                    Err(_) => base.deflection_ratio(),
                }
            }
            None => base.deflection_ratio(),
        };
        let v = VoltageConfig::from_ratios(base.u_e, tr, dr, base.u_c);
        points.push(point(tr, ctx.detection_rate(&v, n, seed), n));
    }
    Ok(ScanResult {
        axis: "tube_ratio".into(),
        unit: "1".into(),
        quantity: "detected_fraction".into(),
        normalized: false,
        points,
    }
    .normalize())
}

/// Detected fraction over a grid of `(u_t / u_e, u_d / u_e)` at fixed `u_e`,
/// with the impact region predicted by noiseless axial trajectories.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatioPlane {
    pub u_e: f64,
    pub tube_ratios: Vec<f64>,
    pub deflection_ratios: Vec<f64>,
    /// Row-major, `rate[i * deflection_ratios.len() + j]` for tube ratio `i`.
    pub rate: Vec<f64>,
    pub error: Vec<f64>,
    pub impact: Vec<f64>,
    pub normalized: bool,
}

impl RatioPlane {
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.rate[i * self.deflection_ratios.len() + j]
    }

    pub fn mask(&self) -> Vec<bool> {
        self.impact.iter().map(|&f| f > 0.0).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!(
            "# u_e [V]: {}\n# normalized: {}\ntube_ratio,deflection_ratio,rate,error,impact_fraction\n",
            self.u_e, self.normalized
        );
        for (i, tr) in self.tube_ratios.iter().enumerate() {
            for (j, dr) in self.deflection_ratios.iter().enumerate() {
                let k = i * self.deflection_ratios.len() + j;
                s.push_str(&format!(
                    "{tr},{dr},{},{},{}\n",
                    self.rate[k], self.error[k], self.impact[k]
                ));
            }
        }
        s
    }
}

pub fn map_ratio_plane<R: Rng + ?Sized>(
    ctx: &ScanContext,
    u_e: f64,
    u_c: f64,
    tube_ratios: &[f64],
    deflection_ratios: &[f64],
    n: usize,
    rng: &mut R,
) -> Result<RatioPlane> {
    if tube_ratios.is_empty() || deflection_ratios.is_empty() {
        return Err(Error::InvalidInput(
            "ratio plane needs at least one value per axis".into(),
        ));
    }
    let seed: u64 = rng.random();
    let mut rate = Vec::new();
    let mut error = Vec::new();
    let mut impact = Vec::new();
    for &tr in tube_ratios {
        for &dr in deflection_ratios {
            let v = VoltageConfig::from_ratios(u_e, tr, dr, u_c);
            let (r, e) = ctx.detection_rate(&v, n, seed)?;
            rate.push(r);
            error.push(e);
            impact.push(ctx.axial_impact_fraction(&v)?);
        }
    }
    let max = rate.iter().cloned().fold(0.0, f64::max);
    if max > 0.0 {
        for (r, e) in rate.iter_mut().zip(error.iter_mut()) {
            *r /= max;
            *e /= max;
        }
    }
    Ok(RatioPlane {
        u_e,
        tube_ratios: tube_ratios.to_vec(),
        deflection_ratios: deflection_ratios.to_vec(),
        rate,
        error,
        impact,
        normalized: max > 0.0,
    })
}

/// Number of 4-connected components of `true` cells in an `nx` by `ny` grid
/// stored row-major.
pub fn connected_components(mask: &[bool], nx: usize, ny: usize) -> usize {
    assert_eq!(mask.len(), nx * ny);
    let mut seen = vec![false; mask.len()];
    let mut count = 0;
    let mut stack = Vec::new();
    for start in 0..mask.len() {
        if !mask[start] || seen[start] {
            continue;
        }
        count += 1;
        seen[start] = true;
        stack.push(start);
        while let Some(c) = stack.pop() {
            let (i, j) = (c / ny, c % ny);
            let mut visit = |n: usize| {
                if mask[n] && !seen[n] {
                    seen[n] = true;
                    stack.push(n);
                }
            };
            if i > 0 {
                visit(c - ny);
            }
            if i + 1 < nx {
                visit(c + ny);
            }
            if j > 0 {
                visit(c - 1);
            }
            if j + 1 < ny {
                visit(c + 1);
            }
        }
    }
    count
}

/// Efficiency from the full calibration chain against the CEM bias. Each
/// point uses its own substream, so neighbouring points are statistically
/// independent.
pub fn scan_cem_voltage<R: Rng + ?Sized>(setup: &ExperimentSetup, biases: &[f64], rng: &mut R) -> Result<ScanResult> {
    if biases.is_empty() {
        return Err(Error::InvalidInput("no CEM voltages to scan".into()));
    }
    let seed: u64 = rng.random();
    let mut setup = setup.clone();
    if setup.analysis.window_center.is_none() {
        // Low biases give too few coincidences to fit, so the window is
        // placed once from a run at the highest bias.
        let top = biases.iter().cloned().fold(f64::MIN, f64::max);
        let mut probe = setup.clone();
        probe.cem_bias = top;
        let run = simulate_calibration(&probe, &mut substream(seed, tag::SCAN_POINT, u64::MAX))?;
        setup.analysis.window_center = run.fit.map(|f| f.mean);
    }
    let points = biases
        .par_iter()
        .enumerate()
        .map(|(i, &bias)| {
            let mut s = setup.clone();
            s.cem_bias = bias;
            let mut r = substream(seed, tag::SCAN_POINT, i as u64);
            let res = simulate_calibration(&s, &mut r).and_then(|run| estimate_efficiency(&run.report));
            point(bias, res.map(|c| (c.eta_i, c.sigma_eta)), 1)
        })
        .collect();
    Ok(ScanResult {
        axis: "cem_bias".into(),
        unit: "V".into(),
        quantity: "eta_i".into(),
        normalized: false,
        points,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatioBounds {
    /// `u_t / u_e`.
    pub tube: [f64; 2],
    /// `u_d / u_e`.
    pub deflection: [f64; 2],
}

impl RatioBounds {
    fn clamp(&self, x: [f64; 2]) -> [f64; 2] {
        [
            x[0].clamp(self.tube[0], self.tube[1]),
            x[1].clamp(self.deflection[0], self.deflection[1]),
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizedVoltages {
    pub voltages: VoltageConfig,
    pub rate: f64,
    pub error: f64,
    pub evaluations: usize,
}

/// Maximizes the detected fraction over the tube and deflection ratios at
/// the `u_e` of `start`: a 5 x 5 grid pass over `bounds`, then Nelder-Mead
/// from the best grid point with at most `budget` further evaluations.
/// Every evaluation uses the same births.
pub fn optimize_voltages<R: Rng + ?Sized>(
    ctx: &ScanContext,
    start: &VoltageConfig,
    bounds: &RatioBounds,
    budget: usize,
    n: usize,
    rng: &mut R,
) -> Result<OptimizedVoltages> {
    let seed: u64 = rng.random();
    optimize_ratios(ctx, start, bounds, budget, n, seed)
}

fn optimize_ratios(
    ctx: &ScanContext,
    start: &VoltageConfig,
    bounds: &RatioBounds,
    budget: usize,
    n: usize,
    seed: u64,
) -> Result<OptimizedVoltages> {
    let (u_e, u_c) = (start.u_e, start.u_c);
    let mut evals = 0usize;
    let mut eval = |x: [f64; 2]| -> Result<(f64, f64)> {
        evals += 1;
        ctx.detection_rate(&VoltageConfig::from_ratios(u_e, x[0], x[1], u_c), n, seed)
    };
    let g = 5;
    let axis = |b: [f64; 2], i: usize| {
        if g == 1 || b[0] == b[1] {
            b[0]
        } else {
            b[0] + (b[1] - b[0]) * i as f64 / (g - 1) as f64
        }
    };
    let mut best = ([start.tube_ratio(), start.deflection_ratio()], f64::MIN);
    let mut seen = Vec::new();
    for i in 0..g {
        for j in 0..g {
            let x = [axis(bounds.tube, i), axis(bounds.deflection, j)];
            if seen.contains(&x) {
                continue;
            }
            seen.push(x);
            let (r, _) = eval(x)?;
            if r > best.1 {
                best = (x, r);
            }
        }
    }
    if best.1 <= 0.0 {
        return Err(Error::NoSignalInBounds);
    }
    let step = [
        (bounds.tube[1] - bounds.tube[0]) / (g - 1) as f64 * 0.5,
        (bounds.deflection[1] - bounds.deflection[0]) / (g - 1) as f64 * 0.5,
    ];
    let mut failure = None;
    let (x, _) = nelder_mead(
        |x| {
            let x = bounds.clamp(x);
            match eval(x) {
                Ok((r, _)) => -r,
                Err(e) => {
                    failure.get_or_insert(e);
                    f64::INFINITY
                }
            }
        },
        best.0,
        step,
        budget,
    );
    if let Some(e) = failure {
        return Err(e);
    }
    let x = bounds.clamp(x);
    let voltages = VoltageConfig::from_ratios(u_e, x[0], x[1], u_c);
    let (rate, error) = ctx.detection_rate(&voltages, n, seed)?;
    Ok(OptimizedVoltages {
        voltages,
        rate,
        error,
        evaluations: evals + 1,
    })
}

/// Minimizes `f` over the plane from `x0` with an initial simplex of sides
/// `step`, stopping after `max_evals` evaluations or once the simplex
/// values agree. A zero step freezes that coordinate.
pub fn nelder_mead(
    mut f: impl FnMut([f64; 2]) -> f64,
    x0: [f64; 2],
    step: [f64; 2],
    max_evals: usize,
) -> ([f64; 2], f64) {
    let active: Vec<usize> = (0..2).filter(|&d| step[d] != 0.0).collect();
    let dim = active.len();
    let mut evals = 0;
    let mut call = |x: [f64; 2], evals: &mut usize| {
        *evals += 1;
        f(x)
    };
    let mut simplex: Vec<([f64; 2], f64)> = vec![(x0, call(x0, &mut evals))];
    if dim == 0 {
        return simplex[0];
    }
    for &d in &active {
        let mut x = x0;
        x[d] += step[d];
        simplex.push((x, call(x, &mut evals)));
    }
    let lerp = |a: [f64; 2], b: [f64; 2], t: f64| [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])];
    while evals < max_evals {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let (best, worst) = (simplex[0].1, simplex[dim].1);
        if (worst - best).abs() <= 1e-12 * best.abs().max(1e-12) && evals > dim + 1 {
            let spread = (0..2)
                .map(|d| (simplex[dim].0[d] - simplex[0].0[d]).abs())
                .fold(0.0, f64::max);
            if spread < 1e-6 {
                break;
            }
        }
        let mut centroid = [0.0; 2];
        for (x, _) in &simplex[..dim] {
            for d in 0..2 {
                centroid[d] += x[d] / dim as f64;
            }
        }
        let xw = simplex[dim].0;
        let xr = lerp(centroid, xw, -1.0);
        let fr = call(xr, &mut evals);
        if fr < simplex[0].1 {
            let xe = lerp(centroid, xw, -2.0);
            let fe = call(xe, &mut evals);
            simplex[dim] = if fe < fr { (xe, fe) } else { (xr, fr) };
        } else if fr < simplex[dim - 1].1 {
            simplex[dim] = (xr, fr);
        } else {
            let (xc, fc) = if fr < simplex[dim].1 {
                let xc = lerp(centroid, xr, 0.5);
                (xc, call(xc, &mut evals))
            } else {
                let xc = lerp(centroid, xw, 0.5);
                (xc, call(xc, &mut evals))
            };
            if fc < simplex[dim].1.min(fr) {
                simplex[dim] = (xc, fc);
            } else {
                let x0 = simplex[0].0;
                for v in simplex.iter_mut().skip(1) {
                    let x = lerp(x0, v.0, 0.5);
                    *v = (x, call(x, &mut evals));
                }
            }
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    simplex[0]
}

/// Settings of a pulsed time-of-flight run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TofPulse {
    pub n_per_species: usize,
    /// Births are uniform over `[0, birth_spread)`.
    pub birth_spread: f64,
    pub temperature_k: f64,
    /// Birth position for every ion; `None` samples the beam.
    pub position: Option<Vec3>,
    pub bin_width: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TofSpectrum {
    pub start: f64,
    pub bin_width: f64,
    pub species: Vec<String>,
    /// `counts[s][b]` for species `s`.
    pub counts: Vec<Vec<u64>>,
    /// Arrival times at the CEM per species.
    pub arrivals: Vec<Vec<f64>>,
}

impl TofSpectrum {
    pub fn peak_center(&self, species: &str) -> Option<f64> {
        let i = self.species.iter().position(|s| s == species)?;
        let a = &self.arrivals[i];
        (!a.is_empty()).then(|| a.iter().sum::<f64>() / a.len() as f64)
    }

    pub fn peak_width(&self, species: &str) -> Option<f64> {
        let i = self.species.iter().position(|s| s == species)?;
        let a = &self.arrivals[i];
        let m = self.peak_center(species)?;
        Some((a.iter().map(|t| (t - m).powi(2)).sum::<f64>() / a.len() as f64).sqrt())
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("t_s,{}\n", self.species.join(","));
        let nb = self.counts.first().map_or(0, Vec::len);
        for b in 0..nb {
            s.push_str(&format!("{:e}", self.start + b as f64 * self.bin_width));
            for c in &self.counts {
                s.push_str(&format!(",{}", c[b]));
            }
            s.push('\n');
        }
        s
    }
}

/// Arrival-time histogram for a pulse of ions of each species through the
/// voltages of `v`. The bin width shrinks if needed so that adjacent peaks
/// are at least five bins apart.
pub fn tof_spectrum<R: Rng + ?Sized>(
    ctx: &ScanContext,
    v: &VoltageConfig,
    species: &[Species],
    pulse: &TofPulse,
    rng: &mut R,
) -> Result<TofSpectrum> {
    if species.is_empty() || pulse.n_per_species == 0 || !(pulse.bin_width > 0.0) {
        return Err(Error::InvalidInput(
            "time-of-flight run needs species, ions and a bin width".into(),
        ));
    }
    let seed: u64 = rng.random();
    let grid = ctx.basis.combine_voltages(v, ctx.stray_field);
    let asm = ctx.assembly.with_voltages(v).with_stray_field(ctx.stray_field);
    let mut arrivals = Vec::with_capacity(species.len());
    for (si, sp) in species.iter().enumerate() {
        sp.validate()?;
        let model = IonizationModel::new(1.0, sp.clone());
        let mut times: Vec<f64> = (0..pulse.n_per_species)
            .into_par_iter()
            .map(|k| -> Result<Option<f64>> {
                let idx = (si * pulse.n_per_species + k) as u64;
                let mut r = substream(seed, tag::TOF, idx);
                let t0 = pulse.birth_spread * r.random::<f64>();
                let p = match pulse.position {
                    Some(p) => p,
                    None => sample_birth_position(&ctx.beam, &model, &mut r),
                };
                let start = ParticleState {
                    position: p,
                    velocity: maxwell_boltzmann(sp, pulse.temperature_k, &mut r),
                    time: t0,
                };
                let tr = integrate(&grid, &asm, sp, &start, &ctx.integrate, &mut r)?;
                Ok(tr.tof.map(|tof| t0 + tof))
            })
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .flatten()
            .collect();
        times.sort_by(f64::total_cmp);
        arrivals.push(times);
    }
    if arrivals.iter().all(Vec::is_empty) {
        return Err(Error::NotDetected("no ion of the pulse reached the CEM".into()));
    }
    let names: Vec<String> = species.iter().map(|s| s.name.clone()).collect();
    let mut centers: Vec<f64> = arrivals
        .iter()
        .filter(|a| !a.is_empty())
        .map(|a| a.iter().sum::<f64>() / a.len() as f64)
        .collect();
    centers.sort_by(f64::total_cmp);
    let min_sep = centers.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min);
    let bin_width = pulse.bin_width.min(min_sep / 5.0);
    let lo = arrivals.iter().flatten().cloned().fold(f64::INFINITY, f64::min);
    let hi = arrivals.iter().flatten().cloned().fold(f64::NEG_INFINITY, f64::max);
    let start = (lo / bin_width).floor() * bin_width;
    let nb = ((hi - start) / bin_width).floor() as usize + 1;
    let counts = arrivals
        .iter()
        .map(|a| {
            let mut c = vec![0u64; nb];
            for &t in a {
                c[(((t - start) / bin_width).floor() as usize).min(nb - 1)] += 1;
            }
            c
        })
        .collect();
    Ok(TofSpectrum {
        start,
        bin_width,
        species: names,
        counts,
        arrivals,
    })
}
