//! Coincidence calibration of the ion detection efficiency.
//!
//! Electrons are only collected from births that project through the
//! electron barrier aperture, which is smaller than the ion aperture, so
//! every ion partnered with a detected electron reaches the CEM. The ratio of
//! coincidences to electrons then measures the ion detection efficiency
//! without reference to the electron efficiency:
//!
//! `eta_i = N_c / N_e`, with `N_e = n_e - n_bg * t_signal / t_background`
//! and `N_c = n_c - n_false`.

use log::warn;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::coincidence::{
    count_coincidences, delay_spectrum, fit_gaussian, CoincidenceSpectrum, GaussianFit, WindowSpec,
};
use crate::config::RunConfig;
use crate::detector::{
    add_background, apply_dead_time, detect_ion, CemModel, Channel, ElectronChannelModel, PulseStream,
};
use crate::error::{Error, Result};
use crate::fields::PotentialGrid;
use crate::geometry::{Aabb, Assembly};
use crate::rng::{substream, tag};
use crate::source::{sample_events, BeamMode, IonBirthEvent, IonizationModel};
use crate::transport::{electron_transit, maxwell_boltzmann, ParticleState, TableSpec, TransportTable};
use crate::Vec3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CountReport {
    /// Electron pulses in the signal period.
    pub n_e_meas: u64,
    /// Electron pulses in the background period (laser off resonance).
    pub n_bg: u64,
    /// Coincidences in the window on the peak.
    pub n_c_meas: u64,
    /// Coincidences in the displaced window.
    pub n_false: u64,
    pub t_signal: f64,
    pub t_background: f64,
}

impl CountReport {
    fn check(&self) -> Result<()> {
        if !(self.t_signal > 0.0 && self.t_background > 0.0) {
            return Err(Error::InvalidInput("count periods must be positive".into()));
        }
        Ok(())
    }

    fn background_scale(&self) -> f64 {
        self.t_signal / self.t_background
    }

    pub fn corrected_electrons(&self) -> f64 {
        self.n_e_meas as f64 - self.n_bg as f64 * self.background_scale()
    }

    pub fn corrected_coincidences(&self) -> f64 {
        self.n_c_meas as f64 - self.n_false as f64
    }

    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.n_e_meas, self.n_bg, self.n_c_meas, self.n_false, self.t_signal, self.t_background
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    /// Estimate clamped to `[0, 1]`.
    pub eta_i: f64,
    /// Estimate before clamping.
    pub eta_i_raw: f64,
    pub sigma_eta: f64,
    pub n_e_corrected: f64,
    pub n_c_corrected: f64,
    /// Set when the corrected coincidence count was negative.
    pub clamped: bool,
    pub sub_poissonian: bool,
}

impl CalibrationResult {
    pub const CSV_HEADER: &'static str = "eta_i,sigma_eta,eta_i_raw,n_e_corrected,n_c_corrected,clamped,sub_poissonian";

    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.eta_i,
            self.sigma_eta,
            self.eta_i_raw,
            self.n_e_corrected,
            self.n_c_corrected,
            self.clamped,
            self.sub_poissonian
        )
    }
}

/// Applies the background and false-coincidence corrections and forms the
/// ratio.
pub fn estimate_efficiency(r: &CountReport) -> Result<CalibrationResult> {
    r.check()?;
    let n_e = r.corrected_electrons();
    if !(n_e > 0.0) {
        return Err(Error::NoSignal(n_e));
    }
    let raw_c = r.corrected_coincidences();
    let clamped = raw_c < 0.0;
    if clamped {
        warn!("corrected coincidence count {raw_c} is negative; using 0");
    }
    let n_c = raw_c.max(0.0);
    let eta_raw = raw_c / n_e;
    let eta = (n_c / n_e).min(1.0);
    let sigma = uncertainty(r, eta, n_e);
    Ok(CalibrationResult {
        eta_i: eta,
        eta_i_raw: eta_raw,
        sigma_eta: sigma,
        n_e_corrected: n_e,
        n_c_corrected: n_c,
        clamped,
        sub_poissonian: eta > 0.5,
    })
}

/// Standard error of the estimate: the binomial spread of coincidences
/// given `N_e` electrons, plus the Poisson errors of the two corrections.
///
/// `var = eta (1 - eta) / N_e + (2 n_false + eta^2 (s n_bg + s^2 n_bg)) / N_e^2`
/// with `s = t_signal / t_background`. The `s n_bg` term is the spread of
/// background electrons inside the signal period, `s^2 n_bg` that of its
/// estimate; the false coincidences in the peak window and their
/// displaced-window estimate each contribute `n_false`.
pub fn efficiency_uncertainty(r: &CountReport) -> Result<f64> {
    estimate_efficiency(r).map(|e| e.sigma_eta)
}

fn uncertainty(r: &CountReport, eta: f64, n_e: f64) -> f64 {
    let s = r.background_scale();
    let n_bg = r.n_bg as f64;
    let binomial = eta * (1.0 - eta) / n_e;
    let corrections = (2.0 * r.n_false as f64 + eta * eta * (s * n_bg + s * s * n_bg)) / (n_e * n_e);
    (binomial + corrections).sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdCheck {
    /// `eta_i > 0.5`.
    pub above: bool,
    pub margin: f64,
    /// 0.5 lies within one standard error of the estimate.
    pub within_one_sigma: bool,
}

/// Compares the estimate with the 50% efficiency above which atom number
/// can be determined with sub-Poissonian uncertainty.
pub fn sub_poissonian_check(result: &CalibrationResult) -> ThresholdCheck {
    let margin = result.eta_i - 0.5;
    ThresholdCheck {
        above: margin > 0.0,
        margin,
        within_one_sigma: margin.abs() <= result.sigma_eta,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalysisParams {
    pub t_signal: f64,
    pub t_background: f64,
    pub window_width: f64,
    /// Fixed window centre; `None` centres on the fitted peak of each run.
    pub window_center: Option<f64>,
    /// Offset of the false-coincidence window.
    pub displacement: f64,
    pub bin_width: f64,
    pub spectrum_range: (f64, f64),
}

impl Default for AnalysisParams {
    fn default() -> Self {
        RunConfig::default().analysis_params()
    }
}

/// Everything a calibration run needs, with the ion transport precomputed.
#[derive(Clone, Debug)]
pub struct ExperimentSetup {
    pub assembly: Assembly,
    pub beam: BeamMode,
    pub ionization: IonizationModel,
    pub temperature_k: f64,
    pub table: TransportTable,
    pub cem: CemModel,
    pub cem_bias: f64,
    pub electron: ElectronChannelModel,
    /// Mesh transmission drawn in the chain, if any.
    pub mesh_transmission: Option<f64>,
    pub analysis: AnalysisParams,
}

impl ExperimentSetup {
    /// Builds the transport table over the beam volume on `grid`, which must
    /// be solved for `assembly`.
    pub fn new(cfg: &RunConfig, grid: &PotentialGrid, assembly: &Assembly) -> Result<Self> {
        let beam = cfg.beam(assembly)?;
        let ionization = cfg.ionization()?;
        let spec = TableSpec {
            region: beam_bounds(&beam),
            dims: cfg.transport.table_dims,
        };
        let table = TransportTable::build(grid, assembly, &ionization.species, &spec, &cfg.integrate_options())?;
        let mesh_transmission = if cfg.ion_cem.mesh_in_chain {
            assembly.mesh().map(|m| m.transmission)
        } else {
            None
        };
        Ok(Self {
            assembly: assembly.clone(),
            beam,
            ionization,
            temperature_k: cfg.source.temperature_k,
            table,
            cem: cfg.cem_model(),
            cem_bias: cfg.ion_cem.bias_v,
            electron: cfg.electron_model(),
            mesh_transmission,
            analysis: cfg.analysis_params(),
        })
    }
}

/// Axis-aligned box around the truncated beam cylinder.
pub fn beam_bounds(beam: &BeamMode) -> Aabb {
    let r = 3.0 * beam.waist;
    let mut half = Vec3::zeros();
    for k in 0..3 {
        let d = beam.direction[k];
        half[k] = d.abs() * 0.5 * beam.segment_length + r * (1.0 - d * d).max(0.0).sqrt();
    }
    Aabb {
        min: beam.origin - half,
        max: beam.origin + half,
    }
}

/// Streams and analysis of one simulated calibration run.
#[derive(Clone, Debug)]
pub struct CalibrationRun {
    pub report: CountReport,
    pub spectrum: CoincidenceSpectrum,
    pub fit: Option<GaussianFit>,
    pub window: WindowSpec,
    pub electrons: PulseStream,
    pub ions: PulseStream,
    /// Ionization events in the signal period.
    pub births: usize,
    pub events: Vec<IonBirthEvent>,
    /// Events whose electron was detected, before background and dead time.
    pub tagged: usize,
    /// Tagged events whose ion was also detected.
    pub tagged_ions: usize,
}

impl CalibrationRun {
    /// Ion efficiency the estimator should recover, from event bookkeeping.
    pub fn true_efficiency(&self) -> Option<f64> {
        (self.tagged > 0).then(|| self.tagged_ions as f64 / self.tagged as f64)
    }
}

/// Signal period, background period and false-coincidence measurement.
/// Returns only the counts.
pub fn run_calibration_experiment<R: Rng + ?Sized>(setup: &ExperimentSetup, rng: &mut R) -> Result<CountReport> {
    simulate_calibration(setup, rng).map(|r| r.report)
}

/// Full run. Each ionization event has its own random substream, so runs
/// that differ only in detector parameters share their physics.
pub fn simulate_calibration<R: Rng + ?Sized>(setup: &ExperimentSetup, rng: &mut R) -> Result<CalibrationRun> {
    let a = &setup.analysis;
    if !(setup.ionization.rate(&setup.beam) > 0.0) {
        return Err(Error::NoSignal(0.0));
    }
    let seed: u64 = rng.random();
    let species = &setup.ionization.species;
    let events = sample_events(
        &setup.beam,
        &setup.ionization,
        a.t_signal,
        &mut substream(seed, tag::EVENTS, 0),
    )?;

    let mut electron_times = Vec::new();
    let mut ion_times = Vec::new();
    let (mut tagged, mut tagged_ions) = (0, 0);
    for (i, ev) in events.iter().enumerate() {
        let mut r = substream(seed, tag::CHAIN, i as u64);
        let v = maxwell_boltzmann(species, setup.temperature_k, &mut r);
        let birth = ParticleState {
            position: ev.position,
            velocity: v,
            time: ev.time,
        };
        let electron = electron_transit(&setup.assembly, &setup.electron.transit, &birth, &mut r);
        let electron_seen = r.random::<f64>() < setup.electron.eta_e;
        let is_tagged = electron.is_some() && electron_seen;
        if let (Some(t), true) = (electron, electron_seen) {
            electron_times.push(t);
        }
        let arrival = setup.table.sample(&ev.position, &v, &mut r);
        let mesh_pass = r.random::<f64>() < setup.mesh_transmission.unwrap_or(1.0);
        let pulse = detect_ion(&setup.cem, 0.0, setup.cem_bias, &mut r);
        if let (Some(tof), true, Some(offset)) = (arrival, mesh_pass, pulse) {
            ion_times.push(ev.time + tof + offset);
            tagged_ions += is_tagged as usize;
        }
        tagged += is_tagged as usize;
    }

    let electrons = PulseStream::from_times(Channel::Electron, electron_times);
    let electrons = add_background(
        &electrons,
        setup.electron.background_rate,
        a.t_signal,
        &mut substream(seed, tag::ELECTRON_BACKGROUND, 0),
    )?;
    let electrons = apply_dead_time(&electrons, setup.electron.dead_time);
    let ions = PulseStream::from_times(Channel::Ion, ion_times);
    let ions = add_background(
        &ions,
        setup.cem.dark_rate,
        a.t_signal,
        &mut substream(seed, tag::ION_DARK, 0),
    )?;
    let ions = apply_dead_time(&ions, setup.cem.dead_time);

    let spectrum = delay_spectrum(&electrons, &ions, a.bin_width, a.spectrum_range, a.t_signal)?;
    let (window, fit) = match a.window_center {
        Some(c) => (WindowSpec::centered(c, a.window_width)?, None),
        None => {
            let fit = fit_gaussian(&spectrum)?;
            (WindowSpec::centered(fit.mean, a.window_width)?, Some(fit))
        }
    };
    let n_c_meas = count_coincidences(&electrons, &ions, &window);
    let n_false = count_coincidences(&electrons, &ions, &window.displaced(a.displacement));

    // Laser off resonance: only the electron background remains.
    let off = add_background(
        &PulseStream::empty(Channel::Electron),
        setup.electron.background_rate,
        a.t_background,
        &mut substream(seed, tag::BACKGROUND_PERIOD, 0),
    )?;
    let n_bg = apply_dead_time(&off, setup.electron.dead_time).len() as u64;

    Ok(CalibrationRun {
        report: CountReport {
            n_e_meas: electrons.len() as u64,
            n_bg,
            n_c_meas,
            n_false,
            t_signal: a.t_signal,
            t_background: a.t_background,
        },
        spectrum,
        fit,
        window,
        electrons,
        ions,
        births: events.len(),
        events,
        tagged,
        tagged_ions,
    })
}
