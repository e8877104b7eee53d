//! Run configuration as a sectioned TOML document.
//!
//! Keys carry their unit (`gap_mm`, `window_width_ns`, `bias_v`); the
//! accessors convert to the SI model types used everywhere else.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::calibrate::AnalysisParams;
use crate::detector::{CemModel, ElectronChannelModel};
use crate::error::{Error, Result};
use crate::fields::SolveOptions;
use crate::geometry::{
    build_calibration_assembly, build_detector_assembly, Assembly, AssemblyKind, GeometryParams, VoltageConfig,
};
use crate::source::{BeamMode, IonizationModel};
use crate::transport::{ElectronTransitModel, IntegrateOptions, Species};
use crate::units::{MM, NS, UM, US};
use crate::Vec3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed. Runs without one draw a seed and record it in the
    /// manifest.
    pub seed: Option<u64>,
    pub output_dir: PathBuf,
    /// `detector` (chip) or `calibration` (vapour cell behind a barrier).
    pub assembly: AssemblyKind,
    pub geometry: GeometryParams,
    pub voltages: VoltageConfig,
    pub stray: StraySection,
    pub grid: GridSection,
    pub transport: TransportSection,
    pub source: SourceSection,
    pub ion_cem: IonCemSection,
    pub electron_channel: ElectronSection,
    pub analysis: AnalysisSection,
    pub scan: ScanSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: None,
            output_dir: PathBuf::from("out"),
            assembly: AssemblyKind::Calibration,
            geometry: GeometryParams::default(),
            voltages: VoltageConfig::default(),
            stray: StraySection::default(),
            grid: GridSection::default(),
            transport: TransportSection::default(),
            source: SourceSection::default(),
            ion_cem: IonCemSection::default(),
            electron_channel: ElectronSection::default(),
            analysis: AnalysisSection::default(),
            scan: ScanSection::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StraySection {
    pub field_v_per_m: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSection {
    pub spacing_mm: f64,
    pub tol_v: f64,
    pub omega: f64,
    pub max_iter: usize,
    /// Field cache directory, relative to the working directory.
    pub cache_dir: Option<PathBuf>,
}

impl Default for GridSection {
    fn default() -> Self {
        Self {
            spacing_mm: 0.125,
            tol_v: 1e-9,
            omega: 1.95,
            max_iter: 20_000,
            cache_dir: Some(PathBuf::from("cache")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransportSection {
    pub tol: f64,
    pub dt_init_ns: f64,
    pub t_max_us: f64,
    /// Lattice of the precomputed transport table over the beam volume,
    /// nodes along (x, y, z).
    pub table_dims: [usize; 3],
}

impl Default for TransportSection {
    fn default() -> Self {
        Self {
            tol: 1e-5,
            dt_init_ns: 1.0,
            t_max_us: 50.0,
            table_dims: [5, 31, 5],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SourceSection {
    pub species: String,
    pub waist_um: f64,
    pub power_w: f64,
    pub rate_per_w: f64,
    pub segment_length_mm: f64,
    /// Unit vector of the optical axis, parallel to the extraction electrode.
    pub axis: [f64; 3],
    pub temperature_k: f64,
    pub standing_wave: bool,
}

impl Default for SourceSection {
    fn default() -> Self {
        Self {
            species: "Rb+".into(),
            waist_um: 46.0,
            power_w: 5e-3,
            rate_per_w: 2e5,
            segment_length_mm: 1.5,
            axis: [0.0, 1.0, 0.0],
            temperature_k: 300.0,
            standing_wave: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IonCemSection {
    pub gamma_ion: f64,
    pub v0_v: f64,
    pub vs_v: f64,
    /// Operating bias across the channel.
    pub bias_v: f64,
    pub dead_time_ns: f64,
    pub dark_rate_hz: f64,
    pub transit_offset_ns: f64,
    /// Draw the mesh transmission in the calibration chain. Off by default:
    /// the measured efficiency then refers to ions arriving at the mesh.
    pub mesh_in_chain: bool,
}

impl Default for IonCemSection {
    fn default() -> Self {
        let m = CemModel::default();
        Self {
            gamma_ion: m.gamma_ion,
            v0_v: m.v0,
            vs_v: m.vs,
            bias_v: 2900.0,
            dead_time_ns: m.dead_time / NS,
            dark_rate_hz: m.dark_rate,
            transit_offset_ns: m.transit_offset / NS,
            mesh_in_chain: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ElectronSection {
    pub eta_e: f64,
    pub background_rate_hz: f64,
    pub dead_time_ns: f64,
    pub offset_ns: f64,
    pub jitter_ns: f64,
}

impl Default for ElectronSection {
    fn default() -> Self {
        let m = ElectronChannelModel::default();
        Self {
            eta_e: m.eta_e,
            background_rate_hz: m.background_rate,
            dead_time_ns: m.dead_time / NS,
            offset_ns: m.transit.offset / NS,
            jitter_ns: m.transit.jitter / NS,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisSection {
    pub t_signal_s: f64,
    pub t_background_s: f64,
    pub window_width_ns: f64,
    /// Centre of the coincidence window. Unset: centre on the fitted peak.
    pub window_center_ns: Option<f64>,
    pub displacement_us: f64,
    pub bin_width_ns: f64,
    pub spectrum_start_us: f64,
    pub spectrum_end_us: f64,
}

impl Default for AnalysisSection {
    fn default() -> Self {
        Self {
            t_signal_s: 100.0,
            t_background_s: 100.0,
            window_width_ns: 800.0,
            window_center_ns: None,
            displacement_us: 4.0,
            bin_width_ns: 20.0,
            spectrum_start_us: 0.0,
            spectrum_end_us: 10.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScanSection {
    pub samples_per_point: usize,
    /// Temperature of the births in transport scans.
    pub temperature_k: f64,
    pub ue_values_v: Vec<f64>,
    pub tube_ratios: Vec<f64>,
    pub deflection_ratios: Vec<f64>,
    pub cem_bias_values_v: Vec<f64>,
    pub optimize_budget: usize,
    pub tube_ratio_bounds: [f64; 2],
    pub deflection_ratio_bounds: [f64; 2],
    pub tof_species: Vec<String>,
    pub tof_per_species: usize,
    pub tof_birth_spread_ns: f64,
    pub tof_bin_width_ns: f64,
}

impl Default for ScanSection {
    fn default() -> Self {
        Self {
            samples_per_point: 2000,
            temperature_k: 0.0,
            ue_values_v: vec![-5.0, -10.0, -20.0, -30.0, -40.0, -60.0, -80.0, -100.0],
            tube_ratios: (0..=16).map(|i| 1.0 + 0.25 * i as f64).collect(),
            deflection_ratios: (0..=12).map(|i| 0.0 - 0.5 * i as f64).collect(),
            cem_bias_values_v: (0..=11).map(|i| 1800.0 + 100.0 * i as f64).collect(),
            optimize_budget: 40,
            tube_ratio_bounds: [1.0, 6.0],
            deflection_ratio_bounds: [-6.0, 0.0],
            tof_species: vec!["Rb+".into(), "Rb2+".into()],
            tof_per_species: 500,
            tof_birth_spread_ns: 50.0,
            tof_bin_width_ns: 5.0,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.geometry.check()?;
        if !(self.grid.spacing_mm > 0.0 && self.grid.tol_v > 0.0) {
            return Err(Error::Config("grid spacing and tolerance must be positive".into()));
        }
        if !(self.grid.omega > 0.0 && self.grid.omega < 2.0) {
            return Err(Error::Config(format!(
                "SOR factor must lie in (0, 2), got {}",
                self.grid.omega
            )));
        }
        if !(self.transport.tol > 0.0 && self.transport.t_max_us > 0.0 && self.transport.dt_init_ns > 0.0) {
            return Err(Error::Config("transport tolerance and times must be positive".into()));
        }
        if self.transport.table_dims.iter().any(|&n| n < 2) {
            return Err(Error::Config("transport table needs at least 2 nodes per axis".into()));
        }
        self.species()?;
        self.cem_model().validate()?;
        self.electron_model().validate()?;
        let a = &self.analysis;
        if !(a.t_signal_s > 0.0 && a.t_background_s > 0.0) {
            return Err(Error::Config("signal and background periods must be positive".into()));
        }
        if !(a.window_width_ns > 0.0 && a.bin_width_ns > 0.0 && a.spectrum_end_us > a.spectrum_start_us) {
            return Err(Error::Config(
                "analysis windows need positive widths and a non-empty range".into(),
            ));
        }
        if self.assembly == AssemblyKind::Custom {
            return Err(Error::Config("assembly must be `detector` or `calibration`".into()));
        }
        for s in &self.scan.tof_species {
            Species::by_name(s).ok_or_else(|| Error::Config(format!("unknown species `{s}`")))?;
        }
        Ok(())
    }

    /// Assembly with the configured voltages and stray field.
    pub fn assembly(&self) -> Result<Assembly> {
        let a = match self.assembly {
            AssemblyKind::Detector => build_detector_assembly(&self.geometry)?,
            _ => build_calibration_assembly(&self.geometry)?,
        };
        Ok(a.with_voltages(&self.voltages).with_stray_field(self.stray_field()))
    }

    pub fn stray_field(&self) -> Vec3 {
        Vec3::from(self.stray.field_v_per_m)
    }

    pub fn solve_options(&self) -> SolveOptions {
        SolveOptions {
            omega: self.grid.omega,
            tol: self.grid.tol_v,
            max_iter: self.grid.max_iter,
            ..Default::default()
        }
    }

    pub fn spacing(&self) -> f64 {
        self.grid.spacing_mm * MM
    }

    pub fn integrate_options(&self) -> IntegrateOptions {
        IntegrateOptions {
            dt_init: self.transport.dt_init_ns * NS,
            tol: self.transport.tol,
            t_max: self.transport.t_max_us * US,
            ..Default::default()
        }
    }

    pub fn species(&self) -> Result<Species> {
        Species::by_name(&self.source.species)
            .ok_or_else(|| Error::Config(format!("unknown species `{}`", self.source.species)))
    }

    pub fn beam(&self, assembly: &Assembly) -> Result<BeamMode> {
        let s = &self.source;
        BeamMode::new(
            assembly.landmarks.source_center,
            Vec3::from(s.axis),
            s.waist_um * UM,
            s.power_w,
            s.segment_length_mm * MM,
        )
    }

    pub fn ionization(&self) -> Result<IonizationModel> {
        let m = IonizationModel::new(self.source.rate_per_w, self.species()?);
        Ok(if self.source.standing_wave {
            m.with_standing_wave()
        } else {
            m
        })
    }

    pub fn cem_model(&self) -> CemModel {
        let c = &self.ion_cem;
        CemModel {
            gamma_ion: c.gamma_ion,
            v0: c.v0_v,
            vs: c.vs_v,
            dead_time: c.dead_time_ns * NS,
            dark_rate: c.dark_rate_hz,
            transit_offset: c.transit_offset_ns * NS,
        }
    }

    pub fn electron_model(&self) -> ElectronChannelModel {
        let e = &self.electron_channel;
        ElectronChannelModel {
            eta_e: e.eta_e,
            background_rate: e.background_rate_hz,
            dead_time: e.dead_time_ns * NS,
            transit: ElectronTransitModel::from_ns(e.offset_ns, e.jitter_ns),
        }
    }

    pub fn analysis_params(&self) -> AnalysisParams {
        let a = &self.analysis;
        AnalysisParams {
            t_signal: a.t_signal_s,
            t_background: a.t_background_s,
            window_width: a.window_width_ns * NS,
            window_center: a.window_center_ns.map(|c| c * NS),
            displacement: a.displacement_us * US,
            bin_width: a.bin_width_ns * NS,
            spectrum_range: (a.spectrum_start_us * US, a.spectrum_end_us * US),
        }
    }
}
