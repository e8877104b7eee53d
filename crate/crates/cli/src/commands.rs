use std::path::PathBuf;

use anyhow::{anyhow, bail, Context, Result};
use clap::Args;
use serde::Serialize;

use iondet::calibrate::{estimate_efficiency, simulate_calibration, sub_poissonian_check, ExperimentSetup};
use iondet::rng::{seeded, substream, tag, SimRng};
use iondet::scan::{
    map_ratio_plane, scan_cem_voltage, scan_extraction_voltage, scan_tube_ratio, tof_spectrum, RatioBounds, Reoptimize,
    ScanContext, TofPulse,
};
use iondet::source::to_json_lines;
use iondet::transport::{detection_map, integrate, maxwell_boltzmann, LaunchSpec, MapOptions, ParticleState, Species};
use iondet::units::{MM, NS};
use iondet::{CalibrationResult, FieldBasis, RunConfig, Vec3};

use crate::output::{hash_file, FileRecord, Manifest, Output};
use crate::{GlobalArgs, ScanKind};

fn load_config(path: Option<&PathBuf>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p).with_context(|| format!("in config {}", p.display())),
        None => Ok(RunConfig::default()),
    }
}

/// State of one command invocation: effective config, seed and outputs.
pub struct Run {
    pub cfg: RunConfig,
    pub seed: u64,
    seed_source: &'static str,
    command: String,
    args: Vec<String>,
    no_solve: bool,
    inputs: Vec<FileRecord>,
    pub out: Output,
}

impl Run {
    pub fn start(global: &GlobalArgs, command: &str, args: Vec<String>) -> Result<Self> {
        let mut cfg = load_config(global.config.as_ref())?;
        let (seed, seed_source) = match (global.seed, cfg.seed) {
            (Some(s), _) => (s, "flag"),
            (None, Some(s)) => (s, "config"),
            (None, None) => (rand::random(), "generated"),
        };
        if seed_source == "generated" {
            eprintln!("seed: {seed}");
        }
        cfg.seed = Some(seed);
        let mut inputs = Vec::new();
        if let Some(p) = &global.config {
            inputs.push(hash_file(p)?);
        }
        let base = global.out.clone().unwrap_or_else(|| cfg.output_dir.clone());
        let mut out = Output::create(base.join(command))?;
        out.write("config.toml", cfg.to_toml()?)?;
        Ok(Self {
            cfg,
            seed,
            seed_source,
            command: command.to_string(),
            args,
            no_solve: global.no_solve,
            inputs,
            out,
        })
    }

    pub fn rng(&self) -> SimRng {
        seeded(self.seed)
    }

    /// Field basis of the configured assembly, from the cache when possible.
    pub fn basis(&mut self) -> Result<FieldBasis> {
        let assembly = self.cfg.assembly()?;
        let (h, opts) = (self.cfg.spacing(), self.cfg.solve_options());
        let cache = self.cfg.grid.cache_dir.clone();
        let basis = match (&cache, self.no_solve) {
            (Some(dir), true) => FieldBasis::load(&assembly, h, &opts, dir)?,
            (None, true) => bail!("--no-solve needs grid.cache_dir in the config"),
            (dir, false) => FieldBasis::solve(&assembly, h, &opts, dir.as_deref())?,
        };
        if let Some(dir) = &cache {
            for f in FieldBasis::cache_files(&assembly, h, opts.tol, dir) {
                self.inputs.push(hash_file(&f)?);
            }
        }
        Ok(basis)
    }

    pub fn experiment(&mut self) -> Result<ExperimentSetup> {
        let basis = self.basis()?;
        let assembly = self.cfg.assembly()?;
        let grid = basis.combine(&assembly)?;
        Ok(ExperimentSetup::new(&self.cfg, &grid, &assembly)?)
    }

    /// JSON record of a result together with the command, seed and config.
    pub fn record<T: Serialize>(&mut self, name: &str, result: &T) -> Result<()> {
        #[derive(Serialize)]
        struct Record<'a, T> {
            command: &'a str,
            seed: u64,
            config: &'a RunConfig,
            result: &'a T,
        }
        let rec = Record {
            command: &self.command,
            seed: self.seed,
            config: &self.cfg,
            result,
        };
        self.out.write_json(name, &rec)
    }

    /// Writes the manifest and returns its path.
    pub fn finish(self) -> Result<PathBuf> {
        let manifest = Manifest {
            tool: "iondet",
            version: env!("CARGO_PKG_VERSION"),
            command: self.command,
            args: self.args,
            seed: self.seed,
            seed_source: self.seed_source,
            output_dir: self.out.dir().display().to_string(),
            config: serde_json::to_value(&self.cfg)?,
            inputs: self.inputs,
            artifacts: self.out.artifacts().to_vec(),
        };
        let path = self.out.dir().join("manifest.json");
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        std::fs::write(&path, text).with_context(|| format!("cannot write {}", path.display()))?;
        Ok(path)
    }
}

#[derive(Args, Debug)]
pub struct ValidateArgs {
    /// Print the configuration with all defaults filled in.
    #[arg(long)]
    print: bool,
}

pub fn validate_config(global: &GlobalArgs, args: &ValidateArgs) -> Result<()> {
    let cfg = load_config(global.config.as_ref())?;
    cfg.assembly()?;
    if args.print {
        print!("{}", cfg.to_toml()?);
    } else {
        let name = global
            .config
            .as_ref()
            .map_or("default configuration".into(), |p| p.display().to_string());
        println!("ok: {name}");
    }
    Ok(())
}

pub fn solve(run: &mut Run) -> Result<()> {
    #[derive(Serialize)]
    struct RoleReport {
        role: &'static str,
        iterations: usize,
        residual_v: f64,
        converged: bool,
    }
    #[derive(Serialize)]
    struct FieldReport {
        spacing_m: f64,
        tol_v: f64,
        roles: Vec<RoleReport>,
    }

    let basis = run.basis()?;
    let assembly = run.cfg.assembly()?;
    let grid = basis.combine(&assembly)?;
    run.out.write_json("assembly.json", &assembly)?;

    let report = FieldReport {
        spacing_m: basis.spacing,
        tol_v: basis.tol,
        roles: basis
            .reports()
            .iter()
            .map(|(r, rep)| RoleReport {
                role: r.name(),
                iterations: rep.iterations,
                residual_v: rep.final_residual,
                converged: rep.converged,
            })
            .collect(),
    };
    run.record("field.json", &report)?;

    let mut csv = String::from("z_m,phi_v,ez_v_m\n");
    let (lo, hi) = (grid.origin[2], grid.upper()[2]);
    let n = ((hi - lo) / grid.spacing).round() as usize;
    for k in 0..=n {
        let p = Vec3::new(0.0, 0.0, lo + k as f64 * grid.spacing);
        if let Ok((phi, e)) = grid.potential_and_field(&p) {
            csv.push_str(&format!("{:e},{:e},{:e}\n", p[2], phi, e[2]));
        }
    }
    run.out.write("axis_potential.csv", csv)
}

fn parse_point(s: &str) -> Result<Vec3> {
    let v: Vec<f64> = s
        .split(',')
        .map(|x| x.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .with_context(|| format!("bad point `{s}`, expected X,Y,Z in mm"))?;
    match v[..] {
        [x, y, z] => Ok(Vec3::new(x, y, z) * MM),
        _ => bail!("bad point `{s}`, expected X,Y,Z in mm"),
    }
}

#[derive(Args, Debug)]
pub struct TraceArgs {
    /// Birth point `X,Y,Z` in mm; repeat for several. Defaults to the
    /// centre of the ionization region.
    #[arg(long = "at", value_name = "X,Y,Z", allow_hyphen_values = true)]
    at: Vec<String>,
    /// Ions per birth point.
    #[arg(long, default_value_t = 1)]
    count: usize,
    /// Species name (`Rb+`, `Rb2+`, `K+`); defaults to the configured one.
    #[arg(long)]
    species: Option<String>,
    /// Draw thermal velocities at the source temperature instead of starting
    /// at rest.
    #[arg(long)]
    thermal: bool,
}

impl TraceArgs {
    pub fn describe(&self) -> Vec<String> {
        let mut a: Vec<String> = self.at.iter().flat_map(|p| ["--at".to_string(), p.clone()]).collect();
        a.extend(["--count".into(), self.count.to_string()]);
        if let Some(s) = &self.species {
            a.extend(["--species".into(), s.clone()]);
        }
        if self.thermal {
            a.push("--thermal".into());
        }
        a
    }
}

pub fn trace(run: &mut Run, args: &TraceArgs) -> Result<()> {
    #[derive(Serialize)]
    struct Summary<'a> {
        index: usize,
        species: &'a str,
        start_m: [f64; 3],
        status: String,
        tof_s: Option<f64>,
        steps: usize,
        energy_drift: f64,
    }

    let species = match &args.species {
        Some(name) => Species::by_name(name).ok_or_else(|| anyhow!("unknown species `{name}`"))?,
        None => run.cfg.species()?,
    };
    let basis = run.basis()?;
    let assembly = run.cfg.assembly()?;
    let grid = basis.combine(&assembly)?;
    let points = if args.at.is_empty() {
        vec![assembly.landmarks.source_center]
    } else {
        args.at.iter().map(|s| parse_point(s)).collect::<Result<_>>()?
    };
    let opts = iondet::transport::IntegrateOptions {
        record: true,
        ..run.cfg.integrate_options()
    };
    let mut log = String::new();
    for (i, p) in points
        .iter()
        .flat_map(|p| std::iter::repeat_n(p, args.count))
        .enumerate()
    {
        let mut r = substream(run.seed, tag::PARTICLE, i as u64);
        let velocity = if args.thermal {
            maxwell_boltzmann(&species, run.cfg.source.temperature_k, &mut r)
        } else {
            Vec3::zeros()
        };
        let start = ParticleState {
            position: *p,
            velocity,
            time: 0.0,
        };
        let tr = integrate(&grid, &assembly, &species, &start, &opts, &mut r)?;
        run.out.write(&format!("trajectory_{i:03}.csv"), tr.to_csv())?;
        let s = Summary {
            index: i,
            species: &species.name,
            start_m: [p[0], p[1], p[2]],
            status: format!("{:?}", tr.status),
            tof_s: tr.tof,
            steps: tr.steps,
            energy_drift: tr.energy_drift,
        };
        log.push_str(&serde_json::to_string(&s)?);
        log.push('\n');
    }
    run.out.write("trajectories.jsonl", log)
}

#[derive(Args, Debug)]
pub struct MapArgs {
    /// Radius of the disc of birth points.
    #[arg(long, default_value_t = 0.6)]
    radius_mm: f64,
    /// Lattice pitch.
    #[arg(long, default_value_t = 0.05)]
    pitch_mm: f64,
    /// Birth height; defaults to the centre of the ionization region.
    #[arg(long)]
    height_mm: Option<f64>,
    /// Ions per birth point.
    #[arg(long, default_value_t = 1)]
    samples: usize,
}

impl MapArgs {
    pub fn describe(&self) -> Vec<String> {
        let mut a = vec![
            "--radius-mm".into(),
            self.radius_mm.to_string(),
            "--pitch-mm".into(),
            self.pitch_mm.to_string(),
            "--samples".into(),
            self.samples.to_string(),
        ];
        if let Some(h) = self.height_mm {
            a.extend(["--height-mm".into(), h.to_string()]);
        }
        a
    }
}

pub fn map(run: &mut Run, args: &MapArgs) -> Result<()> {
    #[derive(Serialize)]
    struct Summary {
        points: usize,
        launched: usize,
        detected: usize,
        fraction: f64,
        /// Births inside the extraction aperture projection that were
        /// detected, and that reached the mesh window before its loss.
        inside_aperture: f64,
        inside_aperture_reached: f64,
    }

    let basis = run.basis()?;
    let assembly = run.cfg.assembly()?;
    let grid = basis.combine(&assembly)?;
    let height = args.height_mm.map_or(assembly.landmarks.source_center[2], |h| h * MM);
    let launch = LaunchSpec::disc(args.radius_mm * MM, args.pitch_mm * MM, height);
    let opts = MapOptions {
        species: run.cfg.species()?,
        temperature_k: run.cfg.scan.temperature_k,
        integrate: run.cfg.integrate_options(),
    };
    let m = detection_map(&grid, &assembly, &launch, args.samples, &opts, &mut run.rng())?;
    let r_ap = assembly.landmarks.extraction_aperture_radius;
    let inside: Vec<_> = m
        .entries
        .iter()
        .filter(|e| e.x0.hypot(e.y0) <= r_ap * (1.0 + 1e-9))
        .collect();
    let n_inside = inside.iter().map(|e| e.n).sum::<usize>().max(1) as f64;
    let summary = Summary {
        points: m.entries.len(),
        launched: m.total(),
        detected: m.total_detected(),
        fraction: m.total_detected() as f64 / m.total().max(1) as f64,
        inside_aperture: inside.iter().map(|e| e.detected).sum::<usize>() as f64 / n_inside,
        inside_aperture_reached: inside.iter().map(|e| e.reached).sum::<usize>() as f64 / n_inside,
    };
    run.out.write("map.csv", m.to_csv())?;
    run.record("map.json", &summary)
}

pub fn spectrum(run: &mut Run) -> Result<()> {
    let setup = run.experiment()?;
    let r = simulate_calibration(&setup, &mut run.rng())?;
    #[derive(Serialize)]
    struct Fit<'a> {
        fit: &'a Option<iondet::coincidence::GaussianFit>,
        window: &'a iondet::coincidence::WindowSpec,
        total_pairs: u64,
    }
    run.out.write("spectrum.csv", r.spectrum.to_csv())?;
    run.record(
        "spectrum.json",
        &Fit {
            fit: &r.fit,
            window: &r.window,
            total_pairs: r.spectrum.total(),
        },
    )
}

pub fn calibrate(run: &mut Run) -> Result<()> {
    #[derive(Serialize)]
    struct Record<'a> {
        result: &'a CalibrationResult,
        report: &'a iondet::CountReport,
        window: &'a iondet::coincidence::WindowSpec,
        fit: &'a Option<iondet::coincidence::GaussianFit>,
        births: usize,
        /// Event-level truth: tagged ions over tagged electrons.
        true_efficiency: Option<f64>,
        above_half: bool,
        margin_to_half: f64,
    }

    let setup = run.experiment()?;
    let r = simulate_calibration(&setup, &mut run.rng())?;
    let result = estimate_efficiency(&r.report)?;
    let check = sub_poissonian_check(&result);
    run.out.write(
        "calibration.csv",
        format!("{}\n{}\n", CalibrationResult::CSV_HEADER, result.to_csv_row()),
    )?;
    run.out.write("spectrum.csv", r.spectrum.to_csv())?;
    run.out.write("electrons.csv", r.electrons.to_csv())?;
    run.out.write("ions.csv", r.ions.to_csv())?;
    run.out.write("events.jsonl", to_json_lines(&r.events)?)?;
    run.record(
        "calibration.json",
        &Record {
            result: &result,
            report: &r.report,
            window: &r.window,
            fit: &r.fit,
            births: r.births,
            true_efficiency: r.true_efficiency(),
            above_half: check.above,
            margin_to_half: check.margin,
        },
    )?;
    println!("eta_i = {:.4} +- {:.4}", result.eta_i, result.sigma_eta);
    Ok(())
}

pub fn scan(run: &mut Run, kind: ScanKind, reoptimize: bool) -> Result<()> {
    let s = run.cfg.scan.clone();
    let n = s.samples_per_point;
    let base = run.cfg.voltages;
    let mut rng = run.rng();
    let name = format!("scan_{}", kind.name());
    if let ScanKind::Cemv = kind {
        let setup = run.experiment()?;
        let res = scan_cem_voltage(&setup, &s.cem_bias_values_v, &mut rng)?;
        run.out.write(&format!("{name}.csv"), res.to_csv())?;
        return run.record(&format!("{name}.json"), &res);
    }
    let basis = run.basis()?;
    let ctx = ScanContext::new(&run.cfg, basis)?;
    match kind {
        ScanKind::Ue => {
            let opt = Reoptimize {
                bounds: RatioBounds {
                    tube: s.tube_ratio_bounds,
                    deflection: s.deflection_ratio_bounds,
                },
                budget: s.optimize_budget,
                samples: n,
            };
            let res = scan_extraction_voltage(&ctx, &base, &s.ue_values_v, n, reoptimize.then_some(&opt), &mut rng)?;
            run.out.write(&format!("{name}.csv"), res.to_csv())?;
            run.record(&format!("{name}.json"), &res)
        }
        ScanKind::Ratio => {
            let res = scan_tube_ratio(&ctx, &base, &s.tube_ratios, n, None, &mut rng)?;
            run.out.write(&format!("{name}.csv"), res.to_csv())?;
            run.record(&format!("{name}.json"), &res)
        }
        ScanKind::Plane => {
            let res = map_ratio_plane(
                &ctx,
                base.u_e,
                base.u_c,
                &s.tube_ratios,
                &s.deflection_ratios,
                n,
                &mut rng,
            )?;
            run.out.write(&format!("{name}.csv"), res.to_csv())?;
            run.record(&format!("{name}.json"), &res)
        }
        ScanKind::Cemv => unreachable!(),
    }
}

pub fn tof(run: &mut Run) -> Result<()> {
    #[derive(Serialize)]
    struct Peak {
        species: String,
        launched: usize,
        detected: usize,
        center_s: Option<f64>,
        width_s: Option<f64>,
    }

    let s = run.cfg.scan.clone();
    let species: Vec<Species> = s
        .tof_species
        .iter()
        .map(|n| Species::by_name(n).ok_or_else(|| anyhow!("unknown species `{n}`")))
        .collect::<Result<_>>()?;
    let basis = run.basis()?;
    let ctx = ScanContext::new(&run.cfg, basis)?;
    let pulse = TofPulse {
        n_per_species: s.tof_per_species,
        birth_spread: s.tof_birth_spread_ns * NS,
        temperature_k: s.temperature_k,
        position: None,
        bin_width: s.tof_bin_width_ns * NS,
    };
    let spec = tof_spectrum(&ctx, &run.cfg.voltages, &species, &pulse, &mut run.rng())?;
    let peaks: Vec<Peak> = spec
        .species
        .iter()
        .zip(&spec.arrivals)
        .map(|(name, a)| Peak {
            species: name.clone(),
            launched: s.tof_per_species,
            detected: a.len(),
            center_s: spec.peak_center(name),
            width_s: spec.peak_width(name),
        })
        .collect();
    run.out.write("tof.csv", spec.to_csv())?;
    run.record("tof.json", &peaks)
}
