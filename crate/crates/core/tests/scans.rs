mod common;

use iondet::error::Error;
use iondet::rng::{seeded, substream, tag};
use iondet::scan::{
    connected_components, map_ratio_plane, optimize_voltages, scan_extraction_voltage, scan_tube_ratio, tof_spectrum,
    RatioBounds, ScanContext, TofPulse, REFERENCE_STRAY_FIELD,
};
use iondet::source::sample_birth_position;
use iondet::transport::{integrate, maxwell_boltzmann, IntegrateOptions, ParticleState, Species};
use iondet::units::{NS, US};
use iondet::{Vec3, VoltageConfig};

fn context() -> ScanContext {
    let (cfg, basis) = common::default_basis();
    ScanContext::new(cfg, basis.clone()).unwrap()
}

fn within(a: (f64, f64), b: (f64, f64), k: f64) -> bool {
    (a.0 - b.0).abs() <= k * a.1.hypot(b.1).max(1e-12)
}

#[test]
fn extraction_scan_is_flat_without_stray_field() {
    let ctx = context();
    let base = VoltageConfig::default();
    let s = scan_extraction_voltage(&ctx, &base, &[-10.0, -40.0, -100.0], 300, None, &mut seeded(1)).unwrap();
    let first = (s.points[0].value, s.points[0].error);
    assert!(first.0 > 0.2);
    for p in &s.points {
        assert!(within((p.value, p.error), first, 3.0), "{:?}", s.values());
    }
}

#[test]
fn extraction_scan_levels_off_under_stray_field() {
    let mut ctx = context();
    ctx.stray_field = Vec3::from(REFERENCE_STRAY_FIELD);
    let base = VoltageConfig::default();
    let ues = [-5.0, -10.0, -20.0, -40.0, -60.0, -100.0];
    let s = scan_extraction_voltage(&ctx, &base, &ues, 300, None, &mut seeded(2)).unwrap();
    let p = &s.points;
    for w in p.windows(2) {
        assert!(
            w[1].value >= w[0].value - 3.0 * w[0].error.hypot(w[1].error),
            "{:?}",
            s.values()
        );
    }
    let top = (p[5].value, p[5].error);
    assert!(p[0].value < 0.5 * top.0, "{:?}", s.values());
    for q in &p[3..] {
        assert!(within((q.value, q.error), top, 3.0), "{:?}", s.values());
    }
}

#[test]
fn detection_rate_matches_direct_integration() {
    let ctx = context();
    let v = VoltageConfig::default();
    let (n, seed) = (120, 9);
    let (rate, _) = ctx.detection_rate(&v, n, seed).unwrap();
    let grid = ctx.basis.combine_voltages(&v, ctx.stray_field);
    let asm = ctx.assembly.with_voltages(&v);
    let mut hits = 0;
    for k in 0..n {
        let mut r = substream(seed, tag::PARTICLE, k as u64);
        let p = sample_birth_position(&ctx.beam, &ctx.ionization, &mut r);
        let vel = maxwell_boltzmann(ctx.species(), ctx.temperature_k, &mut r);
        let start = ParticleState {
            position: p,
            velocity: vel,
            time: 0.0,
        };
        hits += integrate(&grid, &asm, ctx.species(), &start, &ctx.integrate, &mut r)
            .unwrap()
            .detected() as usize;
    }
    assert_eq!(rate, hits as f64 / n as f64);
}

#[test]
fn tube_ratio_scan_depends_only_on_ratios() {
    let ctx = context();
    let ratios = [0.5, 2.0, 3.2, 4.0, 40.0];
    let base = VoltageConfig::default();
    let a = scan_tube_ratio(&ctx, &base, &ratios, 200, None, &mut seeded(3)).unwrap();
    let b = scan_tube_ratio(&ctx, &base.scaled(2.0), &ratios, 200, None, &mut seeded(4)).unwrap();
    assert!(a.normalized);
    let peak = a.values().iter().cloned().fold(0.0, f64::max);
    assert_eq!(peak, 1.0);
    for (p, q) in a.points.iter().zip(&b.points) {
        assert!(
            within((p.value, p.error), (q.value, q.error), 3.0),
            "{:?} vs {:?}",
            a.values(),
            b.values()
        );
    }
    // Far from focus nothing is detected.
    assert!(a.points[0].value < 0.05 && a.points[4].value < 0.05, "{:?}", a.values());
    assert_eq!(a.points[2].value, 1.0);
}

#[test]
fn normalized_scan_is_stable_under_more_samples() {
    let ctx = context();
    let ratios = [2.5, 3.0, 3.5, 4.0];
    let base = VoltageConfig::default();
    let a = scan_tube_ratio(&ctx, &base, &ratios, 150, None, &mut seeded(5)).unwrap();
    let b = scan_tube_ratio(&ctx, &base, &ratios, 300, None, &mut seeded(6)).unwrap();
    for (p, q) in a.points.iter().zip(&b.points) {
        assert!(within((p.value, p.error), (q.value, q.error), 3.0));
    }
}

#[test]
fn scans_are_deterministic() {
    let ctx = context();
    let base = VoltageConfig::default();
    let a = scan_tube_ratio(&ctx, &base, &[3.0, 3.5], 50, None, &mut seeded(7)).unwrap();
    let b = scan_tube_ratio(&ctx, &base, &[3.0, 3.5], 50, None, &mut seeded(7)).unwrap();
    assert_eq!(a, b);
    assert!(a.to_csv().starts_with("# axis: tube_ratio"));
}

#[test]
fn ratio_plane_has_one_detection_band() {
    let ctx = context();
    let tube = [2.0, 2.5, 3.0, 3.5, 4.0, 5.0];
    let defl = [-1.0, -3.0, -5.0];
    let plane = map_ratio_plane(&ctx, -40.0, -2900.0, &tube, &defl, 100, &mut seeded(8)).unwrap();
    let rate_mask: Vec<bool> = plane.rate.iter().map(|&r| r > 0.0).collect();
    assert_eq!(connected_components(&rate_mask, tube.len(), defl.len()), 1);
    assert_eq!(connected_components(&plane.mask(), tube.len(), defl.len()), 1);

    // The best tube ratio of a 1D scan sits inside the band.
    let scan = scan_tube_ratio(&ctx, &VoltageConfig::default(), &tube, 100, None, &mut seeded(9)).unwrap();
    let best = scan.points.iter().position(|p| p.value == 1.0).unwrap();
    let j = defl
        .iter()
        .position(|&d| d == VoltageConfig::default().deflection_ratio())
        .unwrap_or(1);
    assert!(rate_mask[best * defl.len() + j] || rate_mask[best * defl.len() + 1]);

    let plane60 = map_ratio_plane(&ctx, -60.0, -2900.0 * 1.5, &tube, &defl, 100, &mut seeded(8)).unwrap();
    assert_eq!(plane60.mask(), plane.mask());
    for k in 0..plane.rate.len() {
        assert!(within(
            (plane.rate[k], plane.error[k]),
            (plane60.rate[k], plane60.error[k]),
            3.0
        ));
    }
}

#[test]
fn optimum_depends_only_on_ratios() {
    let ctx = context();
    let bounds = RatioBounds {
        tube: [2.0, 5.0],
        deflection: [-6.0, -1.0],
    };
    let start = VoltageConfig::default();
    let a = optimize_voltages(&ctx, &start, &bounds, 12, 150, &mut seeded(10)).unwrap();
    let b = optimize_voltages(&ctx, &start.scaled(2.0), &bounds, 12, 150, &mut seeded(10)).unwrap();
    assert!((a.voltages.tube_ratio() - b.voltages.tube_ratio()).abs() < 1e-9);
    assert!((a.voltages.deflection_ratio() - b.voltages.deflection_ratio()).abs() < 1e-9);
    assert!(a.rate > 0.3);
    assert!(ctx.axial_impact_fraction(&a.voltages).unwrap() > 0.0);

    let c = optimize_voltages(&ctx, &start, &bounds, 12, 150, &mut seeded(11)).unwrap();
    assert!(within((a.rate, a.error), (c.rate, c.error), 3.0), "{a:?} vs {c:?}");
}

#[test]
fn optimizer_reports_empty_bounds() {
    let ctx = context();
    let bounds = RatioBounds {
        tube: [20.0, 30.0],
        deflection: [-1.0, 0.0],
    };
    let r = optimize_voltages(&ctx, &VoltageConfig::default(), &bounds, 5, 40, &mut seeded(12));
    assert!(matches!(r, Err(Error::NoSignalInBounds)), "{r:?}");
}

fn pulse(n: usize, spread: f64, position: Option<Vec3>) -> TofPulse {
    TofPulse {
        n_per_species: n,
        birth_spread: spread,
        temperature_k: 0.0,
        position,
        bin_width: 5.0 * NS,
    }
}

#[test]
fn deterministic_pulse_gives_a_sharp_peak() {
    let ctx = context();
    let on_axis = Vec3::new(0.0, 0.0, ctx.assembly.landmarks.source_center[2]);
    let s = tof_spectrum(
        &ctx,
        &VoltageConfig::default(),
        &[Species::rb87_ion()],
        &pulse(20, 0.0, Some(on_axis)),
        &mut seeded(13),
    )
    .unwrap();
    // Only the random mesh loss varies between these ions.
    assert!(s.arrivals[0].len() >= 12);
    assert!(s.peak_width("Rb+").unwrap() <= 1.0 * NS);
    let c = s.peak_center("Rb+").unwrap();
    assert!((1.0 * US..=7.0 * US).contains(&c), "{c}");
}

#[test]
fn peak_positions_scale_with_root_mass() {
    let ctx = context();
    let v = VoltageConfig::default();
    let species = [Species::k39_ion(), Species::rb87_ion(), Species::rb2_ion()];
    let on_axis = Vec3::new(0.0, 0.0, ctx.assembly.landmarks.source_center[2]);
    let s = tof_spectrum(&ctx, &v, &species, &pulse(10, 0.0, Some(on_axis)), &mut seeded(14)).unwrap();
    // Brute force: one direct trajectory per species.
    let grid = ctx.basis.combine_voltages(&v, Vec3::zeros());
    let asm = ctx.assembly.with_voltages(&v);
    let direct: Vec<f64> = species
        .iter()
        .map(|sp| {
            integrate(
                &grid,
                &asm,
                sp,
                &ParticleState::at_rest(on_axis, 0.0),
                &IntegrateOptions::default(),
                &mut seeded(0),
            )
            .unwrap()
            .tof
            .unwrap()
        })
        .collect();
    for (sp, t) in species.iter().zip(&direct) {
        let c = s.peak_center(&sp.name).unwrap();
        assert!((c / t - 1.0).abs() < 1e-3, "{}: {c} vs {t}", sp.name);
        let expect = (sp.mass_to_charge() / species[1].mass_to_charge()).sqrt();
        assert!((t / direct[1] / expect - 1.0).abs() < 0.005);
    }
    let centers: Vec<f64> = direct.clone();
    let sep = (centers[1] - centers[0]).min(centers[2] - centers[1]);
    assert!(s.bin_width <= sep / 5.0);
}

#[test]
fn pulse_missing_the_detector_is_an_error() {
    let ctx = context();
    let outside = Vec3::new(1.5e-3, 0.0, ctx.assembly.landmarks.source_center[2]);
    let r = tof_spectrum(
        &ctx,
        &VoltageConfig::default(),
        &[Species::rb87_ion()],
        &pulse(3, 0.0, Some(outside)),
        &mut seeded(15),
    );
    assert!(matches!(r, Err(Error::NotDetected(_))), "{r:?}");
}
