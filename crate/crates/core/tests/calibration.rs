mod common;

use iondet::calibrate::{estimate_efficiency, simulate_calibration, sub_poissonian_check, ExperimentSetup};
use iondet::error::Error;
use iondet::rng::seeded;
use iondet::units::{NS, US};
use iondet::CalibrationResult;

fn setup() -> ExperimentSetup {
    let (cfg, basis) = common::default_basis();
    let assembly = cfg.assembly().unwrap();
    let grid = basis.combine(&assembly).unwrap();
    ExperimentSetup::new(cfg, &grid, &assembly).unwrap()
}

#[test]
fn runs_are_reproducible_and_share_physics_across_detector_settings() {
    let s = setup();
    let a = simulate_calibration(&s, &mut seeded(1)).unwrap();
    let b = simulate_calibration(&s, &mut seeded(1)).unwrap();
    assert_eq!(a.report, b.report);
    assert_eq!(a.ions.times(), b.ions.times());

    let mut low = s.clone();
    low.cem_bias = 2200.0;
    let c = simulate_calibration(&low, &mut seeded(1)).unwrap();
    assert_eq!(c.births, a.births);
    assert_eq!(c.electrons.times(), a.electrons.times());
    assert!(c.ions.len() < a.ions.len());
}

#[test]
fn default_run_is_in_the_expected_regime() {
    let s = setup();
    let run = simulate_calibration(&s, &mut seeded(2)).unwrap();
    let fit = run.fit.clone().expect("peak fit");
    assert!((1.0 * US..=7.0 * US).contains(&fit.mean));
    assert!((run.window.delay + 0.5 * run.window.width - fit.mean).abs() < 1e-15);
    let r = estimate_efficiency(&run.report).unwrap();
    let truth = run.true_efficiency().unwrap();
    assert!((r.eta_i - truth).abs() <= 3.0 * r.sigma_eta, "{} vs {truth}", r.eta_i);
    let check = sub_poissonian_check(&r);
    assert!(!check.above && check.margin < 0.0);
    let row = r.to_csv_row();
    assert_eq!(row.split(',').count(), CalibrationResult::CSV_HEADER.split(',').count());
}

#[test]
fn mesh_in_the_chain_scales_the_efficiency() {
    let s = setup();
    let mut meshed = s.clone();
    meshed.mesh_transmission = Some(0.87);
    let a = estimate_efficiency(&simulate_calibration(&s, &mut seeded(3)).unwrap().report).unwrap();
    let b = estimate_efficiency(&simulate_calibration(&meshed, &mut seeded(3)).unwrap().report).unwrap();
    let expected = 0.87 * a.eta_i;
    assert!(
        (b.eta_i - expected).abs() <= 3.0 * b.sigma_eta,
        "{} vs {expected}",
        b.eta_i
    );
}

#[test]
fn fixed_window_skips_the_fit() {
    let mut s = setup();
    s.analysis.window_center = Some(3.0 * US);
    let run = simulate_calibration(&s, &mut seeded(4)).unwrap();
    assert!(run.fit.is_none());
    assert!((run.window.delay - (3.0 * US - 400.0 * NS)).abs() < 1e-15);
}

#[test]
fn dark_beam_has_no_signal() {
    let mut s = setup();
    s.beam.power = 0.0;
    assert!(matches!(
        simulate_calibration(&s, &mut seeded(5)),
        Err(Error::NoSignal(_))
    ));
}
