//! Property tests for the counting, detector and estimator layers. None of
//! these need a field solve.

use iondet::calibrate::{efficiency_uncertainty, estimate_efficiency, CountReport};
use iondet::coincidence::{count_coincidences, delay_spectrum, fit_gaussian, WindowSpec};
use iondet::detector::{apply_dead_time, cem_efficiency, poisson_times, CemModel, Channel, PulseStream};
use iondet::geometry::VoltageConfig;
use iondet::rng::{seeded, substream};
use iondet::units::{NS, US};
use iondet::RunConfig;
use proptest::prelude::*;
use rand::Rng;
use rand_distr::{Distribution, Normal};

fn sorted_times(max_len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0..1e-3f64, 0..max_len)
}

fn brute_force(e: &[f64], i: &[f64], w: &WindowSpec) -> u64 {
    e.iter()
        .map(|&te| {
            i.iter()
                .filter(|&&ti| ti - te >= w.delay && ti - te < w.delay + w.width)
                .count() as u64
        })
        .sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn coincidences_match_all_pairs(
        e in sorted_times(300),
        i in sorted_times(300),
        delay in 0.0..2e-4f64,
        width in 1e-7..2e-4f64,
    ) {
        let pe = PulseStream::from_times(Channel::Electron, e);
        let pi = PulseStream::from_times(Channel::Ion, i);
        let w = WindowSpec::new(delay, width).unwrap();
        prop_assert_eq!(count_coincidences(&pe, &pi, &w), brute_force(pe.times(), pi.times(), &w));
    }

    #[test]
    fn dead_time_output_is_a_spaced_subset(times in sorted_times(500), tau in 1e-9..1e-5f64) {
        let s = PulseStream::from_times(Channel::Ion, times);
        let d = apply_dead_time(&s, tau);
        prop_assert!(d.times().windows(2).all(|w| w[1] - w[0] >= tau));
        prop_assert!(d.times().iter().all(|t| s.times().contains(t)));
        let again = apply_dead_time(&d, tau);
        prop_assert_eq!(again.times(), d.times());
        if let (Some(a), Some(b)) = (s.times().first(), d.times().first()) {
            prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn cem_efficiency_is_monotone_and_bounded(
        gamma in 0.01..5.0f64,
        v0 in 500.0..2500.0f64,
        vs in 10.0..1000.0f64,
        a in 0.0..6000.0f64,
        b in 0.0..6000.0f64,
    ) {
        let m = CemModel { gamma_ion: gamma, v0, vs, ..CemModel::default() };
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        let bound = 1.0 - (-gamma).exp();
        prop_assert!(cem_efficiency(&m, lo) <= cem_efficiency(&m, hi) + 1e-15);
        prop_assert!(cem_efficiency(&m, hi) <= bound + 1e-15);
        prop_assert!(cem_efficiency(&m, lo) >= 0.0);
    }

    #[test]
    fn estimator_without_backgrounds_is_the_plain_ratio(n_e in 10u64..100_000, frac in 0.0..1.0f64) {
        let n_c = (frac * n_e as f64).floor() as u64;
        let r = CountReport { n_e_meas: n_e, n_bg: 0, n_c_meas: n_c, n_false: 0, t_signal: 10.0, t_background: 10.0 };
        let est = estimate_efficiency(&r).unwrap();
        prop_assert!((est.eta_i - n_c as f64 / n_e as f64).abs() < 1e-12);
        let eta = est.eta_i;
        prop_assert!((est.sigma_eta - (eta * (1.0 - eta) / n_e as f64).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn uncertainty_shrinks_like_inverse_root_exposure(
        n_e in 1_000u64..20_000,
        eta in 0.05..0.95f64,
        bg in 0.0..0.2f64,
        k in 2u64..50,
    ) {
        let n_bg = (bg * n_e as f64) as u64;
        let r = |m: u64| CountReport {
            n_e_meas: m * n_e,
            n_bg: m * n_bg,
            n_c_meas: m * (eta * (n_e - n_bg) as f64) as u64,
            n_false: m * (n_bg / 10),
            t_signal: 10.0,
            t_background: 10.0,
        };
        let s1 = efficiency_uncertainty(&r(1)).unwrap();
        let sk = efficiency_uncertainty(&r(k)).unwrap();
        prop_assert!((sk * (k as f64).sqrt() / s1 - 1.0).abs() < 1e-9);
    }

    /// Counting-level model of the calibration: every event gives an
    /// electron with probability eta_e and an ion with probability eta_i,
    /// plus independent backgrounds on both channels. The estimate must not
    /// depend on eta_e.
    #[test]
    fn estimate_is_independent_of_electron_efficiency(eta_e in 0.05..0.95f64, seed in 0u64..1_000_000) {
        let eta_i = 0.478;
        let t = 40.0;
        let mut rng = seeded(seed);
        let births = poisson_times(500.0, t, &mut rng);
        let delay = Normal::new(3.0 * US, 20.0 * NS).unwrap();
        let (mut e, mut i) = (Vec::new(), Vec::new());
        for &tb in &births {
            if rng.random::<f64>() < eta_e {
                e.push(tb);
            }
            if rng.random::<f64>() < eta_i {
                i.push(tb + delay.sample(&mut rng));
            }
        }
        e.extend(poisson_times(5.0, t, &mut rng));
        i.extend(poisson_times(20.0, t, &mut rng));
        let pe = PulseStream::from_times(Channel::Electron, e);
        let pi = PulseStream::from_times(Channel::Ion, i);
        let w = WindowSpec::centered(3.0 * US, 400.0 * NS).unwrap();
        let report = CountReport {
            n_e_meas: pe.len() as u64,
            n_bg: poisson_times(5.0, t, &mut rng).len() as u64,
            n_c_meas: count_coincidences(&pe, &pi, &w),
            n_false: count_coincidences(&pe, &pi, &w.displaced(4.0 * US)),
            t_signal: t,
            t_background: t,
        };
        let est = estimate_efficiency(&report).unwrap();
        prop_assert!((est.eta_i_raw - eta_i).abs() <= 4.0 * est.sigma_eta, "{} +- {}", est.eta_i_raw, est.sigma_eta);
    }

    #[test]
    fn noiseless_gaussian_is_fitted_exactly(
        mean in 1.5e-6..5e-6f64,
        sigma in 20e-9..200e-9f64,
        amp in 50.0..5000.0f64,
        floor in 0.0..20.0f64,
    ) {
        let mut spec = delay_spectrum(
            &PulseStream::empty(Channel::Electron),
            &PulseStream::empty(Channel::Ion),
            10e-9,
            (0.0, 8e-6),
            1.0,
        ).unwrap();
        for k in 0..spec.counts.len() {
            let x = spec.bin_center(k);
            spec.counts[k] = (floor + amp * (-0.5 * ((x - mean) / sigma).powi(2)).exp()).round() as u64;
        }
        let f = fit_gaussian(&spec).unwrap();
        prop_assert!((f.mean - mean).abs() < 0.05 * sigma, "mean {} vs {}", f.mean, mean);
        prop_assert!((f.sigma / sigma - 1.0).abs() < 0.05, "sigma {} vs {}", f.sigma, sigma);
    }

    #[test]
    fn pulse_csv_round_trips(times in sorted_times(200)) {
        let s = PulseStream::from_times(Channel::Ion, times);
        let back = PulseStream::from_csv(Channel::Ion, &s.to_csv()).unwrap();
        prop_assert_eq!(back.len(), s.len());
        for (a, b) in back.times().iter().zip(s.times()) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn voltage_ratios_round_trip(u_e in -500.0..-1.0f64, tr in 0.5..8.0f64, dr in -8.0..0.0f64, k in 0.1..10.0f64) {
        let v = VoltageConfig::from_ratios(u_e, tr, dr, -2900.0);
        prop_assert!((v.tube_ratio() - tr).abs() < 1e-12);
        prop_assert!((v.deflection_ratio() - dr).abs() < 1e-12);
        let s = v.scaled(k);
        prop_assert!((s.tube_ratio() - tr).abs() < 1e-12);
        prop_assert!((s.u_c - k * v.u_c).abs() < 1e-9);
    }

    #[test]
    fn substreams_are_reproducible(master in any::<u64>(), tag in 0u64..16, idx in any::<u64>()) {
        let a: [u64; 4] = substream(master, tag, idx).random();
        let b: [u64; 4] = substream(master, tag, idx).random();
        let c: [u64; 4] = substream(master, tag, idx.wrapping_add(1)).random();
        prop_assert_eq!(a, b);
        prop_assert_ne!(a, c);
    }

    #[test]
    fn config_survives_toml(seed in any::<u64>(), eta_e in 0.01..1.0f64, bias in 1000.0..4000.0f64, spacing in 0.05..0.5f64) {
        let mut cfg = RunConfig { seed: Some(seed), ..Default::default() };
        cfg.electron_channel.eta_e = eta_e;
        cfg.ion_cem.bias_v = bias;
        cfg.grid.spacing_mm = spacing;
        let back = RunConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        prop_assert_eq!(back, cfg);
    }
}

#[test]
fn dead_time_formula_at_high_rate() {
    let (r, tau, t) = (1.0e6, 50.0 * NS, 0.1);
    let raw = PulseStream::from_times(Channel::Ion, poisson_times(r, t, &mut seeded(77)));
    let m = apply_dead_time(&raw, tau).len() as f64;
    let expected = r * t / (1.0 + r * tau);
    let sigma = (r * t / (1.0 + r * tau).powi(3)).sqrt();
    assert!((m - expected).abs() <= 3.0 * sigma, "{m} vs {expected} +- {sigma}");
}
