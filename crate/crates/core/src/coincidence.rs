//! Electron-triggered coincidence counting, delay spectra and the Gaussian
//! peak fit.
//!
//! Every (electron, ion) pair whose delay falls inside the window counts, so
//! an ion can be matched by several electrons at high rates. This keeps
//! the accidental rate exactly `r_e * r_i * width` and makes the delay
//! spectrum additive over adjacent windows.

use nalgebra::{Matrix4, Vector4};
use serde::{Deserialize, Serialize};

use crate::detector::PulseStream;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowSpec {
    /// Start of the window after each electron pulse.
    pub delay: f64,
    pub width: f64,
}

impl WindowSpec {
    pub fn new(delay: f64, width: f64) -> Result<Self> {
        if !(width > 0.0) || !(delay >= 0.0) {
            return Err(Error::InvalidInput(format!(
                "window needs width > 0 and delay >= 0, got width {width}, delay {delay}"
            )));
        }
        Ok(Self { delay, width })
    }

    /// Window of `width` centred on `center`.
    pub fn centered(center: f64, width: f64) -> Result<Self> {
        Self::new(center - 0.5 * width, width)
    }

    pub fn displaced(&self, by: f64) -> Self {
        Self {
            delay: self.delay + by,
            width: self.width,
        }
    }
}

/// Pairs with `ion - electron` in `[delay, delay + width)`, by a two-pointer
/// sweep in `O(n_e + n_i)`.
pub fn count_coincidences(electrons: &PulseStream, ions: &PulseStream, w: &WindowSpec) -> u64 {
    count_pairs(electrons.times(), ions.times(), w.delay, w.delay + w.width)
}

fn count_pairs(electrons: &[f64], ions: &[f64], lo: f64, hi: f64) -> u64 {
    let (mut a, mut b) = (0usize, 0usize);
    let mut total = 0u64;
    for &e in electrons {
        while a < ions.len() && ions[a] - e < lo {
            a += 1;
        }
        b = b.max(a);
        while b < ions.len() && ions[b] - e < hi {
            b += 1;
        }
        total += (b - a) as u64;
    }
    total
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoincidenceSpectrum {
    /// Delay at the start of the first bin.
    pub start: f64,
    pub bin_width: f64,
    pub counts: Vec<u64>,
    /// Acquisition time the streams cover.
    pub duration: f64,
}

impl CoincidenceSpectrum {
    pub fn bin_start(&self, i: usize) -> f64 {
        self.start + i as f64 * self.bin_width
    }

    pub fn bin_center(&self, i: usize) -> f64 {
        self.bin_start(i) + 0.5 * self.bin_width
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// `delay_s,count` with the delay at the bin start.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("delay_s,count\n");
        for (i, c) in self.counts.iter().enumerate() {
            s.push_str(&format!("{:e},{c}\n", self.bin_start(i)));
        }
        s
    }
}

/// Histogram of all pair delays in `range`, one bin per contiguous window of
/// `bin_width`. The last bin may extend past `range.1` to keep the width
/// uniform.
pub fn delay_spectrum(
    electrons: &PulseStream,
    ions: &PulseStream,
    bin_width: f64,
    range: (f64, f64),
    duration: f64,
) -> Result<CoincidenceSpectrum> {
    let (lo, hi) = range;
    if !(bin_width > 0.0) || !(hi > lo) {
        return Err(Error::InvalidInput(format!(
            "delay spectrum needs bin_width > 0 and a non-empty range, got {bin_width} over [{lo}, {hi})"
        )));
    }
    let nbins = ((hi - lo) / bin_width - 1e-9).ceil() as usize;
    let top = lo + nbins as f64 * bin_width;
    let mut counts = vec![0u64; nbins];
    let ions = ions.times();
    let mut a = 0usize;
    for &e in electrons.times() {
        while a < ions.len() && ions[a] - e < lo {
            a += 1;
        }
        for &t in &ions[a..] {
            let d = t - e;
            if d >= top {
                break;
            }
            // Same comparison as the window test in `count_pairs`, so bins
            // and windows agree at the edges.
            let mut k = (((d - lo) / bin_width).floor() as usize).min(nbins - 1);
            while k > 0 && d < lo + k as f64 * bin_width {
                k -= 1;
            }
            while k + 1 < nbins && d >= lo + (k + 1) as f64 * bin_width {
                k += 1;
            }
            counts[k] += 1;
        }
    }
    Ok(CoincidenceSpectrum {
        start: lo,
        bin_width,
        counts,
        duration,
    })
}

/// First-order accidental-coincidence rate of two independent Poisson
/// streams.
pub fn expected_false_rate(r_e: f64, r_i: f64, width: f64) -> f64 {
    r_e * r_i * width
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianFit {
    pub mean: f64,
    pub sigma: f64,
    pub amplitude: f64,
    pub offset: f64,
    /// Parameter covariance in the order (mean, sigma, amplitude, offset).
    pub covariance: [[f64; 4]; 4],
    pub iterations: usize,
    pub chi2: f64,
}

impl GaussianFit {
    pub fn mean_error(&self) -> f64 {
        self.covariance[0][0].sqrt()
    }

    pub fn sigma_error(&self) -> f64 {
        self.covariance[1][1].sqrt()
    }

    pub fn eval(&self, t: f64) -> f64 {
        model(&Vector4::new(self.mean, self.sigma, self.amplitude, self.offset), t)
    }
}

const MAX_ITER: usize = 200;

fn model(p: &Vector4<f64>, t: f64) -> f64 {
    let z = (t - p[0]) / p[1];
    p[3] + p[2] * (-0.5 * z * z).exp()
}

fn gradient(p: &Vector4<f64>, t: f64) -> Vector4<f64> {
    let z = (t - p[0]) / p[1];
    let g = (-0.5 * z * z).exp();
    Vector4::new(p[2] * g * z / p[1], p[2] * g * z * z / p[1], g, 1.0)
}

/// Weighted least squares of `offset + amplitude * exp(-(t - mean)^2 / 2 sigma^2)`
/// with variances `max(count, 1)`, by Levenberg-Marquardt from moment
/// estimates. The offset is kept non-negative.
pub fn fit_gaussian(spec: &CoincidenceSpectrum) -> Result<GaussianFit> {
    let n = spec.counts.len();
    if n < 8 {
        return Err(Error::UnresolvedPeak(format!("{n} bins, need at least 8")));
    }
    let t: Vec<f64> = (0..n).map(|i| spec.bin_center(i)).collect();
    let y: Vec<f64> = spec.counts.iter().map(|&c| c as f64).collect();
    let w: Vec<f64> = y.iter().map(|&c| 1.0 / c.max(1.0)).collect();
    let max = y.iter().cloned().fold(f64::MIN, f64::max);
    let mut sorted = y.clone();
    sorted.sort_by(f64::total_cmp);
    let floor = sorted[n / 2];
    if !(max > floor) {
        return Err(Error::UnresolvedPeak("no bin rises above the median".into()));
    }
    let mut p = initial_guess(spec, &t, &y, floor);
    let chi2 = |p: &Vector4<f64>| -> f64 {
        t.iter()
            .zip(&y)
            .zip(&w)
            .map(|((&t, &y), &w)| {
                let r = y - model(p, t);
                w * r * r
            })
            .sum()
    };
    let normal = |p: &Vector4<f64>| -> (Matrix4<f64>, Vector4<f64>) {
        let mut a = Matrix4::zeros();
        let mut g = Vector4::zeros();
        for ((&t, &y), &w) in t.iter().zip(&y).zip(&w) {
            let j = gradient(p, t);
            a += w * j * j.transpose();
            g += w * (y - model(p, t)) * j;
        }
        (a, g)
    };
    let mut lambda = 1e-3;
    let mut cost = chi2(&p);
    let mut converged = false;
    let mut iterations = 0;
    for it in 1..=MAX_ITER {
        iterations = it;
        let (a, g) = normal(&p);
        let mut improved = false;
        for _ in 0..30 {
            let mut damped = a;
            for d in 0..4 {
                damped[(d, d)] *= 1.0 + lambda;
            }
            let Some(step) = damped.lu().solve(&g) else {
                lambda *= 10.0;
                continue;
            };
            let mut trial = p + step;
            trial[3] = trial[3].max(0.0);
            trial[1] = trial[1].abs();
            let c = chi2(&trial);
            if c.is_finite() && c <= cost {
                let rel = (cost - c) / cost.max(1e-300);
                let small_step = (0..4).all(|d| (trial[d] - p[d]).abs() <= 1e-10 * p[d].abs().max(1e-300));
                p = trial;
                cost = c;
                lambda = (lambda * 0.1).max(1e-12);
                improved = true;
                converged = rel < 1e-12 || small_step;
                break;
            }
            lambda *= 10.0;
        }
        if !improved {
            // No downhill step at any damping: at a minimum to rounding.
            converged = true;
        }
        if converged {
            break;
        }
    }
    if !converged {
        return Err(Error::FitDiverged(MAX_ITER));
    }
    let (a, _) = normal(&p);
    let cov = a
        .try_inverse()
        .ok_or_else(|| Error::UnresolvedPeak("singular curvature matrix".into()))?;
    let (mean, sigma, amplitude, offset) = (p[0], p[1], p[2], p[3]);
    let span = spec.bin_width * n as f64;
    if !(sigma >= 0.5 * spec.bin_width) {
        return Err(Error::UnresolvedPeak(format!(
            "fitted sigma {sigma:.3e} s is below half a bin ({:.3e} s)",
            0.5 * spec.bin_width
        )));
    }
    if !(amplitude > 0.0) || sigma > span || mean < t[0] || mean > t[n - 1] {
        return Err(Error::UnresolvedPeak(
            "fit did not settle on a peak inside the range".into(),
        ));
    }
    let amp_err = cov[(2, 2)].sqrt();
    if amplitude < 3.0 * amp_err {
        return Err(Error::UnresolvedPeak(format!(
            "peak amplitude {amplitude:.2} is not significant (error {amp_err:.2})"
        )));
    }
    let mut covariance = [[0.0; 4]; 4];
    for (i, row) in covariance.iter_mut().enumerate() {
        for (j, c) in row.iter_mut().enumerate() {
            *c = cov[(i, j)];
        }
    }
    Ok(GaussianFit {
        mean,
        sigma,
        amplitude,
        offset,
        covariance,
        iterations,
        chi2: cost,
    })
}

/// Moments of the excess over the median, restricted to the bins around
/// the maximum that stay above half the peak excess.
fn initial_guess(spec: &CoincidenceSpectrum, t: &[f64], y: &[f64], floor: f64) -> Vector4<f64> {
    let (imax, &ymax) = y
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .expect("non-empty spectrum");
    let half = floor + 0.5 * (ymax - floor);
    let mut lo = imax;
    while lo > 0 && y[lo - 1] > half {
        lo -= 1;
    }
    let mut hi = imax;
    while hi + 1 < y.len() && y[hi + 1] > half {
        hi += 1;
    }
    // Widen to about +-2 sigma of a Gaussian whose half maximum is at lo..hi.
    let pad = (hi - lo + 1).max(2);
    let lo = lo.saturating_sub(pad);
    let hi = (hi + pad).min(y.len() - 1);
    let (mut s0, mut s1, mut s2) = (0.0, 0.0, 0.0);
    for i in lo..=hi {
        let e = (y[i] - floor).max(0.0);
        s0 += e;
        s1 += e * t[i];
        s2 += e * t[i] * t[i];
    }
    let mean = if s0 > 0.0 { s1 / s0 } else { t[imax] };
    let var = if s0 > 0.0 {
        (s2 / s0 - mean * mean).max(0.0)
    } else {
        0.0
    };
    let sigma = var.sqrt().max(spec.bin_width);
    Vector4::new(mean, sigma, ymax - floor, floor)
}
