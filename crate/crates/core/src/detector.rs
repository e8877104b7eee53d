//! Stochastic response of the two CEM channels.
//!
//! An ion impact releases a Poisson number of first-strike secondaries with
//! mean `gamma_ion`; the pulse is registered if at least one is released and
//! the avalanche it starts survives. Survival saturates with the bias
//! voltage across the channel.

use rand::Rng;
use rand_distr::{Distribution, Exp, Gamma, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::transport::ElectronTransitModel;
use crate::units::NS;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CemModel {
    /// Mean first-strike secondary yield per ion impact.
    pub gamma_ion: f64,
    /// Bias below which no avalanche survives.
    pub v0: f64,
    /// Voltage scale of the survival saturation.
    pub vs: f64,
    /// Non-paralyzable dead time.
    pub dead_time: f64,
    pub dark_rate: f64,
    /// Delay from impact to the output pulse.
    pub transit_offset: f64,
}

impl Default for CemModel {
    fn default() -> Self {
        Self {
            gamma_ion: 0.650,
            v0: 1800.0,
            vs: 200.0,
            dead_time: 50.0 * NS,
            dark_rate: 0.0,
            transit_offset: 0.0,
        }
    }
}

impl CemModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma_ion > 0.0) {
            return Err(Error::InvalidInput(format!(
                "gamma_ion must be positive, got {}",
                self.gamma_ion
            )));
        }
        if !(self.vs > 0.0) {
            return Err(Error::InvalidInput("cascade voltage scale must be positive".into()));
        }
        if !(self.dead_time >= 0.0 && self.dark_rate >= 0.0) {
            return Err(Error::InvalidInput(
                "dead time and dark rate must be non-negative".into(),
            ));
        }
        Ok(())
    }

    /// `max(0, 1 - exp(-(V - V0) / Vs))`.
    pub fn cascade_survival(&self, bias: f64) -> f64 {
        (1.0 - (-(bias - self.v0) / self.vs).exp()).max(0.0)
    }

    /// The same model with `gamma_ion` read off a yield curve at horn
    /// voltage `u_c`. The default operating point keeps `gamma_ion` fixed.
    pub fn at_horn_voltage(self, u_c: f64, gamma: impl Fn(f64) -> f64) -> Self {
        Self {
            gamma_ion: gamma(u_c),
            ..self
        }
    }

    /// Probability of at least one first-strike secondary.
    pub fn first_strike(&self) -> f64 {
        -(-self.gamma_ion).exp_m1()
    }
}

/// `(1 - exp(-gamma_ion)) * cascade_survival(V)`.
pub fn cem_efficiency(model: &CemModel, bias: f64) -> f64 {
    model.first_strike() * model.cascade_survival(bias)
}

/// Pulse time for one ion impact, or `None` if the CEM misses it. Exactly
/// one uniform draw.
pub fn detect_ion<R: Rng + ?Sized>(model: &CemModel, impact_time: f64, bias: f64, rng: &mut R) -> Option<f64> {
    let u: f64 = rng.random();
    (u < cem_efficiency(model, bias)).then_some(impact_time + model.transit_offset)
}

/// Number of first-strike secondaries for one impact.
pub fn sample_secondaries<R: Rng + ?Sized>(model: &CemModel, rng: &mut R) -> u64 {
    Poisson::new(model.gamma_ion).expect("positive yield").sample(rng) as u64
}

/// Same distribution as [`detect_ion`], drawing the secondaries explicitly
/// and then the avalanche survival.
pub fn detect_ion_explicit<R: Rng + ?Sized>(model: &CemModel, impact_time: f64, bias: f64, rng: &mut R) -> Option<f64> {
    let k = sample_secondaries(model, rng);
    let u: f64 = rng.random();
    (k > 0 && u < model.cascade_survival(bias)).then_some(impact_time + model.transit_offset)
}

/// Explicit draw with a pulse height. Each first-strike secondary adds an
/// exponential charge of unit mean, so `k` secondaries give a Gamma(k, 1)
/// height, and the pulse counts only above `threshold` (in units of that
/// mean). Returns the pulse time and height. With `threshold = 0` the
/// detection probability is [`cem_efficiency`].
pub fn detect_ion_with_height<R: Rng + ?Sized>(
    model: &CemModel,
    impact_time: f64,
    bias: f64,
    threshold: f64,
    rng: &mut R,
) -> Option<(f64, f64)> {
    let k = sample_secondaries(model, rng);
    let u: f64 = rng.random();
    if k == 0 || u >= model.cascade_survival(bias) {
        return None;
    }
    let height = Gamma::new(k as f64, 1.0).expect("positive shape").sample(rng);
    (height > threshold).then_some((impact_time + model.transit_offset, height))
}

/// Lumped electron side: barrier, conversion plate and electron CEM.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElectronChannelModel {
    pub eta_e: f64,
    /// Pulses per second with the laser off resonance.
    pub background_rate: f64,
    pub dead_time: f64,
    pub transit: ElectronTransitModel,
}

impl Default for ElectronChannelModel {
    fn default() -> Self {
        Self {
            eta_e: 0.3,
            background_rate: 2.0,
            dead_time: 50.0 * NS,
            transit: ElectronTransitModel::default(),
        }
    }
}

impl ElectronChannelModel {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.eta_e) {
            return Err(Error::InvalidInput(format!(
                "eta_e must lie in [0, 1], got {}",
                self.eta_e
            )));
        }
        if !(self.background_rate >= 0.0 && self.dead_time >= 0.0) {
            return Err(Error::InvalidInput(
                "background rate and dead time must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Channel {
    Electron,
    Ion,
}

/// Sorted pulse timestamps of one channel, at least 1 ns apart.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PulseStream {
    pub channel: Channel,
    times: Vec<f64>,
}

const RESOLUTION: f64 = 1.0 * NS;

impl PulseStream {
    pub fn empty(channel: Channel) -> Self {
        Self {
            channel,
            times: Vec::new(),
        }
    }

    /// Sorts the times and merges pulses closer than 1 ns into the first.
    pub fn from_times(channel: Channel, mut times: Vec<f64>) -> Self {
        times.sort_by(f64::total_cmp);
        times.dedup_by(|later, kept| *later - *kept < RESOLUTION);
        Self { channel, times }
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Pulses with `start <= t < end`.
    pub fn count_in(&self, start: f64, end: f64) -> usize {
        let lo = self.times.partition_point(|&t| t < start);
        let hi = self.times.partition_point(|&t| t < end);
        hi.saturating_sub(lo)
    }

    /// One timestamp per line in seconds, rounded to 1 ps.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("t_s\n");
        for t in &self.times {
            s.push_str(&format!("{t:.12}\n"));
        }
        s
    }

    /// Reads a single-column CSV. A non-numeric first line is taken as a
    /// header.
    pub fn from_csv(channel: Channel, text: &str) -> Result<Self> {
        let mut times = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            match line.parse::<f64>() {
                Ok(t) if t.is_finite() => times.push(t),
                _ if n == 0 => continue,
                _ => {
                    return Err(Error::InvalidInput(format!(
                        "line {}: `{line}` is not a timestamp",
                        n + 1
                    )))
                }
            }
        }
        Ok(Self::from_times(channel, times))
    }
}

/// Non-paralyzable dead time: a pulse is kept iff it comes at least `tau`
/// after the last kept pulse.
pub fn apply_dead_time(stream: &PulseStream, tau: f64) -> PulseStream {
    if tau <= 0.0 {
        return stream.clone();
    }
    let mut kept = Vec::with_capacity(stream.len());
    let mut last = f64::NEG_INFINITY;
    for &t in &stream.times {
        if t - last >= tau {
            kept.push(t);
            last = t;
        }
    }
    PulseStream {
        channel: stream.channel,
        times: kept,
    }
}

/// Homogeneous Poisson arrival times on `[0, duration)`.
pub fn poisson_times<R: Rng + ?Sized>(rate: f64, duration: f64, rng: &mut R) -> Vec<f64> {
    if !(rate > 0.0) || !(duration > 0.0) {
        return Vec::new();
    }
    let gaps = Exp::new(rate).expect("positive rate");
    let mut out = Vec::with_capacity((rate * duration * 1.05) as usize + 16);
    let mut t = 0.0;
    loop {
        t += gaps.sample(rng);
        if t >= duration {
            return out;
        }
        out.push(t);
    }
}

/// Merges an independent Poisson stream of `rate` over `[0, duration)`.
pub fn add_background<R: Rng + ?Sized>(
    stream: &PulseStream,
    rate: f64,
    duration: f64,
    rng: &mut R,
) -> Result<PulseStream> {
    if !(rate >= 0.0) {
        return Err(Error::InvalidInput(format!(
            "background rate must be non-negative, got {rate}"
        )));
    }
    let extra = poisson_times(rate, duration, rng);
    if extra.is_empty() {
        return Ok(stream.clone());
    }
    let mut times = stream.times.clone();
    times.extend(extra);
    Ok(PulseStream::from_times(stream.channel, times))
}
