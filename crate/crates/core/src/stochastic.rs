//! Two-state telegraph dynamics of a single emitter: exact Gillespie
//! simulation, photon-count histograms and occupancy estimation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{AnalysisError, ModelError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmitterState {
    Bright,
    Dark,
}

impl EmitterState {
    fn flip(self) -> Self {
        match self {
            EmitterState::Bright => EmitterState::Dark,
            EmitterState::Dark => EmitterState::Bright,
        }
    }
}

fn one() -> f64 {
    1.0
}

fn bright() -> EmitterState {
    EmitterState::Bright
}

/// Rates in 1/s, brightness in kcps. While remote illumination is on, each
/// rate is multiplied by its modifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TelegraphModel {
    pub bright_to_dark: f64,
    pub dark_to_bright: f64,
    pub bright_kcps: f64,
    #[serde(default)]
    pub dark_kcps: f64,
    #[serde(default = "one")]
    pub remote_bright_to_dark: f64,
    #[serde(default = "one")]
    pub remote_dark_to_bright: f64,
    /// Remote illumination on-intervals `[start, end)`, s.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub remote_windows: Vec<[f64; 2]>,
    #[serde(default = "bright")]
    pub initial: EmitterState,
}

impl TelegraphModel {
    pub fn symmetric(rate: f64, bright_kcps: f64) -> Self {
        TelegraphModel {
            bright_to_dark: rate,
            dark_to_bright: rate,
            bright_kcps,
            dark_kcps: 0.0,
            remote_bright_to_dark: 1.0,
            remote_dark_to_bright: 1.0,
            remote_windows: Vec::new(),
            initial: EmitterState::Bright,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        for (name, v) in [
            ("bright_to_dark", self.bright_to_dark),
            ("dark_to_bright", self.dark_to_bright),
            ("remote_bright_to_dark", self.remote_bright_to_dark),
            ("remote_dark_to_bright", self.remote_dark_to_bright),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(ModelError::NegativeRate(format!("telegraph {name} = {v}")));
            }
        }
        if !(self.dark_kcps >= 0.0 && self.bright_kcps > self.dark_kcps) {
            return Err(ModelError::config(
                "telegraph.bright_kcps",
                "brightness must satisfy bright > dark >= 0",
            ));
        }
        let mut last = f64::NEG_INFINITY;
        for w in &self.remote_windows {
            if !(w[1] > w[0] && w[0] >= last) {
                return Err(ModelError::config(
                    "telegraph.remote_windows",
                    "windows must be non-empty, ordered and non-overlapping",
                ));
            }
            last = w[1];
        }
        Ok(())
    }

    /// Stationary bright fraction without remote illumination.
    pub fn stationary_bright(&self) -> f64 {
        self.dark_to_bright / (self.bright_to_dark + self.dark_to_bright)
    }

    fn rate_out(&self, state: EmitterState, remote: bool) -> f64 {
        match (state, remote) {
            (EmitterState::Bright, false) => self.bright_to_dark,
            (EmitterState::Bright, true) => self.bright_to_dark * self.remote_bright_to_dark,
            (EmitterState::Dark, false) => self.dark_to_bright,
            (EmitterState::Dark, true) => self.dark_to_bright * self.remote_dark_to_bright,
        }
    }

    /// Whether remote illumination is on at `t`, and when that next changes.
    fn remote_at(&self, t: f64) -> (bool, f64) {
        for w in &self.remote_windows {
            if t < w[0] {
                return (false, w[0]);
            }
            if t < w[1] {
                return (true, w[1]);
            }
        }
        (false, f64::INFINITY)
    }
}

/// Piecewise-constant state trajectory: `states[i]` holds on
/// `[times[i], times[i+1])`, the last one until `duration`.
#[derive(Debug, Clone, PartialEq)]
pub struct TelegraphTrace {
    pub times: Vec<f64>,
    pub states: Vec<EmitterState>,
    pub duration: f64,
}

impl TelegraphTrace {
    pub fn switches(&self) -> usize {
        self.states.len() - 1
    }

    fn segment_end(&self, i: usize) -> f64 {
        self.times.get(i + 1).copied().unwrap_or(self.duration)
    }

    /// Completed dwell durations in `state` (the final, censored dwell is excluded).
    pub fn dwell_times(&self, state: EmitterState) -> Vec<f64> {
        (0..self.switches())
            .filter(|&i| self.states[i] == state)
            .map(|i| self.times[i + 1] - self.times[i])
            .collect()
    }

    /// Time spent bright within `[a, b)`.
    pub fn bright_time(&self, a: f64, b: f64) -> f64 {
        let start = self.times.partition_point(|&t| t <= a).saturating_sub(1);
        let mut total = 0.0;
        for i in start..self.states.len() {
            let (s, e) = (self.times[i].max(a), self.segment_end(i).min(b));
            if self.times[i] >= b {
                break;
            }
            if e > s && self.states[i] == EmitterState::Bright {
                total += e - s;
            }
        }
        total
    }
}

/// Exact stochastic simulation over `[0, duration)`.
pub fn gillespie_simulate(model: &TelegraphModel, duration: f64, seed: u64) -> TelegraphTrace {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = 0.0;
    let mut state = model.initial;
    let mut times = vec![0.0];
    let mut states = vec![state];
    let mut budget: f64 = Exp1.sample(&mut rng);
    while t < duration {
        let (remote, change) = model.remote_at(t);
        let seg_end = change.min(duration);
        let rate = model.rate_out(state, remote);
        if rate > 0.0 && rate * (seg_end - t) >= budget {
            t += budget / rate;
            if t >= duration {
                break;
            }
            state = state.flip();
            times.push(t);
            states.push(state);
            budget = Exp1.sample(&mut rng);
        } else {
            budget -= rate * (seg_end - t);
            t = seg_end;
        }
    }
    TelegraphTrace {
        times,
        states,
        duration,
    }
}

/// Photon counts per time bin and their histogram.
#[derive(Debug, Clone, PartialEq)]
pub struct CountHistogram {
    /// s.
    pub bin_width: f64,
    pub counts: Vec<u64>,
    /// Lower edge of each histogram bin, counts per time bin.
    pub edges: Vec<u64>,
    pub frequencies: Vec<u64>,
}

impl CountHistogram {
    /// Fraction of time bins with more than `threshold` counts.
    pub fn mass_above(&self, threshold: f64) -> f64 {
        let n = self.counts.iter().filter(|&&c| c as f64 > threshold).count();
        n as f64 / self.counts.len().max(1) as f64
    }
}

/// Poisson photon counts per `bin_width` with mean kcps·1000·(time in state),
/// histogrammed with `count_bin` counts per histogram bin.
pub fn histogram(
    trace: &TelegraphTrace,
    model: &TelegraphModel,
    bin_width: f64,
    count_bin: u64,
    seed: u64,
) -> CountHistogram {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nbins = (trace.duration / bin_width).floor() as usize;
    let mut counts = Vec::with_capacity(nbins);
    for b in 0..nbins {
        let (a, e) = (b as f64 * bin_width, (b + 1) as f64 * bin_width);
        let tb = trace.bright_time(a, e);
        let mean = 1e3 * (model.bright_kcps * tb + model.dark_kcps * (bin_width - tb));
        let c = if mean > 0.0 {
            Poisson::new(mean).map(|p| p.sample(&mut rng) as u64).unwrap_or(0)
        } else {
            0
        };
        counts.push(c);
    }
    let count_bin = count_bin.max(1);
    let top = counts.iter().copied().max().unwrap_or(0) / count_bin;
    let mut frequencies = vec![0u64; top as usize + 1];
    for &c in &counts {
        frequencies[(c / count_bin) as usize] += 1;
    }
    let edges = (0..=top).map(|k| k * count_bin).collect();
    CountHistogram {
        bin_width,
        counts,
        edges,
        frequencies,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OccupancyEstimate {
    pub bright_fraction: f64,
    pub stderr: f64,
    pub blocks: usize,
}

pub const MIN_SWITCHES: usize = 10;
const BOOTSTRAP_BLOCKS: usize = 20;
const BOOTSTRAP_RESAMPLES: usize = 2000;

/// Time-weighted bright occupancy with a block-bootstrap standard error.
///
/// A trace that never switches has an exact occupancy and zero error; one with
/// 1 to 9 switches is rejected as too short to estimate an error.
pub fn estimate_occupancy(trace: &TelegraphTrace) -> Result<OccupancyEstimate, AnalysisError> {
    let fraction = trace.bright_time(0.0, trace.duration) / trace.duration;
    let n = trace.switches();
    if n == 0 {
        return Ok(OccupancyEstimate {
            bright_fraction: fraction,
            stderr: 0.0,
            blocks: 1,
        });
    }
    if n < MIN_SWITCHES {
        return Err(AnalysisError::InsufficientEvents {
            found: n,
            required: MIN_SWITCHES,
        });
    }
    let blocks = BOOTSTRAP_BLOCKS;
    let w = trace.duration / blocks as f64;
    let per_block: Vec<f64> = (0..blocks)
        .map(|b| trace.bright_time(b as f64 * w, (b + 1) as f64 * w) / w)
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let means: Vec<f64> = (0..BOOTSTRAP_RESAMPLES)
        .map(|_| (0..blocks).map(|_| per_block[rng.random_range(0..blocks)]).sum::<f64>() / blocks as f64)
        .collect();
    let m = means.iter().sum::<f64>() / means.len() as f64;
    let var = means.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (means.len() - 1) as f64;
    Ok(OccupancyEstimate {
        bright_fraction: fraction,
        stderr: var.sqrt(),
        blocks,
    })
}

/// Kolmogorov–Smirnov test of `samples` against Exponential(`rate`).
/// Returns the statistic D and the asymptotic p-value.
pub fn ks_exponential(samples: &[f64], rate: f64) -> (f64, f64) {
    let mut x = samples.to_vec();
    x.sort_by(f64::total_cmp);
    let n = x.len() as f64;
    let mut d: f64 = 0.0;
    for (i, v) in x.iter().enumerate() {
        let f = 1.0 - (-rate * v).exp();
        d = d.max((i as f64 + 1.0) / n - f).max(f - i as f64 / n);
    }
    let sn = n.sqrt();
    (d, kolmogorov_survival((sn + 0.12 + 0.11 / sn) * d))
}

/// P(K > x) for the Kolmogorov distribution.
pub fn kolmogorov_survival(x: f64) -> f64 {
    if x < 0.2 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let term = (-2.0 * (k * k) as f64 * x * x).exp();
        sum += if k % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// Scenario block for telegraph runs. Two traces are produced: one with the
/// remote windows removed and one with them applied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TelegraphConfig {
    pub model: TelegraphModel,
    /// s.
    pub duration: f64,
    /// s.
    #[serde(default = "default_bin")]
    pub bin_width: f64,
    #[serde(default = "default_count_bin")]
    pub count_bin: u64,
}

fn default_bin() -> f64 {
    0.1
}

fn default_count_bin() -> u64 {
    1
}
