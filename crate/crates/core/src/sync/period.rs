//! Coarse period from the power spectrum of the click train.

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use super::SyncError;
use crate::link::DetectionEvent;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PeriodParams {
    /// FFT length `N_s`.
    #[serde(default = "default_samples")]
    pub samples: usize,
    /// Samples per nominal period (sampling rate `oversampling / tau_A`).
    #[serde(default = "default_oversampling")]
    pub oversampling: usize,
    /// Half-width of the frequency search around the nominal rate.
    #[serde(default = "default_search_ppm")]
    pub search_ppm: f64,
    /// Spectra of consecutive windows are averaged until this many events
    /// have been used.
    #[serde(default = "default_min_events")]
    pub min_events: usize,
    #[serde(default = "default_max_windows")]
    pub max_windows: usize,
    /// Required peak height above the spectral noise, in noise standard
    /// deviations.
    #[serde(default = "default_min_peak_z")]
    pub min_peak_z: f64,
}

fn default_samples() -> usize {
    1_000_000
}
fn default_oversampling() -> usize {
    4
}
fn default_search_ppm() -> f64 {
    200.0
}
fn default_min_events() -> usize {
    256
}
fn default_max_windows() -> usize {
    64
}
fn default_min_peak_z() -> f64 {
    10.0
}

impl Default for PeriodParams {
    fn default() -> Self {
        Self {
            samples: default_samples(),
            oversampling: default_oversampling(),
            search_ppm: default_search_ppm(),
            min_events: default_min_events(),
            max_windows: default_max_windows(),
            min_peak_z: default_min_peak_z(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeriodEstimate {
    /// Seconds.
    pub tau_b: f64,
    /// Interpolated peak position in FFT bins.
    pub peak_bin: f64,
    pub peak_z: f64,
    pub windows: usize,
    pub events_used: usize,
}

/// Fewest events for which a spectral decision is attempted at all.
const MIN_EVENTS_HARD: usize = 16;

pub fn recover_period_fft(
    events: &[DetectionEvent],
    tau_a_nominal: f64,
    resolution: f64,
    params: &PeriodParams,
) -> Result<PeriodEstimate, SyncError> {
    let n = params.samples;
    if n < 64 || params.oversampling < 2 {
        return Err(SyncError::NoLock("FFT length or oversampling too small".into()));
    }
    let Some(first) = events.first() else {
        return Err(SyncError::NoLock("no events".into()));
    };
    let dt = tau_a_nominal / resolution / params.oversampling as f64;
    let k0 = n as f64 / params.oversampling as f64;
    let search = (k0 * params.search_ppm * 1e-6).ceil() + 2.0;
    let band = ((n / 64).max(64) as f64).max(4.0 * search);
    let lo = (k0 - band).max(1.0) as usize;
    let hi = ((k0 + band) as usize).min(n / 2 - 1);
    let mut power = vec![0.0f64; hi - lo + 1];

    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(n);
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    let window_ticks = dt * n as f64;
    let mut used = 0usize;
    let mut windows = 0usize;
    let mut cursor = 0usize;
    while windows < params.max_windows && cursor < events.len() && used < params.min_events {
        buf.iter_mut().for_each(|c| *c = Complex64::new(0.0, 0.0));
        let w_start = windows as f64 * window_ticks;
        let w_end = w_start + window_ticks;
        while cursor < events.len() {
            let rel = (events[cursor].timestamp - first.timestamp) as f64;
            if rel >= w_end {
                break;
            }
            let idx = ((rel - w_start) / dt) as usize;
            buf[idx.min(n - 1)].re += 1.0;
            cursor += 1;
            used += 1;
        }
        fft.process(&mut buf);
        for (p, c) in power.iter_mut().zip(&buf[lo..=hi]) {
            *p += c.norm_sqr();
        }
        windows += 1;
    }
    if used < MIN_EVENTS_HARD {
        return Err(SyncError::NoLock(format!("only {used} events available for the spectral stage")));
    }

    let s_lo = ((k0 - search).floor() as usize).max(lo + 1);
    let s_hi = ((k0 + search).ceil() as usize).min(hi - 1);
    let (k_star, peak) = (s_lo..=s_hi)
        .map(|k| (k, power[k - lo]))
        .fold((s_lo, f64::MIN), |best, cur| if cur.1 > best.1 { cur } else { best });

    // noise statistics over the band, away from the peak
    let noise: Vec<f64> = (lo..=hi)
        .filter(|&k| (k as f64 - k_star as f64).abs() > 5.0)
        .map(|k| power[k - lo])
        .collect();
    let mean = noise.iter().sum::<f64>() / noise.len() as f64;
    let var = noise.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / noise.len() as f64;
    let sd = var.sqrt().max(f64::MIN_POSITIVE);
    let peak_z = (peak - mean) / sd;
    if peak_z < params.min_peak_z || peak < 4.0 * mean {
        return Err(SyncError::NoLock(format!(
            "no spectral peak near the nominal rate (z = {peak_z:.1}, {used} events)"
        )));
    }

    let mag = |k: usize| power[k - lo].sqrt();
    let (a, b, c) = (mag(k_star - 1), mag(k_star), mag(k_star + 1));
    let denom = a - 2.0 * b + c;
    let delta = if denom.abs() > 0.0 { (0.5 * (a - c) / denom).clamp(-0.5, 0.5) } else { 0.0 };
    let peak_bin = k_star as f64 + delta;
    let tau_b = dt * resolution * n as f64 / peak_bin;
    Ok(PeriodEstimate { tau_b, peak_bin, peak_z, windows, events_used: used })
}
