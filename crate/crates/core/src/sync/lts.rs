//! Robust period and phase fit by least trimmed squares.
//!
//! Each timestamp is assigned its nearest slot under the current model
//! `t = a + n tau`; the model is refit on the best-fitting fraction of
//! events until the kept set stops changing. The fit starts on a short span,
//! where the coarse period cannot yet slip a slot, and the span grows
//! geometrically until it covers the block.

use serde::{Deserialize, Serialize};

use super::SyncError;
use crate::link::DetectionEvent;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LtsParams {
    /// First fit span in slots.
    #[serde(default = "default_initial_span")]
    pub initial_span_slots: u64,
    /// The first span is widened until it holds at least this many events.
    #[serde(default = "default_min_initial_events")]
    pub min_initial_events: usize,
    #[serde(default = "default_growth")]
    pub span_growth: f64,
    /// Fraction of residuals kept in each trimmed fit.
    #[serde(default = "default_trim")]
    pub trim_fraction: f64,
    #[serde(default = "default_max_iterations")]
    pub max_iterations: usize,
    /// Final inlier cut in robust standard deviations.
    #[serde(default = "default_reweight")]
    pub reweight_sigmas: f64,
    /// Allowed ratio between the interval-error and residual estimates of
    /// the timing noise.
    #[serde(default = "default_consistency")]
    pub consistency_ratio: f64,
}

fn default_initial_span() -> u64 {
    1_000_000 / 32
}
fn default_min_initial_events() -> usize {
    16
}
fn default_growth() -> f64 {
    4.0
}
fn default_trim() -> f64 {
    0.9
}
fn default_max_iterations() -> usize {
    50
}
fn default_reweight() -> f64 {
    3.5
}
fn default_consistency() -> f64 {
    2.0
}

impl Default for LtsParams {
    fn default() -> Self {
        Self {
            initial_span_slots: default_initial_span(),
            min_initial_events: default_min_initial_events(),
            span_growth: default_growth(),
            trim_fraction: default_trim(),
            max_iterations: default_max_iterations(),
            reweight_sigmas: default_reweight(),
            consistency_ratio: default_consistency(),
        }
    }
}

/// Timing model relative to the first event of the block.
#[derive(Debug, Clone, PartialEq)]
pub struct LtsFit {
    /// Timestamp of the first event; all other quantities are relative to it.
    pub reference_ticks: u64,
    /// Arrival offset of relative slot 0, ticks.
    pub phase_ticks: f64,
    pub tau_ticks: f64,
    /// Relative slot of each event.
    pub slots: Vec<i64>,
    pub inlier: Vec<bool>,
    /// Timing noise from consecutive interval errors, ticks.
    pub residual_sigma_ticks: f64,
    pub rms_ticks: f64,
    pub iterations: usize,
    pub resolution: f64,
}

impl LtsFit {
    pub fn tau_b(&self) -> f64 {
        self.tau_ticks * self.resolution
    }

    pub fn residual_sigma(&self) -> f64 {
        self.residual_sigma_ticks * self.resolution
    }

    pub fn slot_of(&self, ticks: u64) -> i64 {
        let x = (ticks as i128 - self.reference_ticks as i128) as f64;
        ((x - self.phase_ticks) / self.tau_ticks).round() as i64
    }
}

#[derive(Clone, Copy)]
struct Line {
    a: f64,
    tau: f64,
}

impl Line {
    fn slot(&self, x: f64) -> f64 {
        ((x - self.a) / self.tau).round()
    }

    fn residual(&self, x: f64) -> f64 {
        x - self.a - self.slot(x) * self.tau
    }
}

/// Least-squares line through `(n, x)` pairs, centered for precision.
fn fit_line(points: impl Iterator<Item = (f64, f64)> + Clone, fallback_tau: f64) -> Option<Line> {
    let (mut count, mut sn, mut sx) = (0.0, 0.0, 0.0);
    for (n, x) in points.clone() {
        count += 1.0;
        sn += n;
        sx += x;
    }
    if count == 0.0 {
        return None;
    }
    let (mn, mx) = (sn / count, sx / count);
    let (mut snn, mut snx) = (0.0, 0.0);
    for (n, x) in points {
        snn += (n - mn) * (n - mn);
        snx += (n - mn) * (x - mx);
    }
    let tau = if snn > 0.0 { snx / snn } else { fallback_tau };
    Some(Line { a: mx - tau * mn, tau })
}

fn circular_phase(xs: &[f64], tau: f64) -> f64 {
    let (mut s, mut c) = (0.0, 0.0);
    for &x in xs {
        let th = std::f64::consts::TAU * (x / tau).fract();
        s += th.sin();
        c += th.cos();
    }
    s.atan2(c) / std::f64::consts::TAU * tau
}

/// Trimmed refits on `xs` until the kept set is stable.
fn c_steps(xs: &[f64], mut line: Line, params: &LtsParams) -> Result<(Line, usize), SyncError> {
    let m = xs.len();
    let h = ((params.trim_fraction * m as f64).ceil() as usize).clamp(2.min(m), m);
    let mut abs_r: Vec<f64> = Vec::with_capacity(m);
    let mut prev_keep: Option<Vec<bool>> = None;
    let mut prev_objective = f64::INFINITY;
    for iter in 1..=params.max_iterations {
        abs_r.clear();
        abs_r.extend(xs.iter().map(|&x| line.residual(x).abs()));
        let mut scratch = abs_r.clone();
        let (_, &mut cut, _) = scratch.select_nth_unstable_by(h - 1, f64::total_cmp);
        let keep: Vec<bool> = abs_r.iter().map(|&r| r <= cut).collect();
        let objective: f64 = abs_r.iter().zip(&keep).filter(|(_, &k)| k).map(|(r, _)| r * r).sum();
        // a stable kept set, or no meaningful decrease of the trimmed sum
        if prev_keep.as_ref() == Some(&keep) || objective >= prev_objective * (1.0 - 1e-9) - 1e-9 {
            return Ok((line, iter));
        }
        prev_objective = objective;
        let current = line;
        let pts = xs.iter().zip(&keep).filter(|(_, &k)| k).map(move |(&x, _)| (current.slot(x), x));
        line = fit_line(pts, line.tau).unwrap_or(line);
        prev_keep = Some(keep);
    }
    Err(SyncError::NoLock(format!("trimmed fit did not converge in {} iterations", params.max_iterations)))
}

pub fn refine_period_lts(
    events: &[DetectionEvent],
    tau_b0: f64,
    resolution: f64,
    params: &LtsParams,
) -> Result<LtsFit, SyncError> {
    if events.len() < 3 {
        return Err(SyncError::NoLock(format!("{} events are too few for a timing fit", events.len())));
    }
    let reference = events[0].timestamp;
    let xs: Vec<f64> = events.iter().map(|e| (e.timestamp - reference) as f64).collect();
    let tau0 = tau_b0 / resolution;

    let mut span = params.initial_span_slots.max(1) as f64;
    let mut end = xs.partition_point(|&x| x < span * tau0).max(params.min_initial_events.min(xs.len()));
    let mut line = Line { a: circular_phase(&xs[..end], tau0), tau: tau0 };
    let mut iterations = 0;
    loop {
        let (fitted, it) = c_steps(&xs[..end], line, params)?;
        line = fitted;
        iterations += it;
        if end == xs.len() {
            break;
        }
        span *= params.span_growth.max(1.5);
        end = xs.partition_point(|&x| x < line.a + span * line.tau).max(end + 1).min(xs.len());
    }

    // final inlier selection at a robust multiple of the timing noise
    let residuals: Vec<f64> = xs.iter().map(|&x| line.residual(x)).collect();
    let mut abs: Vec<f64> = residuals.iter().map(|r| r.abs()).collect();
    let mid = abs.len() / 2;
    let (_, &mut median, _) = abs.select_nth_unstable_by(mid, f64::total_cmp);
    let robust_sigma = 1.4826 * median;
    let cut = (params.reweight_sigmas * robust_sigma).max(1.0);
    let inlier: Vec<bool> = residuals.iter().map(|r| r.abs() <= cut).collect();
    let current = line;
    let pts = xs.iter().zip(&inlier).filter(|(_, &k)| k).map(move |(&x, _)| (current.slot(x), x));
    line = fit_line(pts, line.tau).unwrap_or(line);

    let slots: Vec<i64> = xs.iter().map(|&x| line.slot(x) as i64).collect();
    let kept: Vec<f64> = xs.iter().zip(&inlier).filter(|(_, &k)| k).map(|(&x, _)| line.residual(x)).collect();
    if kept.len() < 2 {
        return Err(SyncError::NoLock("fewer than two inliers".into()));
    }
    let rms = (kept.iter().map(|r| r * r).sum::<f64>() / kept.len() as f64).sqrt();
    // time-interval error between consecutive inliers
    let tie = kept.windows(2).map(|w| (w[1] - w[0]).powi(2)).sum::<f64>() / (kept.len() - 1) as f64;
    let sigma_tie = (tie / 2.0).sqrt();
    if rms > 1.0 {
        let ratio = sigma_tie / rms;
        if !(1.0 / params.consistency_ratio..=params.consistency_ratio).contains(&ratio) {
            return Err(SyncError::NoLock(format!(
                "interval error {sigma_tie:.2} inconsistent with residual spread {rms:.2} ticks"
            )));
        }
    }
    Ok(LtsFit {
        reference_ticks: reference,
        phase_ticks: line.a,
        tau_ticks: line.tau,
        slots,
        inlier,
        residual_sigma_ticks: sigma_tie,
        rms_ticks: rms,
        iterations,
        resolution,
    })
}
