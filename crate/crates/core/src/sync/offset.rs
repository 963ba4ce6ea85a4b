//! Absolute slot offset from the interleaved correlation code.

use serde::{Deserialize, Serialize};

use super::{Correlator, LtsFit, SyncCodeConfig, SyncError, SyncSolution};
use crate::link::{DetectionEvent, DetectorId};
use crate::optics::Basis;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OffsetParams {
    /// Lock requires the peak to exceed this many noise standard deviations.
    #[serde(default = "default_significance")]
    pub significance: f64,
    /// Frames summed before the first test.
    #[serde(default = "default_min_frames")]
    pub min_frames: u32,
    #[serde(default = "default_max_frames")]
    pub max_frames: u32,
    /// A second peak at or above this fraction of the highest one is
    /// ambiguous.
    #[serde(default = "default_ambiguity")]
    pub ambiguity_ratio: f64,
    /// The anchor is the first inlier followed by another within this many
    /// median inlier gaps.
    #[serde(default = "default_onset_gaps")]
    pub onset_gaps: f64,
}

fn default_significance() -> f64 {
    6.0
}
fn default_min_frames() -> u32 {
    1
}
fn default_max_frames() -> u32 {
    256
}
fn default_ambiguity() -> f64 {
    std::f64::consts::FRAC_1_SQRT_2
}
fn default_onset_gaps() -> f64 {
    20.0
}

impl Default for OffsetParams {
    fn default() -> Self {
        Self {
            significance: default_significance(),
            min_frames: default_min_frames(),
            max_frames: default_max_frames(),
            ambiguity_ratio: default_ambiguity(),
            onset_gaps: default_onset_gaps(),
        }
    }
}

/// The correlation fixes the offset only modulo the frame length. The hint
/// picks the representative.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum OffsetHint {
    /// Representative in `[0, N_f)`.
    #[default]
    None,
    /// Representative nearest to the slot predicted by an earlier solution.
    Previous(Box<SyncSolution>),
}

struct Peak {
    value: i64,
    row: usize,
    lag: usize,
    second: i64,
    sigma: f64,
}

fn median_abs_dev(values: &mut [i64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mid = values.len() / 2;
    let (_, &mut med, _) = values.select_nth_unstable(mid);
    let mut dev: Vec<i64> = values.iter().map(|v| (v - med).abs()).collect();
    let (_, &mut mad, _) = dev.select_nth_unstable(mid);
    mad as f64
}

fn scan(acc: &[i32], correlator: &Correlator, block: usize) -> Peak {
    let l = correlator.len();
    let mut best = Peak { value: i64::MIN, row: 0, lag: 0, second: i64::MIN, sigma: 0.0 };
    let mut all = Vec::with_capacity(block * l);
    let mut energy = 0.0;
    let mut row = vec![0i32; l];
    for i in 0..block {
        for (j, r) in row.iter_mut().enumerate() {
            *r = acc[j * block + i];
        }
        energy += row.iter().map(|&v| (v as f64).powi(2)).sum::<f64>();
        let corr = correlator.correlate(&row);
        for (lag, &c) in corr.iter().enumerate() {
            // strict comparison keeps the lowest row, then the lowest lag
            if c > best.value {
                best.second = best.second.max(best.value);
                best.value = c;
                best.row = i;
                best.lag = lag;
            } else {
                best.second = best.second.max(c);
            }
        }
        all.extend_from_slice(&corr);
    }
    let peak_index = best.row * l + best.lag;
    all.swap_remove(peak_index);
    let robust = 1.4826 * median_abs_dev(&mut all);
    best.sigma = robust.max((energy / block as f64).sqrt()).max(1.0);
    best
}

/// Value of a slot in the detection string.
fn slot_value(detectors: &[DetectorId]) -> i32 {
    match detectors {
        [DetectorId::Z0] => 1,
        [DetectorId::Z1] => -1,
        _ => 0,
    }
}

pub fn recover_offset(
    events: &[DetectionEvent],
    fit: &LtsFit,
    code: &SyncCodeConfig,
    params: &OffsetParams,
    hint: OffsetHint,
) -> Result<SyncSolution, SyncError> {
    let block = code.block_len();
    let n_f = code.frame_len() as i64;
    let inliers: Vec<(i64, DetectorId)> = events
        .iter()
        .zip(fit.slots.iter().zip(&fit.inlier))
        .filter(|(_, (_, &k))| k)
        .map(|(e, (&s, _))| (s, e.detector))
        .collect();
    if inliers.len() < 2 {
        return Err(SyncError::Insufficient("fewer than two timing inliers".into()));
    }

    let mut gaps: Vec<i64> = inliers.windows(2).map(|w| w[1].0 - w[0].0).filter(|&g| g > 0).collect();
    let median_gap = if gaps.is_empty() {
        1
    } else {
        let mid = gaps.len() / 2;
        *gaps.select_nth_unstable(mid).1
    };
    let max_gap = (params.onset_gaps * median_gap as f64).max(1.0);
    let anchor_idx = inliers
        .windows(2)
        .position(|w| ((w[1].0 - w[0].0) as f64) <= max_gap)
        .unwrap_or(0);
    let anchor_slot = inliers[anchor_idx].0;
    let used = &inliers[anchor_idx..];
    let last_rel = used.last().map(|e| e.0 - anchor_slot).unwrap_or(0);
    let available = (last_rel / n_f + 1) as u32;
    if available < params.min_frames.max(1) {
        return Err(SyncError::Insufficient(format!(
            "events span {available} frame(s), {} required",
            params.min_frames
        )));
    }

    let correlator = Correlator::new(code.code());
    let mut acc = vec![0i32; n_f as usize];
    let mut cursor = 0usize;
    let mut last: Option<Peak> = None;
    let mut frames = 0u32;
    let frame_limit = params.max_frames.max(1).min(available);
    while frames < frame_limit {
        let frame_end = (frames as i64 + 1) * n_f;
        while cursor < used.len() && used[cursor].0 - anchor_slot < frame_end {
            let slot = used[cursor].0;
            let mut group = Vec::with_capacity(2);
            while cursor < used.len() && used[cursor].0 == slot {
                group.push(used[cursor].1);
                cursor += 1;
            }
            group.dedup();
            let d = (slot - anchor_slot).rem_euclid(n_f) as usize;
            if group.iter().all(|det| det.basis() == Basis::Z) {
                acc[d] += slot_value(&group);
            }
        }
        frames += 1;
        if frames < params.min_frames {
            continue;
        }
        let peak = scan(&acc, &correlator, block);
        let significant = peak.value as f64 >= params.significance * peak.sigma;
        let unique = (peak.second as f64) < params.ambiguity_ratio * peak.value as f64;
        if significant && unique {
            return Ok(solution(fit, code, anchor_slot, &peak, frames, hint));
        }
        last = Some(peak);
    }
    let peak = last.expect("at least one frame scanned");
    if peak.value as f64 >= params.significance * peak.sigma {
        Err(SyncError::AmbiguousLock { peak: peak.value, second: peak.second })
    } else {
        Err(SyncError::SyncFailed { frames, peak: peak.value, threshold: params.significance * peak.sigma })
    }
}

fn solution(
    fit: &LtsFit,
    code: &SyncCodeConfig,
    anchor_rel: i64,
    peak: &Peak,
    frames: u32,
    hint: OffsetHint,
) -> SyncSolution {
    let block = code.block_len() as i64;
    let n_f = code.frame_len() as i64;
    let residue = (peak.lag as i64 * block - peak.row as i64).rem_euclid(n_f);
    let anchor_phase_ticks = fit.phase_ticks + anchor_rel as f64 * fit.tau_ticks;
    let mut out = SyncSolution {
        tau_b: fit.tau_b(),
        offset_slots: residue,
        t0_estimate: 0.0,
        correlation_peak: peak.value as f64,
        correlation_noise_sigma: peak.sigma,
        residual_sigma: fit.residual_sigma(),
        tau_b_coarse: 0.0,
        frames_used: frames,
        anchor_ticks: fit.reference_ticks,
        anchor_phase_ticks,
        tau_b_ticks: fit.tau_ticks,
        resolution: fit.resolution,
    };
    if let OffsetHint::Previous(prev) = hint {
        let expected = prev.slot_of(fit.reference_ticks + anchor_phase_ticks.max(0.0).round() as u64);
        let k = ((expected - residue) as f64 / n_f as f64).round() as i64;
        out.offset_slots = residue + k * n_f;
    }
    out.t0_estimate = out.slot_time(0);
    out
}
