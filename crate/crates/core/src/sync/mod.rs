//! Clock recovery from detection timestamps.
//!
//! Three stages: a coarse period from the spectrum of the click train, a
//! robust least-trimmed-squares fit of period and phase, and the absolute slot
//! offset from correlating Z-basis clicks on code slots against the public
//! code.

pub mod code;
pub mod correlate;
pub mod lts;
pub mod offset;
pub mod period;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::link::DetectionEvent;

pub use code::{admissibility_check, Admissibility, CodeKind, SyncCodeConfig, SyncSettings};
pub use correlate::{circular_cross_correlation, Correlator};
pub use lts::{refine_period_lts, LtsFit, LtsParams};
pub use offset::{recover_offset, OffsetHint, OffsetParams};
pub use period::{recover_period_fft, PeriodEstimate, PeriodParams};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SyncError {
    #[error("invalid sync code: {0}")]
    InvalidCode(String),
    #[error("no lock: {0}")]
    NoLock(String),
    #[error("sync failed after {frames} frame(s): peak {peak} below {threshold:.1}")]
    SyncFailed { frames: u32, peak: i64, threshold: f64 },
    #[error("ambiguous lock: second peak {second} within 3 dB of {peak}")]
    AmbiguousLock { peak: i64, second: i64 },
    #[error("insufficient data: {0}")]
    Insufficient(String),
}

/// Recovered timing model. Bob's tick `t` belongs to Alice's slot
/// `offset_slots + round((t - anchor_ticks - anchor_phase_ticks) / tau_b_ticks)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyncSolution {
    /// Recovered slot period, seconds.
    pub tau_b: f64,
    /// Alice's index of the anchor slot (the slot of the first detection
    /// used as reference).
    pub offset_slots: i64,
    /// Estimated arrival time of Alice's slot 0 on Bob's clock, seconds.
    pub t0_estimate: f64,
    pub correlation_peak: f64,
    pub correlation_noise_sigma: f64,
    /// Timing residual standard deviation, seconds.
    pub residual_sigma: f64,
    /// Coarse period from the spectral stage, seconds.
    pub tau_b_coarse: f64,
    pub frames_used: u32,
    pub anchor_ticks: u64,
    pub anchor_phase_ticks: f64,
    pub tau_b_ticks: f64,
    pub resolution: f64,
}

impl SyncSolution {
    /// Alice's slot index for a timestamp.
    pub fn slot_of(&self, ticks: u64) -> i64 {
        let dt = ticks as i128 - self.anchor_ticks as i128;
        let rel = ((dt as f64 - self.anchor_phase_ticks) / self.tau_b_ticks).round() as i64;
        self.offset_slots + rel
    }

    /// Expected arrival tick (fractional) of Alice's slot `slot`.
    pub fn slot_ticks(&self, slot: i64) -> f64 {
        self.anchor_ticks as f64 + self.anchor_phase_ticks + (slot - self.offset_slots) as f64 * self.tau_b_ticks
    }

    /// Expected arrival of Alice's slot `slot`, seconds.
    pub fn slot_time(&self, slot: i64) -> f64 {
        self.slot_ticks(slot) * self.resolution
    }
}

/// All tunables of the three stages.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyncParams {
    #[serde(default)]
    pub period: PeriodParams,
    #[serde(default)]
    pub lts: LtsParams,
    #[serde(default)]
    pub offset: OffsetParams,
}


/// Runs all three stages on one block of time-sorted events.
pub fn acquire(
    events: &[DetectionEvent],
    tau_a_nominal: f64,
    resolution: f64,
    code: &SyncCodeConfig,
    params: &SyncParams,
    hint: OffsetHint,
) -> Result<SyncSolution, SyncError> {
    let coarse = recover_period_fft(events, tau_a_nominal, resolution, &params.period)?;
    let fit = refine_period_lts(events, coarse.tau_b, resolution, &params.lts)?;
    let mut solution = recover_offset(events, &fit, code, &params.offset, hint)?;
    solution.tau_b_coarse = coarse.tau_b;
    Ok(solution)
}
