//! Monte Carlo benchmarks for synchronization and polarization feedback.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::HarnessError;
use crate::feedback::{
    run_feedback_loop, CompensatorState, CountLink, FeedbackConfig, FeedbackController, FeedbackTrace,
};
use crate::link::{ChannelDrift, ChannelDriftModel, Compensation, LinkSimulator};
use crate::sync::{acquire, admissibility_check, Admissibility, OffsetHint};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyncBenchSettings {
    /// Channel losses to sweep, dB.
    #[serde(default = "default_losses")]
    pub losses_db: Vec<f64>,
    /// Also run at the loss where `sqrt(L eta) = 10` exactly.
    #[serde(default = "yes")]
    pub include_boundary: bool,
    /// Clock skew is drawn uniformly from `[0, max_skew_ppm]`.
    #[serde(default = "default_skew")]
    pub max_skew_ppm: f64,
    #[serde(default = "default_jitter")]
    pub jitter_sigma: f64,
    #[serde(default = "default_dark")]
    pub dark_count_rate_hz: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_losses() -> Vec<f64> {
    (0..=10).map(|k| 3.0 * k as f64).collect()
}
fn yes() -> bool {
    true
}
fn default_skew() -> f64 {
    20.0
}
fn default_jitter() -> f64 {
    30e-12
}
fn default_dark() -> f64 {
    25.0
}

impl Default for SyncBenchSettings {
    fn default() -> Self {
        Self {
            losses_db: default_losses(),
            include_boundary: true,
            max_skew_ppm: default_skew(),
            jitter_sigma: default_jitter(),
            dark_count_rate_hz: default_dark(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrialSpec {
    pub loss_db: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyncTrial {
    pub loss_db: f64,
    pub seed: u64,
    pub skew_ppm: f64,
    pub sqrt_l_eta: f64,
    /// Prescribed number of accumulated frames.
    pub frames_required: u64,
    pub locked: bool,
    pub frames_used: u32,
    /// Lock within the prescribed number of frames.
    pub success_at_k: bool,
    /// Every photon detection mapped to its true slot.
    pub offset_correct: bool,
    /// Coarse period error, seconds.
    pub period_error: f64,
    pub period_error_bound: f64,
    /// Fitted timing residual over the injected jitter.
    pub residual_ratio: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyncBenchRow {
    pub loss_db: f64,
    pub sqrt_l_eta: f64,
    pub frames_needed: u64,
    pub trials: u64,
    pub lock_rate: f64,
    pub success_at_k_rate: f64,
    /// Over locked trials.
    pub offset_correct_rate: f64,
    pub mean_frames_used: f64,
    pub period_error: f64,
    pub period_error_bound: f64,
    pub residual_ratio_min: f64,
    pub residual_ratio_max: f64,
}

/// Loss at which `sqrt(L eta) = 10`, by bisection on the channel loss.
fn boundary_loss_db(config: &RunConfig) -> Option<f64> {
    let l = config.sync.length() as f64;
    let att = config.link.fiber_attenuation_db_per_km;
    let eta_at = |db: f64| {
        let mut link = config.link.clone();
        link.fiber_length_km = db / att;
        link.sync_detection_probability()
    };
    let (mut lo, mut hi) = (0.0, 80.0);
    if l * eta_at(lo) < 100.0 || l * eta_at(hi) > 100.0 {
        return None;
    }
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if l * eta_at(mid) >= 100.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Some(lo)
}

/// Trial specifications, spread round-robin over the loss points.
pub fn sync_trials(config: &RunConfig, trials: u64) -> Vec<TrialSpec> {
    let s = &config.sync_bench;
    let mut losses = s.losses_db.clone();
    if s.include_boundary {
        losses.extend(boundary_loss_db(config));
    }
    losses.sort_by(f64::total_cmp);
    if losses.is_empty() {
        return Vec::new();
    }
    (0..trials)
        .map(|i| TrialSpec { loss_db: losses[(i % losses.len() as u64) as usize], seed: s.seed.wrapping_add(i) })
        .collect()
}

fn invalid(message: String) -> HarnessError {
    HarnessError::Config { path: "sync_bench".into(), message }
}

/// One synchronization attempt from scratch on a fresh static link.
pub fn run_sync_trial(config: &RunConfig, spec: TrialSpec) -> Result<SyncTrial, HarnessError> {
    let s = &config.sync_bench;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5b5b_0000_0000_0001);
    let mut link = config.link.clone();
    if link.fiber_attenuation_db_per_km <= 0.0 {
        return Err(invalid("link.fiber_attenuation_db_per_km must be positive to set a loss".into()));
    }
    link.fiber_length_km = spec.loss_db / link.fiber_attenuation_db_per_km;
    link.clock_skew_ppm = rng.random_range(0.0..=s.max_skew_ppm);
    link.timing_jitter_sigma = s.jitter_sigma;
    link.dark_count_rate_hz = s.dark_count_rate_hz;

    let code = &config.sync;
    let eta = link.sync_detection_probability();
    let sqrt_l_eta = (code.length() as f64 * eta).sqrt();
    let params = &config.sync_algorithm;
    let bound = 4.0 * link.repetition_period / params.period.samples as f64;
    let mut trial = SyncTrial {
        loss_db: spec.loss_db,
        seed: spec.seed,
        skew_ppm: link.clock_skew_ppm,
        sqrt_l_eta,
        frames_required: 0,
        locked: false,
        frames_used: 0,
        success_at_k: false,
        offset_correct: false,
        period_error: f64::INFINITY,
        period_error_bound: bound,
        residual_ratio: 0.0,
        error: None,
    };
    let k = match admissibility_check(code.length(), eta) {
        Admissibility::Ok => 1,
        Admissibility::Repeat(k) => k,
        Admissibility::Reject => {
            trial.error = Some("inadmissible link".into());
            return Ok(trial);
        }
    };
    trial.frames_required = k;

    let mut params = params.clone();
    params.offset.min_frames = k as u32;
    params.offset.max_frames = 4 * k as u32;
    // the first slot arrives within 1000 periods; one spare frame of margin
    let slots = (4 * k + 2) * code.frame_len() as u64 + 1000;
    let duration = slots as f64 * link.tau_b();
    let drift = ChannelDrift::new(&ChannelDriftModel::static_channel());
    let mut sim = LinkSimulator::new(&link, code, drift, spec.seed)?;
    let truth = *sim.ground_truth();
    let events = sim.run_block(duration, &Compensation::identity());

    match acquire(&events, link.repetition_period, link.timestamp_resolution, code, &params, OffsetHint::None) {
        Ok(sol) => {
            trial.locked = true;
            trial.frames_used = sol.frames_used;
            trial.success_at_k = u64::from(sol.frames_used) <= k;
            trial.offset_correct =
                events.iter().all(|e| e.true_slot.is_none_or(|slot| sol.slot_of(e.timestamp) == slot as i64));
            trial.period_error = (sol.tau_b_coarse - truth.tau_b).abs();
            trial.residual_ratio = sol.residual_sigma / s.jitter_sigma;
        }
        Err(e) => trial.error = Some(e.to_string()),
    }
    Ok(trial)
}

/// Runs `trials` in parallel and summarizes them per loss point.
pub fn sync_bench(config: &RunConfig, trials: u64) -> Result<(Vec<SyncBenchRow>, Vec<SyncTrial>), HarnessError> {
    config.validate("config")?;
    let specs = sync_trials(config, trials);
    let results: Vec<SyncTrial> =
        specs.par_iter().map(|&spec| run_sync_trial(config, spec)).collect::<Result<_, _>>()?;
    let mut losses: Vec<f64> = results.iter().map(|t| t.loss_db).collect();
    losses.dedup();
    losses.sort_by(f64::total_cmp);
    losses.dedup();
    let rows = losses
        .into_iter()
        .map(|loss| {
            let group: Vec<&SyncTrial> = results.iter().filter(|t| t.loss_db == loss).collect();
            let n = group.len() as f64;
            let locked: Vec<&&SyncTrial> = group.iter().filter(|t| t.locked).collect();
            let frac = |c: usize, d: f64| if d > 0.0 { c as f64 / d } else { 0.0 };
            let ratios = locked.iter().map(|t| t.residual_ratio);
            SyncBenchRow {
                loss_db: loss,
                sqrt_l_eta: group[0].sqrt_l_eta,
                frames_needed: group[0].frames_required,
                trials: group.len() as u64,
                lock_rate: frac(locked.len(), n),
                success_at_k_rate: frac(group.iter().filter(|t| t.success_at_k).count(), n),
                offset_correct_rate: frac(locked.iter().filter(|t| t.offset_correct).count(), locked.len() as f64),
                mean_frames_used: if locked.is_empty() {
                    0.0
                } else {
                    locked.iter().map(|t| f64::from(t.frames_used)).sum::<f64>() / locked.len() as f64
                },
                period_error: locked.iter().map(|t| t.period_error).fold(0.0, f64::max),
                period_error_bound: group[0].period_error_bound,
                residual_ratio_min: ratios.clone().fold(f64::INFINITY, f64::min).min(f64::MAX),
                residual_ratio_max: ratios.fold(0.0, f64::max),
            }
        })
        .collect();
    Ok((rows, results))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeedbackBenchSettings {
    /// Simulated seconds per paired run.
    #[serde(default = "default_fb_duration")]
    pub duration: f64,
    #[serde(default = "default_fb_block")]
    pub block_duration: f64,
    /// Independent drift realizations; run `i` offsets both seeds by `i`.
    #[serde(default = "default_fb_runs")]
    pub runs: u64,
}

fn default_fb_duration() -> f64 {
    8640.0
}
fn default_fb_block() -> f64 {
    1.0
}
fn default_fb_runs() -> u64 {
    1
}

impl Default for FeedbackBenchSettings {
    fn default() -> Self {
        Self { duration: default_fb_duration(), block_duration: default_fb_block(), runs: default_fb_runs() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackRunReport {
    pub seed: u64,
    pub drift_seed: u64,
    pub on_mean_qber_z: f64,
    pub on_mean_qber_x: f64,
    pub on_max_qber: f64,
    pub steps: u64,
    /// Slowest recovery; `None` when some step never recovered.
    pub on_max_recovery: Option<f64>,
    pub off_mean_qber_z: f64,
    pub off_mean_qber_x: f64,
    pub off_max_qber: f64,
    pub off_final_qber: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackBenchReport {
    pub runs: Vec<FeedbackRunReport>,
    pub worst_on_mean_qber: f64,
    pub worst_recovery: Option<f64>,
    pub min_off_max_qber: f64,
}

pub struct FeedbackBenchOutput {
    pub report: FeedbackBenchReport,
    /// `(feedback on, feedback off)` per run.
    pub traces: Vec<(FeedbackTrace, FeedbackTrace)>,
}

fn paired_run(config: &RunConfig, i: u64) -> Result<(FeedbackRunReport, FeedbackTrace, FeedbackTrace), HarnessError> {
    let s = &config.feedback_bench;
    let seed = config.run.seed.wrapping_add(i);
    let drift = ChannelDriftModel { seed: config.drift.seed.wrapping_add(i), ..config.drift.clone() };
    let steps = drift.step_times(s.duration);
    let trace = |enabled: bool| -> Result<FeedbackTrace, HarnessError> {
        let mut link = CountLink::new(&config.link, &config.sync, ChannelDrift::new(&drift), seed)?;
        let fb = FeedbackConfig { enabled, ..config.feedback.clone() };
        let state = CompensatorState { slew_limit: fb.slew_limit, ..CompensatorState::default() };
        let mut controller = FeedbackController::new(fb, state)?;
        Ok(run_feedback_loop(&mut link, &mut controller, s.block_duration, s.duration, &steps)?)
    };
    let on = trace(true)?;
    let off = trace(false)?;
    let (on_z, on_x) = on.mean_qber();
    let (off_z, off_x) = off.mean_qber();
    let max_recovery = on.max_recovery_time().unwrap_or(0.0);
    let report = FeedbackRunReport {
        seed,
        drift_seed: drift.seed,
        on_mean_qber_z: on_z,
        on_mean_qber_x: on_x,
        on_max_qber: on.max_qber(),
        steps: steps.len() as u64,
        on_max_recovery: max_recovery.is_finite().then_some(max_recovery),
        off_mean_qber_z: off_z,
        off_mean_qber_x: off_x,
        off_max_qber: off.max_qber(),
        off_final_qber: off
            .rows
            .last()
            .map(|r| r.qber_z.unwrap_or(0.0).max(r.qber_x.unwrap_or(0.0)))
            .unwrap_or(0.0),
    };
    Ok((report, on, off))
}

/// Paired feedback-on and feedback-off runs over identical drift, at the
/// count level.
pub fn feedback_bench(config: &RunConfig) -> Result<FeedbackBenchOutput, HarnessError> {
    config.validate("config")?;
    let s = &config.feedback_bench;
    if !(s.block_duration > 0.0 && s.duration >= s.block_duration) {
        return Err(HarnessError::Config {
            path: "feedback_bench".into(),
            message: format!("duration {} must be at least block_duration {}", s.duration, s.block_duration),
        });
    }
    let results: Vec<_> = (0..s.runs).into_par_iter().map(|i| paired_run(config, i)).collect::<Result<_, _>>()?;
    let mut runs = Vec::new();
    let mut traces = Vec::new();
    for (r, on, off) in results {
        runs.push(r);
        traces.push((on, off));
    }
    let worst_recovery = runs.iter().try_fold(0.0f64, |acc, r| r.on_max_recovery.map(|v| acc.max(v)));
    let report = FeedbackBenchReport {
        worst_on_mean_qber: runs.iter().map(|r| r.on_mean_qber_z.max(r.on_mean_qber_x)).fold(0.0, f64::max),
        worst_recovery,
        min_off_max_qber: runs.iter().map(|r| r.off_max_qber).fold(1.0, f64::min),
        runs,
    };
    Ok(FeedbackBenchOutput { report, traces })
}
