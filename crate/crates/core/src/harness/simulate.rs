//! End-to-end runs: transmit, synchronize, compensate, sift and accumulate
//! block by block, then compute the key rate over the aggregate.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::output::{to_json_bytes, write_atomic, write_json};
use super::HarnessError;
use crate::feedback::{
    estimate_qber, CompensatorState, FeedbackController, FeedbackError, FeedbackTrace, Recovery, RecoveryTracker,
    TraceRow,
};
use crate::finite_key::{compute_key_rate, KeyRateReport, SiftedCounts};
use crate::link::{
    config_hash, sift, ChannelDrift, DetectionEvent, EventCategories, EventDump, LinkSimulator, PublicCounts,
    PulseSource,
};
use crate::sync::{acquire, admissibility_check, Admissibility, OffsetHint, SyncParams, SyncSolution};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyncStatus {
    /// First lock of the run.
    Acquired,
    /// Lock re-established on this block's events.
    Relocked,
    /// Re-lock failed; the previous solution was extrapolated.
    Held,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockSync {
    pub status: SyncStatus,
    pub offset_slots: i64,
    pub tau_b: f64,
    pub residual_sigma: f64,
    pub frames_used: u32,
    pub correlation_peak: f64,
    pub correlation_noise_sigma: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockRecord {
    pub index: u64,
    pub t_start: f64,
    pub t_end: f64,
    pub sync: BlockSync,
    pub counts: SiftedCounts,
    pub public: PublicCounts,
    pub categories: EventCategories,
    pub phases: [f64; 4],
    pub probing: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyncSummary {
    /// `sqrt(L eta)` for the configured link.
    pub sqrt_l_eta: f64,
    pub frames_required: u64,
    pub relocks: u64,
    pub holds: u64,
    pub final_solution: SyncSolution,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackSummary {
    pub enabled: bool,
    pub mean_qber_z: f64,
    pub mean_qber_x: f64,
    pub recoveries: Vec<Recovery>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub config_sha256: String,
    pub simulated_time: f64,
    pub blocks: Vec<BlockRecord>,
    pub aggregate: SiftedCounts,
    pub categories: EventCategories,
    /// Error rate over all basis-matched key bits.
    pub total_qber: f64,
    pub key_rate: KeyRateReport,
    pub sync: SyncSummary,
    pub feedback: FeedbackSummary,
}

/// Wall-clock timing, kept out of the summary so that summaries are
/// reproducible byte for byte.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub wall_seconds: f64,
    pub blocks: u64,
    pub events: u64,
}

pub struct SimulationOutput {
    pub summary: RunSummary,
    pub trace: FeedbackTrace,
    pub timing: Timing,
    pub events: Option<Vec<DetectionEvent>>,
}

/// Per-block re-lock with the previous solution as the frame hint.
struct SyncTracker<'a> {
    config: &'a RunConfig,
    params: SyncParams,
    solution: Option<SyncSolution>,
    relocks: u64,
    holds: u64,
}

impl<'a> SyncTracker<'a> {
    fn new(config: &'a RunConfig) -> Result<(Self, f64, u64), HarnessError> {
        let eta = config.link.sync_detection_probability();
        let frames = match admissibility_check(config.sync.length(), eta) {
            Admissibility::Ok => 1,
            Admissibility::Repeat(k) => k,
            Admissibility::Reject => {
                return Err(HarnessError::Config {
                    path: "sync".into(),
                    message: format!("no usable sync detections (eta = {eta:e})"),
                })
            }
        };
        let mut params = config.sync_algorithm.clone();
        params.offset.min_frames = params.offset.min_frames.max(frames as u32);
        let tracker = Self { config, params, solution: None, relocks: 0, holds: 0 };
        Ok((tracker, (config.sync.length() as f64 * eta).sqrt(), frames))
    }

    fn update(&mut self, block: u64, events: &[DetectionEvent]) -> Result<BlockSync, HarnessError> {
        let link = &self.config.link;
        let hint = self.solution.clone().map_or(OffsetHint::None, |s| OffsetHint::Previous(Box::new(s)));
        let result =
            acquire(events, link.repetition_period, link.timestamp_resolution, &self.config.sync, &self.params, hint);
        let (status, error) = match result {
            Ok(sol) => {
                let status = if self.solution.is_some() {
                    self.relocks += 1;
                    SyncStatus::Relocked
                } else {
                    SyncStatus::Acquired
                };
                self.solution = Some(sol);
                (status, None)
            }
            Err(e) if self.solution.is_some() => {
                self.holds += 1;
                (SyncStatus::Held, Some(e.to_string()))
            }
            Err(source) => return Err(HarnessError::Sync { block, source }),
        };
        let s = self.solution.as_ref().expect("locked");
        Ok(BlockSync {
            status,
            offset_slots: s.offset_slots,
            tau_b: s.tau_b,
            residual_sigma: s.residual_sigma,
            frames_used: s.frames_used,
            correlation_peak: s.correlation_peak,
            correlation_noise_sigma: s.correlation_noise_sigma,
            error,
        })
    }
}

fn total_qber(c: &SiftedCounts) -> f64 {
    let n = c.n_z() + c.n_x();
    if n == 0 {
        0.0
    } else {
        (c.m_z() + c.m_x()) as f64 / n as f64
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn block_count(config: &RunConfig) -> u64 {
    ((config.run.total_duration / config.run.block_duration).round() as u64).max(1)
}

pub fn run_simulation(config: &RunConfig) -> Result<SimulationOutput, HarnessError> {
    let started = Instant::now();
    config.validate("config")?;
    let run = &config.run;
    let bd = run.block_duration;
    let (mut tracker, sqrt_l_eta, frames_required) = SyncTracker::new(config)?;
    let needed = (frames_required + 1) as f64 * config.sync.frame_len() as f64 * config.link.tau_b();
    if needed > bd {
        return Err(HarnessError::Config {
            path: "run.block_duration".into(),
            message: format!("{bd} s is shorter than the {needed:.3} s needed to accumulate {frames_required} sync frame(s)"),
        });
    }

    let mut sim = LinkSimulator::new(&config.link, &config.sync, ChannelDrift::new(&config.drift), run.seed)?;
    let source: PulseSource = sim.source().clone();
    let state = CompensatorState { slew_limit: config.feedback.slew_limit, ..CompensatorState::default() };
    let mut controller = FeedbackController::new(config.feedback.clone(), state)?;
    let min_samples = config.feedback.min_samples_per_estimate;
    let mut recovery = RecoveryTracker::new(config.drift.step_times(run.total_duration));

    let mut blocks = Vec::new();
    let mut trace = FeedbackTrace::default();
    let mut aggregate = SiftedCounts::default();
    let mut categories = EventCategories::default();
    let mut dump = run.dump_events.as_ref().map(|_| Vec::new());
    let mut probing = false;
    let mut event_total = 0u64;

    for b in 0..block_count(config) {
        let t_start = b as f64 * bd;
        let t_end = (b + 1) as f64 * bd;
        let mut events = Vec::new();
        let mut step = None;
        match tracker.solution.as_ref().filter(|_| probing && config.feedback.enabled) {
            Some(solution) => {
                let window = bd / 9.0;
                let mut k = 0;
                let outcome = controller.step(|state| {
                    k += 1;
                    let t = if k >= 9 { t_end } else { t_start + k as f64 * window };
                    let ev = sim.run_block(t, &state.compensation());
                    let out = sift(&source, &ev, solution, window);
                    events.extend(ev);
                    estimate_qber(&PublicCounts::from_detections(&out.public), min_samples)
                });
                match outcome {
                    Ok(report) => step = Some(report),
                    Err(FeedbackError::EstimateUnavailable { .. }) => {}
                    Err(e) => return Err(e.into()),
                }
                if k < 9 {
                    events.extend(sim.run_block(t_end, &controller.state.compensation()));
                }
            }
            None => events = sim.run_block(t_end, &controller.state.compensation()),
        }

        let sync = tracker.update(b, &events)?;
        let solution = tracker.solution.as_ref().expect("locked after update");
        let out = sift(&source, &events, solution, bd);
        let public = PublicCounts::from_detections(&out.public);
        let stepped = step.as_ref().is_some_and(|r| r.gradient.is_some());
        let below = match &step {
            Some(report) => Some(report.base.below(config.feedback.qber_threshold)),
            None => estimate_qber(&public, min_samples).ok().map(|e| controller.monitor(&e)),
        };
        probing = below == Some(false);
        recovery.observe(t_end, below);
        aggregate.accumulate(&out.counts);
        categories.accumulate(&out.categories);
        event_total += events.len() as u64;
        trace.rows.push(TraceRow {
            time_s: t_end,
            qber_z: public.qber_z(),
            qber_x: public.qber_x(),
            phases: controller.state.phases,
            probing: stepped,
        });
        blocks.push(BlockRecord {
            index: b,
            t_start,
            t_end,
            sync,
            counts: out.counts,
            public,
            categories: out.categories,
            phases: controller.state.phases,
            probing: stepped,
        });
        if let Some(d) = dump.as_mut() {
            d.extend_from_slice(&events);
        }
        if run.target_n_z.is_some_and(|target| aggregate.n_z() >= target) {
            break;
        }
    }

    let simulated_time = blocks.len() as f64 * bd;
    aggregate.t = simulated_time;
    let key_rate = compute_key_rate(&aggregate, &config.link.intensities, &config.security)?;
    trace.recoveries = recovery.finish();
    let (mean_z, mean_x) = trace.mean_qber();
    let summary = RunSummary {
        seed: run.seed,
        config_sha256: hex(&config_hash(&config.link)),
        simulated_time,
        total_qber: total_qber(&aggregate),
        aggregate,
        categories,
        key_rate,
        sync: SyncSummary {
            sqrt_l_eta,
            frames_required,
            relocks: tracker.relocks,
            holds: tracker.holds,
            final_solution: tracker.solution.clone().expect("locked"),
        },
        feedback: FeedbackSummary {
            enabled: config.feedback.enabled,
            mean_qber_z: mean_z,
            mean_qber_x: mean_x,
            recoveries: trace.recoveries.clone(),
        },
        blocks,
    };
    let timing =
        Timing { wall_seconds: started.elapsed().as_secs_f64(), blocks: summary.blocks.len() as u64, events: event_total };
    Ok(SimulationOutput { summary, trace, timing, events: dump })
}

/// Result of re-running synchronization, sifting and key-rate estimation on
/// recorded detections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayReport {
    pub blocks: u64,
    pub aggregate: SiftedCounts,
    pub key_rate: KeyRateReport,
}

/// Splits `events` into the configured blocks and processes them as a
/// simulation run would, without feedback.
pub fn replay(config: &RunConfig, events: &[DetectionEvent]) -> Result<ReplayReport, HarnessError> {
    let (mut tracker, _, _) = SyncTracker::new(config)?;
    // Alice's records are public after the run; regenerate them from the seed
    let sim = LinkSimulator::new(&config.link, &config.sync, ChannelDrift::new(&config.drift), config.run.seed)?;
    let source = sim.source().clone();
    let res = config.link.timestamp_resolution;
    let bd = config.run.block_duration;
    let mut aggregate = SiftedCounts::default();
    let mut start = 0usize;
    let mut blocks = 0u64;
    for b in 0..block_count(config) {
        if start >= events.len() {
            break;
        }
        let end_ticks = ((b + 1) as f64 * bd / res).round() as u64;
        let end = start + events[start..].partition_point(|e| e.timestamp < end_ticks);
        let block = &events[start..end];
        tracker.update(b, block)?;
        let out = sift(&source, block, tracker.solution.as_ref().expect("locked"), bd);
        aggregate.accumulate(&out.counts);
        start = end;
        blocks += 1;
    }
    aggregate.t = blocks as f64 * bd;
    let key_rate = compute_key_rate(&aggregate, &config.link.intensities, &config.security)?;
    Ok(ReplayReport { blocks, aggregate, key_rate })
}

/// Loads, runs and writes `summary.json`, `qber_trace.csv`, `keyrate.json`
/// and `timing.json` into the output directory.
pub fn cmd_simulate(config_path: &Path, seed: Option<u64>, out: Option<PathBuf>) -> Result<RunSummary, HarnessError> {
    let mut config = RunConfig::load(config_path)?;
    if let Some(s) = seed {
        config.run.seed = s;
    }
    if let Some(o) = out {
        config.run.output_dir = o;
    }
    let output = run_simulation(&config)?;
    let dir = &config.run.output_dir;
    write_atomic(&dir.join("summary.json"), &to_json_bytes(&output.summary))?;
    let mut csv = Vec::new();
    output.trace.write_csv(&mut csv).map_err(|e| HarnessError::io(&dir.join("qber_trace.csv"), e))?;
    write_atomic(&dir.join("qber_trace.csv"), &csv)?;
    write_json(&dir.join("keyrate.json"), &output.summary.key_rate)?;
    write_json(&dir.join("timing.json"), &output.timing)?;
    if let (Some(path), Some(events)) = (&config.run.dump_events, output.events) {
        let dump = EventDump::new(&config.link, events);
        let mut bytes = Vec::new();
        if matches!(path.extension().and_then(|e| e.to_str()), Some("txt" | "tsv")) {
            dump.write_text(&mut bytes)?;
        } else {
            dump.write_binary(&mut bytes)?;
        }
        write_atomic(path, &bytes)?;
    }
    Ok(output.summary)
}
