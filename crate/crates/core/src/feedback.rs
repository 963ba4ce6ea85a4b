//! Closed-loop polarization compensation.
//!
//! Error rates measured on public slots drive four phase parameters of Bob's
//! compensation by finite-difference gradient descent. Two parameters steer
//! the Z-basis analyzer and two steer the X-basis analyzer.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::finite_key::SiftedCounts;
use crate::link::physics::expected_qber;
use crate::link::{sift, ChannelDrift, Compensation, LinkConfig, LinkSimulator, PublicCounts, PulseSource};
use crate::optics::PolarizationUnitary;
use crate::sync::{acquire, OffsetHint, SyncCodeConfig, SyncError, SyncParams, SyncSolution};

use std::f64::consts::TAU;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FeedbackError {
    #[error("invalid feedback config: {0}")]
    InvalidConfig(String),
    #[error("estimate unavailable: {n_z} Z and {n_x} X samples, {required} required per basis")]
    EstimateUnavailable { n_z: u64, n_x: u64, required: u64 },
    #[error("feedback stalled after {halvings} learning-rate halvings at cost {cost:.4}")]
    Stalled { halvings: u32, cost: f64 },
    #[error("sync: {0}")]
    Sync(#[from] SyncError),
    #[error("link: {0}")]
    Link(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeedbackConfig {
    #[serde(default = "yes")]
    pub enabled: bool,
    #[serde(default = "default_threshold")]
    pub qber_threshold: f64,
    /// Finite-difference half-step, radians.
    #[serde(default = "default_probe_step")]
    pub probe_step: f64,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "default_min_samples")]
    pub min_samples_per_estimate: u64,
    /// Cap on descent steps in [`converge`].
    #[serde(default = "default_max_iterations")]
    pub max_iterations: u32,
    /// Largest change of any parameter in one update, radians.
    #[serde(default = "default_slew")]
    pub slew_limit: f64,
}

fn yes() -> bool {
    true
}
fn default_threshold() -> f64 {
    0.01
}
fn default_probe_step() -> f64 {
    0.05
}
fn default_learning_rate() -> f64 {
    0.8
}
fn default_min_samples() -> u64 {
    200
}
fn default_max_iterations() -> u32 {
    200
}
fn default_slew() -> f64 {
    0.3
}

impl Default for FeedbackConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            qber_threshold: default_threshold(),
            probe_step: default_probe_step(),
            learning_rate: default_learning_rate(),
            min_samples_per_estimate: default_min_samples(),
            max_iterations: default_max_iterations(),
            slew_limit: default_slew(),
        }
    }
}

impl FeedbackConfig {
    pub fn validate(&self) -> Result<(), FeedbackError> {
        let mut problems = Vec::new();
        if !(self.qber_threshold > 0.0 && self.qber_threshold < 0.5) {
            problems.push(format!("qber_threshold must be in (0, 0.5), got {}", self.qber_threshold));
        }
        for (name, v) in [
            ("probe_step", self.probe_step),
            ("learning_rate", self.learning_rate),
            ("slew_limit", self.slew_limit),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                problems.push(format!("{name} must be positive, got {v}"));
            }
        }
        if self.min_samples_per_estimate == 0 {
            problems.push("min_samples_per_estimate must be positive".into());
        }
        if self.max_iterations == 0 {
            problems.push("max_iterations must be positive".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(FeedbackError::InvalidConfig(problems.join("; ")))
        }
    }
}

/// Phase-shifter settings of the compensation stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompensatorState {
    pub phases: [f64; 4],
    /// Per-parameter `[min, max]`. A span of exactly 2 pi wraps instead of
    /// clamping.
    pub bounds: [[f64; 2]; 4],
    pub slew_limit: f64,
}

impl Default for CompensatorState {
    fn default() -> Self {
        Self { phases: [0.0; 4], bounds: [[0.0, TAU]; 4], slew_limit: default_slew() }
    }
}

impl CompensatorState {
    pub fn new(phases: [f64; 4], slew_limit: f64) -> Self {
        let mut s = Self { phases: [0.0; 4], slew_limit, ..Self::default() };
        s.set(phases);
        s
    }

    fn bounded(&self, i: usize, v: f64) -> f64 {
        let [lo, hi] = self.bounds[i];
        if ((hi - lo) - TAU).abs() < 1e-12 {
            lo + (v - lo).rem_euclid(TAU)
        } else {
            v.clamp(lo, hi)
        }
    }

    fn set(&mut self, phases: [f64; 4]) {
        for (i, p) in phases.into_iter().enumerate() {
            self.phases[i] = self.bounded(i, p);
        }
    }

    /// Applies `delta` after clipping each component to the slew limit.
    pub fn update(&mut self, delta: [f64; 4]) {
        let mut next = self.phases;
        for (p, d) in next.iter_mut().zip(delta) {
            *p += d.clamp(-self.slew_limit, self.slew_limit);
        }
        self.set(next);
    }

    fn perturbed(&self, i: usize, step: f64) -> Self {
        let mut s = *self;
        s.phases[i] = s.bounded(i, s.phases[i] + step);
        s
    }

    /// Z analyzer `phase(p2) rotation_y(p1)`, X analyzer `phase(p4) rotation_x(p3)`.
    pub fn compensation(&self) -> Compensation {
        let [p1, p2, p3, p4] = self.phases;
        Compensation {
            z: PolarizationUnitary::phase(p2) * PolarizationUnitary::rotation_y(p1),
            x: PolarizationUnitary::phase(p4) * PolarizationUnitary::rotation_x(p3),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QberEstimate {
    pub qber_z: f64,
    pub qber_x: f64,
    pub n_z: u64,
    pub n_x: u64,
    /// Binomial standard errors.
    pub se_z: f64,
    pub se_x: f64,
}

impl QberEstimate {
    pub fn cost(&self) -> f64 {
        self.qber_z + self.qber_x
    }

    pub fn below(&self, threshold: f64) -> bool {
        self.qber_z < threshold && self.qber_x < threshold
    }
}

pub fn estimate_qber(counts: &PublicCounts, min_samples: u64) -> Result<QberEstimate, FeedbackError> {
    if counts.z_total < min_samples.max(1) || counts.x_total < min_samples.max(1) {
        return Err(FeedbackError::EstimateUnavailable {
            n_z: counts.z_total,
            n_x: counts.x_total,
            required: min_samples.max(1),
        });
    }
    let qz = counts.z_errors as f64 / counts.z_total as f64;
    let qx = counts.x_errors as f64 / counts.x_total as f64;
    Ok(QberEstimate {
        qber_z: qz,
        qber_x: qx,
        n_z: counts.z_total,
        n_x: counts.x_total,
        se_z: (qz * (1.0 - qz) / counts.z_total as f64).sqrt(),
        se_x: (qx * (1.0 - qx) / counts.x_total as f64).sqrt(),
    })
}

/// Outcome of one [`FeedbackController::step`].
#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub base: QberEstimate,
    pub gradient: Option<[f64; 4]>,
    pub learning_rate: f64,
}

/// Descent state across steps, including the adaptive learning rate.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedbackController {
    pub config: FeedbackConfig,
    pub state: CompensatorState,
    learning_rate: f64,
    increases: u32,
    halvings: u32,
    /// Cost and its variance at the previous step.
    last_cost: Option<(f64, f64)>,
}

const INCREASES_BEFORE_HALVING: u32 = 3;
const HALVINGS_BEFORE_STALL: u32 = 5;

impl FeedbackController {
    pub fn new(config: FeedbackConfig, state: CompensatorState) -> Result<Self, FeedbackError> {
        config.validate()?;
        Ok(Self { learning_rate: config.learning_rate, config, state, increases: 0, halvings: 0, last_cost: None })
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    pub fn halvings(&self) -> u32 {
        self.halvings
    }

    fn reset(&mut self) {
        self.learning_rate = self.config.learning_rate;
        self.increases = 0;
        self.halvings = 0;
        self.last_cost = None;
    }

    /// Takes a monitoring estimate without probing and reports whether it is
    /// below threshold.
    pub fn monitor(&mut self, base: &QberEstimate) -> bool {
        let below = base.below(self.config.qber_threshold);
        if below {
            self.reset();
        }
        below
    }

    /// Measures at the current setting and, when above threshold, probes each
    /// parameter at plus and minus `probe_step` and takes one descent step.
    /// `estimator` is called once for the base and eight more times when
    /// probing.
    pub fn step<E>(&mut self, mut estimator: E) -> Result<StepReport, FeedbackError>
    where
        E: FnMut(&CompensatorState) -> Result<QberEstimate, FeedbackError>,
    {
        let base = estimator(&self.state)?;
        if !self.config.enabled || base.below(self.config.qber_threshold) {
            self.reset();
            return Ok(StepReport { base, gradient: None, learning_rate: self.learning_rate });
        }
        let cost = base.cost();
        let var = base.se_z.powi(2) + base.se_x.powi(2);
        // only increases beyond two standard errors of the difference count
        match self.last_cost {
            Some((last, last_var)) if cost > last + 2.0 * (var + last_var).sqrt() => self.increases += 1,
            _ => self.increases = 0,
        }
        self.last_cost = Some((cost, var));
        if self.increases >= INCREASES_BEFORE_HALVING {
            self.increases = 0;
            self.halvings += 1;
            self.learning_rate *= 0.5;
            if self.halvings >= HALVINGS_BEFORE_STALL {
                return Err(FeedbackError::Stalled { halvings: self.halvings, cost });
            }
        }
        let h = self.config.probe_step;
        let mut gradient = [0.0; 4];
        for (i, g) in gradient.iter_mut().enumerate() {
            let plus = estimator(&self.state.perturbed(i, h))?.cost();
            let minus = estimator(&self.state.perturbed(i, -h))?.cost();
            *g = (plus - minus) / (2.0 * h);
        }
        self.state.update(gradient.map(|g| -self.learning_rate * g));
        Ok(StepReport { base, gradient: Some(gradient), learning_rate: self.learning_rate })
    }
}

/// Steps until the estimate is below threshold or `max_iterations` is hit.
/// Returns the number of steps taken and the base cost of each.
pub fn converge<E>(controller: &mut FeedbackController, mut estimator: E) -> Result<(u32, Vec<f64>), FeedbackError>
where
    E: FnMut(&CompensatorState) -> Result<QberEstimate, FeedbackError>,
{
    let mut costs = Vec::new();
    for k in 0..controller.config.max_iterations {
        let report = controller.step(&mut estimator)?;
        costs.push(report.base.cost());
        if report.gradient.is_none() {
            return Ok((k, costs));
        }
    }
    Ok((controller.config.max_iterations, costs))
}

/// A link that can be observed for a while under a given compensation.
pub trait FeedbackLink {
    /// Current simulated time, seconds.
    fn time(&self) -> f64;
    /// Runs the link for `duration` and returns the public-slot statistics.
    fn measure(&mut self, compensation: &Compensation, duration: f64) -> Result<PublicCounts, FeedbackError>;
}

/// Draws public-slot counts directly from the expected rates and error
/// probabilities, without generating individual detections. Used for runs
/// spanning hours of simulated time.
pub struct CountLink {
    drift: ChannelDrift,
    rng: ChaCha8Rng,
    time: f64,
    floor: f64,
    z_rate: f64,
    x_rate: f64,
    dark_z_rate: f64,
    dark_x_rate: f64,
}

impl CountLink {
    pub fn new(config: &LinkConfig, sync: &SyncCodeConfig, drift: ChannelDrift, seed: u64) -> Result<Self, FeedbackError> {
        config.validate().map_err(|e| FeedbackError::Link(e.to_string()))?;
        let sync_slot_rate = 1.0 / (config.tau_b() * sync.block_len() as f64);
        let probe_rate = match sync.x_probe_period() {
            0 => 0.0,
            p => sync_slot_rate / p as f64,
        };
        // usable detections: single clicks in the announced basis
        let p_usable = config.sync_detection_probability();
        let dark_per_basis = 2.0 * config.dark_count_rate_hz / sync.block_len() as f64;
        Ok(Self {
            drift,
            rng: ChaCha8Rng::seed_from_u64(seed),
            time: 0.0,
            floor: config.error_floor(),
            z_rate: sync_slot_rate * p_usable,
            x_rate: probe_rate * p_usable,
            dark_z_rate: dark_per_basis,
            dark_x_rate: match sync.x_probe_period() {
                0 => 0.0,
                p => dark_per_basis / p as f64,
            },
        })
    }

    fn draw(&mut self, rate: f64, dt: f64, p_err: f64) -> (u64, u64) {
        let mean = rate * dt;
        if mean <= 0.0 {
            return (0, 0);
        }
        let n = Poisson::new(mean).map(|d| d.sample(&mut self.rng) as u64).unwrap_or(0);
        let e = Binomial::new(n, p_err.clamp(0.0, 1.0)).map(|d| d.sample(&mut self.rng)).unwrap_or(0);
        (n, e)
    }
}

impl FeedbackLink for CountLink {
    fn time(&self) -> f64 {
        self.time
    }

    fn measure(&mut self, compensation: &Compensation, duration: f64) -> Result<PublicCounts, FeedbackError> {
        let end = self.time + duration;
        let mut out = PublicCounts::default();
        while self.time < end {
            let channel = self.drift.unitary_at(self.time);
            let seg_end = self.drift.next_change_after(self.time).min(end);
            let dt = seg_end - self.time;
            let (qz, qx) = expected_qber(&channel, compensation, self.floor);
            for (rate, q, z) in [
                (self.z_rate, qz, true),
                (self.dark_z_rate, 0.5, true),
                (self.x_rate, qx, false),
                (self.dark_x_rate, 0.5, false),
            ] {
                let (n, e) = self.draw(rate, dt, q);
                if z {
                    out.z_total += n;
                    out.z_errors += e;
                } else {
                    out.x_total += n;
                    out.x_errors += e;
                }
            }
            self.time = seg_end;
        }
        Ok(out)
    }
}

/// Full photon-level link with a locked timing solution. Key-slot counts of
/// every window are accumulated alongside.
pub struct EventLink {
    sim: LinkSimulator,
    solution: SyncSolution,
    source: PulseSource,
    time: f64,
    pub key_counts: SiftedCounts,
}

impl EventLink {
    /// Runs `sync_duration` under `compensation` to acquire the timing
    /// solution, then hands over.
    pub fn new(
        mut sim: LinkSimulator,
        sync: &SyncCodeConfig,
        params: &SyncParams,
        sync_duration: f64,
        compensation: &Compensation,
    ) -> Result<Self, FeedbackError> {
        let events = sim.run_block(sync_duration, compensation);
        let cfg = sim.config().clone();
        let solution =
            acquire(&events, cfg.repetition_period, cfg.timestamp_resolution, sync, params, OffsetHint::None)?;
        let source = sim.source().clone();
        Ok(Self { sim, solution, source, time: sync_duration, key_counts: SiftedCounts::default() })
    }

    pub fn solution(&self) -> &SyncSolution {
        &self.solution
    }

    pub fn simulator(&mut self) -> &mut LinkSimulator {
        &mut self.sim
    }
}

impl FeedbackLink for EventLink {
    fn time(&self) -> f64 {
        self.time
    }

    fn measure(&mut self, compensation: &Compensation, duration: f64) -> Result<PublicCounts, FeedbackError> {
        self.time += duration;
        let events = self.sim.run_block(self.time, compensation);
        let out = sift(&self.source, &events, &self.solution, duration);
        self.key_counts.accumulate(&out.counts);
        Ok(PublicCounts::from_detections(&out.public))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub time_s: f64,
    /// All public detections of the block, probe windows included.
    pub qber_z: Option<f64>,
    pub qber_x: Option<f64>,
    pub phases: [f64; 4],
    pub probing: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recovery {
    pub step_time: f64,
    pub breached: bool,
    /// Seconds from the step until the base estimate is back below
    /// threshold. `None` if that never happened before the next step.
    pub recovery_time: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FeedbackTrace {
    pub rows: Vec<TraceRow>,
    pub recoveries: Vec<Recovery>,
}

impl FeedbackTrace {
    /// Mean per-basis error rate over blocks with data.
    pub fn mean_qber(&self) -> (f64, f64) {
        let mean = |f: fn(&TraceRow) -> Option<f64>| {
            let v: Vec<f64> = self.rows.iter().filter_map(f).collect();
            if v.is_empty() {
                0.0
            } else {
                v.iter().sum::<f64>() / v.len() as f64
            }
        };
        (mean(|r| r.qber_z), mean(|r| r.qber_x))
    }

    /// Largest per-block error rate in either basis.
    pub fn max_qber(&self) -> f64 {
        self.rows.iter().flat_map(|r| [r.qber_z, r.qber_x]).flatten().fold(0.0, f64::max)
    }

    pub fn max_recovery_time(&self) -> Option<f64> {
        self.recoveries.iter().map(|r| r.recovery_time.unwrap_or(f64::INFINITY)).reduce(f64::max)
    }

    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<(), csv::Error> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["time_s", "qber_z", "qber_x", "p1", "p2", "p3", "p4"])?;
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        for r in &self.rows {
            let mut rec = vec![format!("{:.3}", r.time_s), opt(r.qber_z), opt(r.qber_x)];
            rec.extend(r.phases.iter().map(|p| format!("{p:.6}")));
            out.write_record(&rec)?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Times the return below threshold after each known disturbance.
pub struct RecoveryTracker {
    steps: Vec<f64>,
    next: usize,
    open: Option<Recovery>,
    done: Vec<Recovery>,
}

impl RecoveryTracker {
    pub fn new(steps: Vec<f64>) -> Self {
        Self { steps, next: 0, open: None, done: Vec::new() }
    }

    /// Records a block ending at `block_end` whose base estimate was below
    /// threshold (`Some(true)`), above it, or unavailable.
    pub fn observe(&mut self, block_end: f64, below: Option<bool>) {
        while self.next < self.steps.len() && self.steps[self.next] < block_end {
            if let Some(r) = self.open.take() {
                self.done.push(r);
            }
            self.open = Some(Recovery { step_time: self.steps[self.next], breached: false, recovery_time: None });
            self.next += 1;
        }
        if let (Some(r), Some(below)) = (self.open.as_mut(), below) {
            if below {
                r.recovery_time = Some(if r.breached { block_end - r.step_time } else { 0.0 });
                self.done.push(self.open.take().expect("open"));
            } else {
                r.breached = true;
            }
        }
    }

    pub fn finish(mut self) -> Vec<Recovery> {
        self.done.extend(self.open.take());
        self.done
    }
}

/// Runs blocks of `block_duration` until `total_duration`. A block either
/// monitors the current setting for its whole length or, when the last
/// estimate was above threshold, splits into nine windows for the base
/// estimate and the eight probes. `step_times` are the instants of known
/// channel disturbances whose recovery is timed.
pub fn run_feedback_loop<L: FeedbackLink>(
    link: &mut L,
    controller: &mut FeedbackController,
    block_duration: f64,
    total_duration: f64,
    step_times: &[f64],
) -> Result<FeedbackTrace, FeedbackError> {
    if !(block_duration > 0.0 && total_duration >= block_duration) {
        return Err(FeedbackError::InvalidConfig(format!(
            "block duration {block_duration} must be positive and at most the total {total_duration}"
        )));
    }
    let threshold = controller.config.qber_threshold;
    let min_samples = controller.config.min_samples_per_estimate;
    let mut tracker = RecoveryTracker::new(step_times.to_vec());
    let mut trace = FeedbackTrace::default();
    let mut probing = false;
    let start = link.time();
    let blocks = ((total_duration - start) / block_duration).round() as u64;
    for _ in 0..blocks {
        let block_start = link.time();
        let block_end = block_start + block_duration;
        let mut total = PublicCounts::default();
        let mut measure = |link: &mut L, state: &CompensatorState, duration: f64| {
            let counts = link.measure(&state.compensation(), duration)?;
            total.z_total += counts.z_total;
            total.z_errors += counts.z_errors;
            total.x_total += counts.x_total;
            total.x_errors += counts.x_errors;
            Ok::<_, FeedbackError>(counts)
        };
        let (outcome, stepped) = if probing && controller.config.enabled {
            let window = block_duration / 9.0;
            match controller.step(|state| estimate_qber(&measure(link, state, window)?, min_samples)) {
                Ok(report) => (Ok(report.base), report.gradient.is_some()),
                Err(e) => (Err(e), false),
            }
        } else {
            let state = controller.state;
            let counts = measure(link, &state, block_duration)?;
            (estimate_qber(&counts, min_samples), false)
        };
        let below = match &outcome {
            Ok(base) if !stepped => Some(controller.monitor(base)),
            Ok(base) => Some(base.below(threshold)),
            Err(FeedbackError::EstimateUnavailable { .. }) => None,
            Err(e) => return Err(e.clone()),
        };
        // a monitoring block that found a breach, or a probe step cut short
        let remaining = block_end - link.time();
        if remaining > 1e-9 {
            let counts = link.measure(&controller.state.compensation(), remaining)?;
            total.z_total += counts.z_total;
            total.z_errors += counts.z_errors;
            total.x_total += counts.x_total;
            total.x_errors += counts.x_errors;
        }
        probing = below == Some(false);
        tracker.observe(block_end, below);
        trace.rows.push(TraceRow {
            time_s: block_end,
            qber_z: total.qber_z(),
            qber_x: total.qber_x(),
            phases: controller.state.phases,
            probing: stepped,
        });
    }
    trace.recoveries = tracker.finish();
    Ok(trace)
}
