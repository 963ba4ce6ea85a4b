//! Photon transmission, detection and timestamping.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use super::drift::ChannelDrift;
use super::pulse::{IntensityClass, PulseRecord, PulseSource};
use super::{Compensation, DetectionEvent, DetectorId, LinkConfig, LinkError};
use crate::optics::{measurement_probabilities, poisson_photon_number, symbol_to_state, Basis, PolarizationUnitary};
use crate::sync::SyncCodeConfig;

const FP_BITS: u32 = 32;
const FP_ONE: f64 = (1u64 << FP_BITS) as f64;
/// Slots are simulated slightly past a window end so that photons whose
/// jitter pulls them back inside the window are not lost.
const EMIT_GUARD_S: f64 = 1e-9;

/// Where Alice's slots land on Bob's clock. Kept in fixed point so that slot
/// times stay exact to a fraction of a tick over hours of slots.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    /// Arrival time of slot 0, seconds.
    pub t0: f64,
    /// Slot period on Bob's clock, seconds.
    pub tau_b: f64,
    pub resolution: f64,
    t0_fp: u128,
    tau_fp: u128,
}

impl GroundTruth {
    pub fn new(t0: f64, tau_b: f64, resolution: f64) -> Self {
        Self {
            t0,
            tau_b,
            resolution,
            t0_fp: (t0 / resolution * FP_ONE).round() as u128,
            tau_fp: (tau_b / resolution * FP_ONE).round() as u128,
        }
    }

    pub fn nominal_time(&self, slot: u64) -> f64 {
        self.t0 + slot as f64 * self.tau_b
    }

    /// Nominal arrival in ticks, split into integer and fractional parts.
    fn nominal_ticks(&self, slot: u64) -> (u64, f64) {
        let fp = self.t0_fp + slot as u128 * self.tau_fp;
        ((fp >> FP_BITS) as u64, (fp & ((1u128 << FP_BITS) - 1)) as f64 / FP_ONE)
    }

    /// First slot whose nominal arrival is at or after `t`.
    pub fn first_slot_at_or_after(&self, t: f64) -> u64 {
        if t <= self.t0 {
            0
        } else {
            ((t - self.t0) / self.tau_b).ceil() as u64
        }
    }
}

/// Bit-0 probabilities for every (Alice symbol, Bob basis) pair under one
/// channel/compensation setting, including the extinction-ratio floor.
#[derive(Debug, Clone, Copy)]
struct SlotOptics {
    p0: [[f64; 2]; 4],
}

impl SlotOptics {
    fn new(channel: &PolarizationUnitary, comp: &Compensation, floor: f64) -> Self {
        let mut p0 = [[0.0; 2]; 4];
        for sym in crate::optics::Bb84Symbol::ALL {
            let out = channel.apply(&symbol_to_state(sym));
            for basis in Basis::ALL {
                let (a, b) = measurement_probabilities(&out, basis, comp.for_basis(basis));
                p0[symbol_index(sym)][basis.index()] = a * (1.0 - floor) + b * floor;
            }
        }
        Self { p0 }
    }

    /// Detector bitmask hit by `photons` detected photons.
    fn detect<R: Rng + ?Sized>(&self, record: &PulseRecord, photons: u64, rng: &mut R) -> u8 {
        let row = &self.p0[symbol_index(record.symbol)];
        let mut mask = 0u8;
        for _ in 0..photons {
            let basis = if rng.random::<bool>() { Basis::Z } else { Basis::X };
            let bit = u8::from(rng.random::<f64>() >= row[basis.index()]);
            mask |= 1 << DetectorId::new(basis, bit).index();
        }
        mask
    }
}

fn symbol_index(sym: crate::optics::Bb84Symbol) -> usize {
    sym.basis.index() * 2 + sym.bit as usize
}

/// Expected per-basis error rates of sifted clicks for a given channel and
/// compensation, averaged over Alice's two states in each basis.
pub fn expected_qber(channel: &PolarizationUnitary, comp: &Compensation, floor: f64) -> (f64, f64) {
    let optics = SlotOptics::new(channel, comp, floor);
    let err = |basis: Basis| {
        let i0 = symbol_index(crate::optics::Bb84Symbol::new(basis, 0));
        let i1 = symbol_index(crate::optics::Bb84Symbol::new(basis, 1));
        0.5 * ((1.0 - optics.p0[i0][basis.index()]) + optics.p0[i1][basis.index()])
    };
    (err(Basis::Z), err(Basis::X))
}

/// Sample from Poisson(lambda) conditioned on at least one event.
fn zero_truncated_poisson<R: Rng + ?Sized>(lambda: f64, rng: &mut R) -> u64 {
    let u = rng.random::<f64>() * -(-lambda).exp_m1();
    let mut p = lambda * (-lambda).exp();
    let mut cum = p;
    let mut k = 1u64;
    while cum < u && k < 1000 {
        k += 1;
        p *= lambda / k as f64;
        cum += p;
    }
    k
}

fn binomial_thinning<R: Rng + ?Sized>(n: u64, eta: f64, rng: &mut R) -> u64 {
    (0..n).filter(|_| rng.random::<f64>() < eta).count() as u64
}

struct Stamper {
    jitter: Option<Normal<f64>>,
}

impl Stamper {
    fn new(config: &LinkConfig) -> Self {
        let sd = config.timing_jitter_sigma / config.timestamp_resolution;
        Self { jitter: (sd > 0.0).then(|| Normal::new(0.0, sd).expect("finite jitter")) }
    }

    fn push<R: Rng + ?Sized>(
        &self,
        truth: &GroundTruth,
        slot: u64,
        mask: u8,
        rng: &mut R,
        out: &mut Vec<DetectionEvent>,
    ) {
        let (base, frac) = truth.nominal_ticks(slot);
        for det in DetectorId::ALL {
            if mask & (1 << det.index()) == 0 {
                continue;
            }
            let j = self.jitter.map_or(0.0, |d| d.sample(rng));
            let shift = (frac + j).round() as i64;
            let timestamp = (base as i64).saturating_add(shift).max(0) as u64;
            out.push(DetectionEvent { timestamp, detector: det, true_slot: Some(slot) });
        }
    }
}

fn dark_counts<R: Rng + ?Sized>(
    rate_hz: f64,
    start: u64,
    end: u64,
    resolution: f64,
    rng: &mut R,
    out: &mut Vec<DetectionEvent>,
) {
    if rate_hz <= 0.0 || end <= start {
        return;
    }
    let mean = rate_hz * (end - start) as f64 * resolution;
    for det in DetectorId::ALL {
        let count = Poisson::new(mean).map(|d| d.sample(rng) as u64).unwrap_or(0);
        for _ in 0..count {
            out.push(DetectionEvent { timestamp: rng.random_range(start..end), detector: det, true_slot: None });
        }
    }
}

/// Non-paralyzable dead time per detector over time-sorted events.
fn apply_dead_time(events: Vec<DetectionEvent>, dead_ticks: u64, last: &mut [Option<u64>; 4]) -> Vec<DetectionEvent> {
    let min_gap = dead_ticks.max(1);
    events
        .into_iter()
        .filter(|e| {
            let slot = &mut last[e.detector.index()];
            match *slot {
                Some(prev) if e.timestamp < prev + min_gap => false,
                _ => {
                    *slot = Some(e.timestamp);
                    true
                }
            }
        })
        .collect()
}

fn sort_events(events: &mut [DetectionEvent]) {
    events.sort_unstable_by_key(|e| (e.timestamp, e.detector, e.true_slot));
}

/// Sends an explicit pulse train through the link, slot by slot. Slot 0 of
/// the train arrives at a random time in `[0, 10^6 tau_A)`.
pub fn transmit<R: Rng + ?Sized>(
    train: &[PulseRecord],
    config: &LinkConfig,
    drift: &mut ChannelDrift,
    compensation: &Compensation,
    rng: &mut R,
) -> Result<Vec<DetectionEvent>, LinkError> {
    config.validate()?;
    if train.windows(2).any(|w| w[1].index != w[0].index + 1) {
        return Err(LinkError::NonContiguousTrain);
    }
    let Some(first) = train.first() else { return Ok(Vec::new()) };
    let t0 = rng.random_range(0.0..1e6 * config.repetition_period) - first.index as f64 * config.tau_b();
    let truth = GroundTruth::new(t0.max(0.0), config.tau_b(), config.timestamp_resolution);
    let eta = config.total_transmittance();
    let floor = config.error_floor();
    let stamper = Stamper::new(config);
    let leak = config.intensities.mu / config.intensities.nu * 10f64.powf(-config.im_dynamic_extinction_db / 10.0);
    let mut events = Vec::new();
    let mut optics_cache: Option<(f64, SlotOptics)> = None;
    for record in train {
        let t = truth.nominal_time(record.index);
        let valid_until = optics_cache.as_ref().map(|c| c.0);
        if valid_until.is_none_or(|until| t >= until) {
            let u = drift.unitary_at(t);
            optics_cache = Some((drift.next_change_after(t), SlotOptics::new(&u, compensation, floor)));
        }
        let optics = &optics_cache.as_ref().expect("set above").1;
        let mean = match record.intensity {
            IntensityClass::Signal => config.intensities.mu,
            IntensityClass::Decoy if config.decoy_leakage => config.intensities.nu * (1.0 + rng.random::<f64>() * leak),
            IntensityClass::Decoy => config.intensities.nu,
        };
        let mut photons = poisson_photon_number(mean, rng)?;
        if config.force_photon {
            photons = photons.max(1);
        }
        let detected = binomial_thinning(photons, eta, rng);
        if detected > 0 {
            let mask = optics.detect(record, detected, rng);
            stamper.push(&truth, record.index, mask, rng, &mut events);
        }
    }
    let last = train.last().expect("non-empty");
    let end = ((truth.nominal_time(last.index) + config.tau_b()) / config.timestamp_resolution).ceil() as u64;
    dark_counts(config.dark_count_rate_hz, 0, end, config.timestamp_resolution, rng, &mut events);
    sort_events(&mut events);
    let dead = (config.dead_time / config.timestamp_resolution).round() as u64;
    Ok(apply_dead_time(events, dead, &mut [None; 4]))
}

/// Streaming link simulator that produces Bob's detections window by window
/// over an unbounded pulse train.
pub struct LinkSimulator {
    config: LinkConfig,
    source: PulseSource,
    drift: ChannelDrift,
    truth: GroundTruth,
    rng: ChaCha8Rng,
    stamper: Stamper,
    eta: f64,
    p_max: f64,
    next_slot: u64,
    pending: Vec<DetectionEvent>,
    last_click: [Option<u64>; 4],
    block_start: u64,
    dead_ticks: u64,
}

impl LinkSimulator {
    pub fn new(config: &LinkConfig, sync: &SyncCodeConfig, drift: ChannelDrift, seed: u64) -> Result<Self, LinkError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t0 = rng.random_range(0.0..1e3 * config.repetition_period);
        let source = PulseSource::new(config, sync, rng.random());
        let eta = config.total_transmittance();
        let p_max = -(-source.max_mean_photon_number() * eta).exp_m1();
        Ok(Self {
            config: config.clone(),
            truth: GroundTruth::new(t0, config.tau_b(), config.timestamp_resolution),
            stamper: Stamper::new(config),
            source,
            drift,
            rng,
            eta,
            p_max,
            next_slot: 0,
            pending: Vec::new(),
            last_click: [None; 4],
            block_start: 0,
            dead_ticks: (config.dead_time / config.timestamp_resolution).round() as u64,
        })
    }

    pub fn ground_truth(&self) -> &GroundTruth {
        &self.truth
    }

    pub fn source(&self) -> &PulseSource {
        &self.source
    }

    pub fn config(&self) -> &LinkConfig {
        &self.config
    }

    /// Channel unitary at Bob time `t`.
    pub fn channel_at(&mut self, t: f64) -> PolarizationUnitary {
        self.drift.unitary_at(t)
    }

    /// Simulates every slot arriving before `t_end` (plus a small guard)
    /// with the given compensation.
    pub fn emit_until(&mut self, t_end: f64, compensation: &Compensation) {
        let end_slot = self.truth.first_slot_at_or_after(t_end + EMIT_GUARD_S);
        let floor = self.config.error_floor();
        while self.next_slot < end_slot {
            let t = self.truth.nominal_time(self.next_slot);
            let channel = self.drift.unitary_at(t);
            let change = self.drift.next_change_after(t);
            let seg_end = self.truth.first_slot_at_or_after(change).clamp(self.next_slot + 1, end_slot);
            let optics = SlotOptics::new(&channel, compensation, floor);
            if self.config.force_photon {
                for slot in self.next_slot..seg_end {
                    self.forced_slot(slot, &optics);
                }
            } else {
                self.sparse_segment(self.next_slot, seg_end, &optics);
            }
            self.next_slot = seg_end;
        }
    }

    fn forced_slot(&mut self, slot: u64, optics: &SlotOptics) {
        let record = self.source.pulse(slot);
        let mean = self.source.mean_photon_number(&record);
        let photons = poisson_photon_number(mean, &mut self.rng).unwrap_or(0).max(1);
        let detected = binomial_thinning(photons, self.eta, &mut self.rng);
        if detected > 0 {
            let mask = optics.detect(&record, detected, &mut self.rng);
            self.stamper.push(&self.truth, slot, mask, &mut self.rng, &mut self.pending);
        }
    }

    /// Visits only slots that may click: candidates are spaced geometrically
    /// with the highest per-slot click probability and then thinned to the
    /// slot's own probability.
    fn sparse_segment(&mut self, start: u64, end: u64, optics: &SlotOptics) {
        if self.p_max <= 0.0 {
            return;
        }
        let log_q = (-self.p_max).ln_1p();
        let mut cursor = start;
        loop {
            let gap = if self.p_max >= 1.0 {
                0
            } else {
                let u: f64 = self.rng.random();
                ((1.0 - u).ln() / log_q).floor().min(u64::MAX as f64 / 2.0) as u64
            };
            let slot = cursor.saturating_add(gap);
            if slot >= end {
                break;
            }
            cursor = slot + 1;
            let record = self.source.pulse(slot);
            let lambda = self.source.mean_photon_number(&record) * self.eta;
            let p_click = -(-lambda).exp_m1();
            if self.rng.random::<f64>() * self.p_max >= p_click {
                continue;
            }
            let detected = zero_truncated_poisson(lambda, &mut self.rng);
            let mask = optics.detect(&record, detected, &mut self.rng);
            self.stamper.push(&self.truth, slot, mask, &mut self.rng, &mut self.pending);
        }
    }

    /// Ends the current acquisition block at Bob time `t_end`: adds dark
    /// counts, applies dead time and returns the block's time-sorted events.
    /// Events from the guard region past `t_end` carry over.
    pub fn close_block(&mut self, t_end: f64) -> Vec<DetectionEvent> {
        let end = (t_end / self.config.timestamp_resolution).round() as u64;
        dark_counts(
            self.config.dark_count_rate_hz,
            self.block_start,
            end,
            self.config.timestamp_resolution,
            &mut self.rng,
            &mut self.pending,
        );
        sort_events(&mut self.pending);
        let split = self.pending.partition_point(|e| e.timestamp < end);
        let rest = self.pending.split_off(split);
        let block = std::mem::replace(&mut self.pending, rest);
        self.block_start = end.max(self.block_start);
        apply_dead_time(block, self.dead_ticks, &mut self.last_click)
    }

    /// One block under a single compensation setting.
    pub fn run_block(&mut self, t_end: f64, compensation: &Compensation) -> Vec<DetectionEvent> {
        self.emit_until(t_end, compensation);
        self.close_block(t_end)
    }
}
