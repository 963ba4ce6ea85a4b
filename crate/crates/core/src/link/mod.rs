//! Photon-level model of the link: Alice's pulse train, the fiber channel
//! with polarization drift, Bob's decoder and four single-photon detectors.

pub mod drift;
pub mod dump;
pub mod physics;
pub mod pulse;
pub mod sift;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::optics::{Basis, IntensitySetting, OpticsError, PolarizationUnitary};

pub use dump::{config_hash, EventDump};
pub use drift::{ChannelDrift, ChannelDriftModel, DriftMode};
pub use physics::{transmit, GroundTruth, LinkSimulator};
pub use pulse::{build_pulse_train, IntensityClass, PulseLookup, PulseRecord, PulseSource};
pub use sift::{sift, EventCategories, PublicCounts, PublicDetection, SiftOutcome};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinkError {
    #[error("invalid link configuration: {0}")]
    InvalidConfig(String),
    #[error("pulse train of {count} slots is shorter than one frame of {frame} slots")]
    TrainTooShort { count: usize, frame: usize },
    #[error("pulse train slots must be contiguous")]
    NonContiguousTrain,
    #[error(transparent)]
    Optics(#[from] OpticsError),
    #[error("event dump: {0}")]
    Dump(String),
}

/// Device and channel parameters. Times are in seconds, losses in dB.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkConfig {
    #[serde(default = "default_repetition_period")]
    pub repetition_period: f64,
    pub intensities: IntensitySetting,
    #[serde(default)]
    pub fiber_length_km: f64,
    #[serde(default = "default_attenuation")]
    pub fiber_attenuation_db_per_km: f64,
    #[serde(default = "default_decoder_loss")]
    pub decoder_insertion_loss_db: f64,
    #[serde(default = "default_detector_efficiency")]
    pub detector_efficiency: f64,
    /// Per detector.
    #[serde(default = "default_dark_count_rate")]
    pub dark_count_rate_hz: f64,
    #[serde(default = "default_dead_time")]
    pub dead_time: f64,
    /// Gaussian standard deviation.
    #[serde(default = "default_jitter")]
    pub timing_jitter_sigma: f64,
    #[serde(default = "default_im_extinction")]
    pub im_dynamic_extinction_db: f64,
    /// Perturb each decoy pulse by the finite modulator extinction.
    #[serde(default)]
    pub decoy_leakage: bool,
    #[serde(default = "default_pol_extinction")]
    pub polarization_extinction_db: f64,
    /// Bob's clock runs slow by this amount: `tau_B = tau_A (1 + skew)`.
    #[serde(default)]
    pub clock_skew_ppm: f64,
    #[serde(default = "default_resolution")]
    pub timestamp_resolution: f64,
    /// Test knob: every pulse carries at least one photon.
    #[serde(default)]
    pub force_photon: bool,
}

fn default_repetition_period() -> f64 {
    20e-9
}
fn default_attenuation() -> f64 {
    0.2
}
fn default_decoder_loss() -> f64 {
    4.6
}
fn default_detector_efficiency() -> f64 {
    0.75
}
fn default_dark_count_rate() -> f64 {
    25.0
}
fn default_dead_time() -> f64 {
    40e-9
}
fn default_jitter() -> f64 {
    70e-12 / 2.355
}
fn default_im_extinction() -> f64 {
    18.0
}
fn default_pol_extinction() -> f64 {
    23.0
}
fn default_resolution() -> f64 {
    1e-12
}

impl LinkConfig {
    pub fn new(intensities: IntensitySetting) -> Self {
        Self {
            repetition_period: default_repetition_period(),
            intensities,
            fiber_length_km: 0.0,
            fiber_attenuation_db_per_km: default_attenuation(),
            decoder_insertion_loss_db: default_decoder_loss(),
            detector_efficiency: default_detector_efficiency(),
            dark_count_rate_hz: default_dark_count_rate(),
            dead_time: default_dead_time(),
            timing_jitter_sigma: default_jitter(),
            im_dynamic_extinction_db: default_im_extinction(),
            decoy_leakage: false,
            polarization_extinction_db: default_pol_extinction(),
            clock_skew_ppm: 0.0,
            timestamp_resolution: default_resolution(),
            force_photon: false,
        }
    }

    /// A lossless, noiseless link: useful as a baseline in tests.
    pub fn ideal(intensities: IntensitySetting) -> Self {
        Self {
            decoder_insertion_loss_db: 0.0,
            detector_efficiency: 1.0,
            dark_count_rate_hz: 0.0,
            dead_time: 0.0,
            timing_jitter_sigma: 0.0,
            polarization_extinction_db: f64::INFINITY,
            ..Self::new(intensities)
        }
    }

    /// Lists every invalid field.
    pub fn validate(&self) -> Result<(), LinkError> {
        let mut problems = Vec::new();
        if let Err(e) = self.intensities.validate() {
            problems.push(format!("intensities: {e}"));
        }
        let mut positive = |name: &str, v: f64| {
            if !(v > 0.0 && v.is_finite()) {
                problems.push(format!("{name} must be positive, got {v}"));
            }
        };
        positive("repetition_period", self.repetition_period);
        positive("timestamp_resolution", self.timestamp_resolution);
        positive("im_dynamic_extinction_db", self.im_dynamic_extinction_db);
        let non_negative = [
            ("fiber_length_km", self.fiber_length_km),
            ("fiber_attenuation_db_per_km", self.fiber_attenuation_db_per_km),
            ("decoder_insertion_loss_db", self.decoder_insertion_loss_db),
            ("dark_count_rate_hz", self.dark_count_rate_hz),
            ("dead_time", self.dead_time),
            ("timing_jitter_sigma", self.timing_jitter_sigma),
        ];
        for (name, v) in non_negative {
            if !(v >= 0.0 && v.is_finite()) {
                problems.push(format!("{name} must be non-negative and finite, got {v}"));
            }
        }
        if !(self.polarization_extinction_db > 0.0) {
            problems.push(format!(
                "polarization_extinction_db must be positive, got {}",
                self.polarization_extinction_db
            ));
        }
        if !(self.detector_efficiency > 0.0 && self.detector_efficiency <= 1.0) {
            problems.push(format!("detector_efficiency must lie in (0, 1], got {}", self.detector_efficiency));
        }
        if !(self.clock_skew_ppm.abs() < 1000.0) {
            problems.push(format!("clock_skew_ppm must be within +-1000, got {}", self.clock_skew_ppm));
        }
        if self.timestamp_resolution > self.repetition_period / 4.0 {
            problems.push("timestamp_resolution must be finer than a quarter period".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(LinkError::InvalidConfig(problems.join("; ")))
        }
    }

    pub fn channel_loss_db(&self) -> f64 {
        self.fiber_length_km * self.fiber_attenuation_db_per_km
    }

    /// Probability that a photon leaving Alice produces a click.
    pub fn total_transmittance(&self) -> f64 {
        10f64.powf(-(self.channel_loss_db() + self.decoder_insertion_loss_db) / 10.0) * self.detector_efficiency
    }

    /// Probability that a click lands on the wrong detector of the right basis.
    pub fn error_floor(&self) -> f64 {
        1.0 / (1.0 + 10f64.powf(self.polarization_extinction_db / 10.0))
    }

    /// Bob's true slot period.
    pub fn tau_b(&self) -> f64 {
        self.repetition_period * (1.0 + self.clock_skew_ppm * 1e-6)
    }

    /// Mean photon number averaged over the intensity choice.
    pub fn mean_photon_number(&self) -> f64 {
        let i = &self.intensities;
        i.p_mu * i.mu + i.p_nu() * i.nu
    }

    /// Probability that a code slot yields a single click in the Z detectors,
    /// which is what the sync correlator can use.
    pub fn sync_detection_probability(&self) -> f64 {
        let i = &self.intensities;
        let eta = self.total_transmittance();
        let click = |m: f64| 1.0 - (-m * eta).exp();
        0.5 * (i.p_mu * click(i.mu) + i.p_nu() * click(i.nu))
    }
}

/// One of Bob's four detectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[repr(u8)]
pub enum DetectorId {
    Z0 = 0,
    Z1 = 1,
    X0 = 2,
    X1 = 3,
}

impl DetectorId {
    pub const ALL: [DetectorId; 4] = [DetectorId::Z0, DetectorId::Z1, DetectorId::X0, DetectorId::X1];

    pub fn new(basis: Basis, bit: u8) -> Self {
        match (basis, bit) {
            (Basis::Z, 0) => DetectorId::Z0,
            (Basis::Z, _) => DetectorId::Z1,
            (Basis::X, 0) => DetectorId::X0,
            (Basis::X, _) => DetectorId::X1,
        }
    }

    pub fn from_index(i: u8) -> Option<Self> {
        Self::ALL.get(i as usize).copied()
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn basis(self) -> Basis {
        match self {
            DetectorId::Z0 | DetectorId::Z1 => Basis::Z,
            DetectorId::X0 | DetectorId::X1 => Basis::X,
        }
    }

    pub fn bit(self) -> u8 {
        match self {
            DetectorId::Z0 | DetectorId::X0 => 0,
            DetectorId::Z1 | DetectorId::X1 => 1,
        }
    }
}

/// A click at Bob. `timestamp` counts timestamp-resolution ticks on Bob's
/// clock; `true_slot` is simulator ground truth and is never read by the
/// sync or sifting algorithms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetectionEvent {
    pub timestamp: u64,
    pub detector: DetectorId,
    pub true_slot: Option<u64>,
}

impl DetectionEvent {
    pub fn time_s(&self, resolution: f64) -> f64 {
        self.timestamp as f64 * resolution
    }
}

/// Bob's per-basis compensation: the Z-basis and X-basis analyzers each see
/// the channel output through their own unitary.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Compensation {
    pub z: PolarizationUnitary,
    pub x: PolarizationUnitary,
}

impl Compensation {
    pub fn uniform(u: PolarizationUnitary) -> Self {
        Self { z: u, x: u }
    }

    pub fn identity() -> Self {
        Self::uniform(PolarizationUnitary::identity())
    }

    pub fn for_basis(&self, basis: Basis) -> &PolarizationUnitary {
        match basis {
            Basis::Z => &self.z,
            Basis::X => &self.x,
        }
    }
}

impl Default for Compensation {
    fn default() -> Self {
        Self::identity()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config() -> LinkConfig {
        LinkConfig::new(IntensitySetting::new(0.568, 0.144, 0.799, 0.944).unwrap())
    }

    #[test]
    fn fifty_km_loss() {
        let c = LinkConfig { fiber_length_km: 50.0, fiber_attenuation_db_per_km: 0.19914, ..config() };
        assert!((c.channel_loss_db() - 9.957).abs() < 1e-9);
    }

    #[test]
    fn error_floor_at_23_db() {
        let p = config().error_floor();
        assert!((p - 0.005).abs() < 2e-4, "{p}");
        assert_eq!(LinkConfig::ideal(config().intensities).error_floor(), 0.0);
    }

    #[test]
    fn validation_lists_every_problem() {
        let bad = LinkConfig {
            repetition_period: -1.0,
            detector_efficiency: 1.5,
            dark_count_rate_hz: -2.0,
            ..config()
        };
        let msg = bad.validate().unwrap_err().to_string();
        assert!(msg.contains("repetition_period"));
        assert!(msg.contains("detector_efficiency"));
        assert!(msg.contains("dark_count_rate_hz"));
    }

    #[test]
    fn detector_ids_round_trip() {
        for d in DetectorId::ALL {
            assert_eq!(DetectorId::new(d.basis(), d.bit()), d);
            assert_eq!(DetectorId::from_index(d as u8), Some(d));
        }
        assert_eq!(DetectorId::from_index(4), None);
    }
}
