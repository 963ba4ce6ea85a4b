//! Alice's per-slot choices.
//!
//! Choices are a pure function of `(seed, slot)` so arbitrarily long trains
//! can be queried lazily without storing them.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{LinkConfig, LinkError};
use crate::optics::{Basis, Bb84Symbol, IntensitySetting};
use crate::sync::SyncCodeConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntensityClass {
    Signal,
    Decoy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PulseRecord {
    pub index: u64,
    pub symbol: Bb84Symbol,
    pub intensity: IntensityClass,
    pub is_sync: bool,
    pub sync_code_position: Option<u32>,
    /// Public X-basis slot used only for drift estimation.
    pub is_x_probe: bool,
}

impl PulseRecord {
    /// Slots whose content is announced publicly and kept out of the key.
    pub fn is_public(&self) -> bool {
        self.is_sync || self.is_x_probe
    }
}

/// Read access to Alice's records by slot index.
pub trait PulseLookup {
    fn pulse(&self, slot: u64) -> Option<PulseRecord>;
}

impl PulseLookup for [PulseRecord] {
    fn pulse(&self, slot: u64) -> Option<PulseRecord> {
        let first = self.first()?.index;
        let offset = slot.checked_sub(first)?;
        self.get(usize::try_from(offset).ok()?).copied()
    }
}

impl PulseLookup for Vec<PulseRecord> {
    fn pulse(&self, slot: u64) -> Option<PulseRecord> {
        self.as_slice().pulse(slot)
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn unit(bits: u64) -> f64 {
    (bits >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Counter-based generator for Alice's train.
#[derive(Debug, Clone)]
pub struct PulseSource {
    seed: u64,
    intensities: IntensitySetting,
    block_len: u64,
    code: Arc<[i8]>,
    x_probe_period: u64,
    leakage: Option<f64>,
}

impl PulseSource {
    pub fn new(config: &LinkConfig, sync: &SyncCodeConfig, seed: u64) -> Self {
        let leakage = config
            .decoy_leakage
            .then(|| config.intensities.mu / config.intensities.nu * 10f64.powf(-config.im_dynamic_extinction_db / 10.0));
        Self {
            seed: splitmix64(seed ^ 0xa11c_e000_0000_0000),
            intensities: config.intensities,
            block_len: sync.block_len() as u64,
            code: sync.shared_code(),
            x_probe_period: sync.x_probe_period() as u64,
            leakage,
        }
    }

    fn uniform(&self, slot: u64, stream: u64) -> f64 {
        unit(splitmix64(self.seed ^ splitmix64(slot.wrapping_mul(4).wrapping_add(stream))))
    }

    pub fn pulse(&self, slot: u64) -> PulseRecord {
        let intensity = if self.uniform(slot, 0) < self.intensities.p_mu {
            IntensityClass::Signal
        } else {
            IntensityClass::Decoy
        };
        let random_bit = u8::from(self.uniform(slot, 1) >= 0.5);
        let block = slot / self.block_len;
        let pos = slot % self.block_len;
        if pos == 0 {
            let code_pos = (block % self.code.len() as u64) as u32;
            let bit = u8::from(self.code[code_pos as usize] < 0);
            return PulseRecord {
                index: slot,
                symbol: Bb84Symbol::new(Basis::Z, bit),
                intensity,
                is_sync: true,
                sync_code_position: Some(code_pos),
                is_x_probe: false,
            };
        }
        let is_x_probe = pos == 1 && self.x_probe_period > 0 && block.is_multiple_of(self.x_probe_period);
        let basis = if is_x_probe || self.uniform(slot, 2) >= self.intensities.p_z {
            Basis::X
        } else {
            Basis::Z
        };
        PulseRecord {
            index: slot,
            symbol: Bb84Symbol::new(basis, random_bit),
            intensity,
            is_sync: false,
            sync_code_position: None,
            is_x_probe,
        }
    }

    /// Mean photon number actually emitted in `record`'s slot. With decoy
    /// leakage enabled a decoy pulse is brightened by up to the modulator's
    /// finite extinction.
    pub fn mean_photon_number(&self, record: &PulseRecord) -> f64 {
        match record.intensity {
            IntensityClass::Signal => self.intensities.mu,
            IntensityClass::Decoy => match self.leakage {
                Some(max_rel) => self.intensities.nu * (1.0 + self.uniform(record.index, 3) * max_rel),
                None => self.intensities.nu,
            },
        }
    }

    /// Largest mean photon number any slot can carry.
    pub fn max_mean_photon_number(&self) -> f64 {
        let decoy = self.intensities.nu * (1.0 + self.leakage.unwrap_or(0.0));
        self.intensities.mu.max(decoy)
    }
}

impl PulseLookup for PulseSource {
    fn pulse(&self, slot: u64) -> Option<PulseRecord> {
        Some(PulseSource::pulse(self, slot))
    }
}

/// Materializes `count` slots starting at slot 0. The seed for the choices is
/// drawn from `rng`.
pub fn build_pulse_train<R: Rng + ?Sized>(
    config: &LinkConfig,
    sync: &SyncCodeConfig,
    count: usize,
    rng: &mut R,
) -> Result<Vec<PulseRecord>, LinkError> {
    config.validate()?;
    if count < sync.frame_len() {
        return Err(LinkError::TrainTooShort { count, frame: sync.frame_len() });
    }
    let source = PulseSource::new(config, sync, rng.random());
    Ok((0..count as u64).map(|n| source.pulse(n)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn link() -> LinkConfig {
        LinkConfig::new(IntensitySetting::new(0.565, 0.143, 0.798, 0.944).unwrap())
    }

    #[test]
    fn small_frame_layout() {
        let sync = SyncCodeConfig::from_code(vec![1, -1, -1, 1], 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let train = build_pulse_train(&link(), &sync, 8, &mut rng).unwrap();
        let flags: Vec<usize> = train.iter().filter(|p| p.is_sync).map(|p| p.index as usize).collect();
        assert_eq!(flags, vec![0, 2, 4, 6]);
        let positions: Vec<u32> = train.iter().filter_map(|p| p.sync_code_position).collect();
        assert_eq!(positions, vec![0, 1, 2, 3]);
        let bits: Vec<u8> = train.iter().filter(|p| p.is_sync).map(|p| p.symbol.bit).collect();
        assert_eq!(bits, vec![0, 1, 1, 0]);
        assert!(train.iter().filter(|p| p.is_sync).all(|p| p.symbol.basis == Basis::Z));
    }

    #[test]
    fn rejects_train_shorter_than_frame() {
        let sync = SyncCodeConfig::from_code(vec![1, -1, -1, 1], 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(matches!(
            build_pulse_train(&link(), &sync, 7, &mut rng),
            Err(LinkError::TrainTooShort { count: 7, frame: 8 })
        ));
    }

    #[test]
    fn sync_fraction_is_exact() {
        let sync = SyncCodeConfig::random(1000, 9, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let train = build_pulse_train(&link(), &sync, 3 * sync.frame_len(), &mut rng).unwrap();
        let n_sync = train.iter().filter(|p| p.is_sync).count();
        assert_eq!(n_sync * 10, train.len());
        for p in &train {
            assert_eq!(p.is_sync, p.sync_code_position.is_some());
        }
    }

    #[test]
    fn key_slot_statistics_follow_probabilities() {
        let sync = SyncCodeConfig::random(1000, 9, 2).unwrap().with_x_probe_period(0);
        let source = PulseSource::new(&link(), &sync, 9);
        let n = 1_000_000u64;
        let mut z = 0u64;
        let mut signal = 0u64;
        let mut ones = 0u64;
        let mut key = 0u64;
        for slot in 0..n {
            let p = source.pulse(slot);
            if p.is_public() {
                continue;
            }
            key += 1;
            z += u64::from(p.symbol.basis == Basis::Z);
            signal += u64::from(p.intensity == IntensityClass::Signal);
            ones += u64::from(p.symbol.bit);
        }
        let check = |count: u64, p: f64| {
            let sd = (key as f64 * p * (1.0 - p)).sqrt();
            assert!((count as f64 - key as f64 * p).abs() < 4.0 * sd, "{count} vs {p}");
        };
        check(z, 0.944);
        check(signal, 0.798);
        check(ones, 0.5);
    }

    #[test]
    fn x_probe_slots_follow_period() {
        let sync = SyncCodeConfig::random(100, 9, 2).unwrap().with_x_probe_period(3);
        let source = PulseSource::new(&link(), &sync, 9);
        for slot in 0..10_000u64 {
            let p = source.pulse(slot);
            let expected = slot % 10 == 1 && (slot / 10) % 3 == 0;
            assert_eq!(p.is_x_probe, expected);
            if p.is_x_probe {
                assert_eq!(p.symbol.basis, Basis::X);
            }
        }
    }

    #[test]
    fn lazy_source_is_deterministic_and_matches_lookup() {
        let sync = SyncCodeConfig::random(100, 9, 2).unwrap();
        let a = PulseSource::new(&link(), &sync, 5);
        let b = PulseSource::new(&link(), &sync, 5);
        let train: Vec<PulseRecord> = (0..2000).map(|n| a.pulse(n)).collect();
        for n in [0u64, 1, 17, 1999] {
            assert_eq!(a.pulse(n), b.pulse(n));
            assert_eq!(train.pulse(n), Some(a.pulse(n)));
        }
        assert_eq!(train.pulse(2000), None);
    }

    #[test]
    fn decoy_leakage_is_bounded() {
        let cfg = LinkConfig { decoy_leakage: true, ..link() };
        let sync = SyncCodeConfig::random(100, 9, 2).unwrap();
        let source = PulseSource::new(&cfg, &sync, 5);
        let max_rel = 0.565 / 0.143 * 10f64.powf(-1.8);
        for slot in 0..5000 {
            let p = source.pulse(slot);
            let m = source.mean_photon_number(&p);
            match p.intensity {
                IntensityClass::Signal => assert_eq!(m, 0.565),
                IntensityClass::Decoy => assert!(m >= 0.143 && m <= 0.143 * (1.0 + max_rel)),
            }
        }
    }
}
