//! Public correlation code and frame layout.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::correlate::circular_cross_correlation;
use super::SyncError;

/// How the public code is generated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CodeKind {
    /// Seeded uniform +-1 sequence of the configured length.
    Random,
    /// Maximal-length LFSR sequence; the length must be `2^n - 1`.
    MSequence,
}

/// Serialized form of [`SyncCodeConfig`]; the code itself is regenerated from
/// the seed on load.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyncSettings {
    /// Code length `L`.
    #[serde(default = "default_length")]
    pub length: usize,
    /// Random slots following each code bit, `M`.
    #[serde(default = "default_random_bits")]
    pub random_bits: usize,
    #[serde(default = "default_kind")]
    pub kind: CodeKind,
    #[serde(default = "default_code_seed")]
    pub code_seed: u64,
    /// Every `x_probe_period`-th block carries a public X-basis probe slot
    /// right after the code bit. Zero disables X probing.
    #[serde(default = "default_x_probe_period")]
    pub x_probe_period: u32,
}

fn default_length() -> usize {
    50_000
}
fn default_random_bits() -> usize {
    9
}
fn default_kind() -> CodeKind {
    CodeKind::Random
}
fn default_code_seed() -> u64 {
    0x5eed_c0de
}
fn default_x_probe_period() -> u32 {
    1
}

impl Default for SyncSettings {
    fn default() -> Self {
        Self {
            length: default_length(),
            random_bits: default_random_bits(),
            kind: default_kind(),
            code_seed: default_code_seed(),
            x_probe_period: default_x_probe_period(),
        }
    }
}

/// Frame layout plus the public +-1 code `s^A`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SyncSettings", into = "SyncSettings")]
pub struct SyncCodeConfig {
    settings: SyncSettings,
    code: Arc<[i8]>,
}

impl TryFrom<SyncSettings> for SyncCodeConfig {
    type Error = SyncError;

    fn try_from(settings: SyncSettings) -> Result<Self, SyncError> {
        SyncCodeConfig::from_settings(settings)
    }
}

impl From<SyncCodeConfig> for SyncSettings {
    fn from(c: SyncCodeConfig) -> Self {
        c.settings
    }
}

impl Default for SyncCodeConfig {
    fn default() -> Self {
        Self::from_settings(SyncSettings::default()).expect("default sync code is valid")
    }
}

impl SyncCodeConfig {
    pub fn from_settings(settings: SyncSettings) -> Result<Self, SyncError> {
        if settings.length == 0 {
            return Err(SyncError::InvalidCode("code length must be at least 1".into()));
        }
        let code: Vec<i8> = match settings.kind {
            CodeKind::Random => random_code(settings.length, settings.code_seed),
            CodeKind::MSequence => {
                let degree = (settings.length + 1).trailing_zeros();
                if (1usize << degree) - 1 != settings.length {
                    return Err(SyncError::InvalidCode(format!(
                        "m-sequence length must be 2^n - 1, got {}",
                        settings.length
                    )));
                }
                m_sequence(degree)?
            }
        };
        let sidelobe = max_sidelobe(&code);
        let bound = 5.0 * (code.len() as f64).sqrt();
        if code.len() > 1 && sidelobe as f64 > bound {
            return Err(SyncError::InvalidCode(format!(
                "autocorrelation sidelobe {sidelobe} exceeds 5*sqrt(L) = {bound:.1}"
            )));
        }
        Ok(Self { settings, code: code.into() })
    }

    /// Random code of length `length` with `random_bits` random slots per bit.
    pub fn random(length: usize, random_bits: usize, seed: u64) -> Result<Self, SyncError> {
        Self::from_settings(SyncSettings {
            length,
            random_bits,
            kind: CodeKind::Random,
            code_seed: seed,
            ..SyncSettings::default()
        })
    }

    /// Same layout with X probing switched off or changed.
    pub fn with_x_probe_period(mut self, period: u32) -> Self {
        self.settings.x_probe_period = period;
        self
    }

    /// Uses an explicit code (entries must be +-1). Intended for tests and
    /// replaying externally generated codes; no sidelobe check is applied.
    pub fn from_code(code: Vec<i8>, random_bits: usize) -> Result<Self, SyncError> {
        if code.is_empty() || code.iter().any(|&c| c != 1 && c != -1) {
            return Err(SyncError::InvalidCode("code entries must be +1 or -1".into()));
        }
        Ok(Self {
            settings: SyncSettings { length: code.len(), random_bits, ..SyncSettings::default() },
            code: code.into(),
        })
    }

    pub fn settings(&self) -> &SyncSettings {
        &self.settings
    }

    /// `L`.
    pub fn length(&self) -> usize {
        self.code.len()
    }

    /// `M`.
    pub fn random_bits(&self) -> usize {
        self.settings.random_bits
    }

    /// `M + 1`.
    pub fn block_len(&self) -> usize {
        self.settings.random_bits + 1
    }

    /// `N_f = (M + 1) L`.
    pub fn frame_len(&self) -> usize {
        self.block_len() * self.length()
    }

    pub fn x_probe_period(&self) -> u32 {
        self.settings.x_probe_period
    }

    pub fn code(&self) -> &[i8] {
        &self.code
    }

    pub(crate) fn shared_code(&self) -> Arc<[i8]> {
        Arc::clone(&self.code)
    }
}

fn random_code(length: usize, seed: u64) -> Vec<i8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..length).map(|_| if rng.random::<bool>() { 1 } else { -1 }).collect()
}

/// Feedback taps (1-based) of primitive polynomials for Fibonacci LFSRs.
const LFSR_TAPS: &[(u32, &[u32])] = &[
    (2, &[2, 1]),
    (3, &[3, 2]),
    (4, &[4, 3]),
    (5, &[5, 3]),
    (6, &[6, 5]),
    (7, &[7, 6]),
    (8, &[8, 6, 5, 4]),
    (9, &[9, 5]),
    (10, &[10, 7]),
    (11, &[11, 9]),
    (12, &[12, 6, 4, 1]),
    (13, &[13, 4, 3, 1]),
    (14, &[14, 5, 3, 1]),
    (15, &[15, 14]),
    (16, &[16, 15, 13, 4]),
    (17, &[17, 14]),
    (18, &[18, 11]),
    (19, &[19, 6, 2, 1]),
    (20, &[20, 17]),
];

/// Maximal-length sequence of period `2^degree - 1`, mapped 0 -> +1, 1 -> -1.
pub fn m_sequence(degree: u32) -> Result<Vec<i8>, SyncError> {
    let taps = LFSR_TAPS
        .iter()
        .find(|(d, _)| *d == degree)
        .map(|(_, t)| *t)
        .ok_or_else(|| SyncError::InvalidCode(format!("no m-sequence generator for degree {degree}")))?;
    let len = (1usize << degree) - 1;
    let mut state: u32 = 1;
    let mut out = Vec::with_capacity(len);
    for _ in 0..len {
        let bit = state & 1;
        out.push(if bit == 0 { 1 } else { -1 });
        let fb = taps.iter().fold(0, |acc, &t| acc ^ ((state >> (degree - t)) & 1));
        state = (state >> 1) | (fb << (degree - 1));
    }
    Ok(out)
}

/// Largest off-peak magnitude of the circular autocorrelation.
pub fn max_sidelobe(code: &[i8]) -> i64 {
    let row: Vec<i32> = code.iter().map(|&c| c as i32).collect();
    let corr = circular_cross_correlation(&row, code);
    corr.iter().skip(1).map(|c| c.abs()).max().unwrap_or(0)
}

/// Outcome of the `sqrt(L * eta) >= 10` rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "status", content = "frames")]
pub enum Admissibility {
    Ok,
    /// Minimal number of accumulated frames `k` with `sqrt(L k eta) >= 10`.
    Repeat(u64),
    Reject,
}

/// `eta` is the probability that one code slot produces a usable Z-basis
/// detection at Bob.
pub fn admissibility_check(length: usize, eta: f64) -> Admissibility {
    if length == 0 || !(eta > 0.0 && eta <= 1.0) {
        return Admissibility::Reject;
    }
    let l_eta = length as f64 * eta;
    // sqrt(L k eta) >= 10  <=>  k >= 100 / (L eta); tolerate rounding at the boundary
    let need = 100.0 / l_eta;
    if need <= 1.0 + 1e-9 {
        return Admissibility::Ok;
    }
    let mut k = need.ceil() as u64;
    if (k - 1) as f64 >= need - 1e-9 {
        k -= 1;
    }
    Admissibility::Repeat(k.max(2))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_length_matches_layout() {
        let c = SyncCodeConfig::random(50_000, 9, 1).unwrap();
        assert_eq!(c.frame_len(), 500_000);
        assert_eq!(c.block_len(), 10);
    }

    #[test]
    fn random_code_meets_sidelobe_bound() {
        let c = SyncCodeConfig::random(4096, 9, 3).unwrap();
        assert!(c.code().iter().all(|&v| v == 1 || v == -1));
        assert!((max_sidelobe(c.code()) as f64) <= 5.0 * 64.0);
    }

    #[test]
    fn m_sequences_are_maximal() {
        for degree in 2..=14 {
            let seq = m_sequence(degree).unwrap();
            let len = (1usize << degree) - 1;
            assert_eq!(seq.len(), len);
            // ideal two-valued autocorrelation: L at zero lag, -1 elsewhere
            let row: Vec<i32> = seq.iter().map(|&c| c as i32).collect();
            let corr = circular_cross_correlation(&row, &seq);
            assert_eq!(corr[0], len as i64, "degree {degree}");
            assert!(corr[1..].iter().all(|&c| c == -1), "degree {degree}");
        }
    }

    #[test]
    fn m_sequence_config_checks_length() {
        let ok = SyncCodeConfig::from_settings(SyncSettings {
            length: 1023,
            kind: CodeKind::MSequence,
            ..SyncSettings::default()
        });
        assert!(ok.is_ok());
        let bad = SyncCodeConfig::from_settings(SyncSettings {
            length: 1000,
            kind: CodeKind::MSequence,
            ..SyncSettings::default()
        });
        assert!(bad.is_err());
    }

    #[test]
    fn admissibility_examples() {
        assert_eq!(admissibility_check(50_000, 2e-3), Admissibility::Ok);
        assert_eq!(admissibility_check(50_000, 5e-4), Admissibility::Repeat(4));
        assert_eq!(admissibility_check(100, 1.0), Admissibility::Ok);
        assert_eq!(admissibility_check(100, 0.0), Admissibility::Reject);
        assert_eq!(admissibility_check(0, 0.5), Admissibility::Reject);
    }

    #[test]
    fn admissibility_repeat_is_minimal() {
        for &(l, eta) in &[(50_000usize, 3.3e-5), (1000, 0.013), (5000, 7e-4)] {
            match admissibility_check(l, eta) {
                Admissibility::Repeat(k) => {
                    assert!((l as f64 * k as f64 * eta).sqrt() >= 10.0 - 1e-9);
                    assert!((l as f64 * (k - 1) as f64 * eta).sqrt() < 10.0);
                }
                other => panic!("expected repeat, got {other:?}"),
            }
        }
    }

    #[test]
    fn settings_round_trip_regenerates_code() {
        let c = SyncCodeConfig::random(1000, 4, 11).unwrap();
        let json = serde_json::to_string(&c).unwrap();
        let back: SyncCodeConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, c);
    }
}
