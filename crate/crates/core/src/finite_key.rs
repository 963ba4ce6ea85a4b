//! One-decoy finite-key analysis.
//!
//! Counts are turned into finite-size adjusted per-intensity yields with a
//! Hoeffding deviation term, bounded with the one-decoy bound set, and fed
//! into the key-length formula. Every clamp applied on the way is surfaced as
//! a [`ClampFlag`].

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::optics::{entropy_unchecked, IntensitySetting, OpticsError};

/// Number of terms in the secrecy budget; each Hoeffding use fails with
/// probability `eps_sec / SECRECY_TERMS`.
pub const SECRECY_TERMS: f64 = 19.0;
/// Constant inside the logarithm of the phase-error correction term.
pub const GAMMA_CONSTANT: f64 = 21.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FiniteKeyError {
    #[error(transparent)]
    Intensity(#[from] OpticsError),
    #[error("invalid counts: {0}")]
    InvalidCounts(String),
    #[error("invalid security parameters: {0}")]
    InvalidSecurity(String),
}

/// Raw and error counts per basis and intensity over one acquisition.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SiftedCounts {
    pub n_z_mu: u64,
    pub n_z_nu: u64,
    pub n_x_mu: u64,
    pub n_x_nu: u64,
    pub m_z_mu: u64,
    pub m_z_nu: u64,
    pub m_x_mu: u64,
    pub m_x_nu: u64,
    /// Acquisition time in seconds.
    pub t: f64,
}

impl SiftedCounts {
    pub fn validate(&self) -> Result<(), FiniteKeyError> {
        let pairs = [
            ("z_mu", self.n_z_mu, self.m_z_mu),
            ("z_nu", self.n_z_nu, self.m_z_nu),
            ("x_mu", self.n_x_mu, self.m_x_mu),
            ("x_nu", self.n_x_nu, self.m_x_nu),
        ];
        let mut problems = Vec::new();
        for (name, n, m) in pairs {
            if m > n {
                problems.push(format!("m_{name}={m} exceeds n_{name}={n}"));
            }
        }
        if !(self.t > 0.0 && self.t.is_finite()) {
            problems.push(format!("t must be positive and finite, got {}", self.t));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(FiniteKeyError::InvalidCounts(problems.join("; ")))
        }
    }

    pub fn n_z(&self) -> u64 {
        self.n_z_mu + self.n_z_nu
    }

    pub fn n_x(&self) -> u64 {
        self.n_x_mu + self.n_x_nu
    }

    pub fn m_z(&self) -> u64 {
        self.m_z_mu + self.m_z_nu
    }

    pub fn m_x(&self) -> u64 {
        self.m_x_mu + self.m_x_nu
    }

    pub fn qber_z(&self) -> f64 {
        ratio(self.m_z(), self.n_z())
    }

    pub fn qber_x(&self) -> f64 {
        ratio(self.m_x(), self.n_x())
    }

    /// Adds counts and durations.
    pub fn accumulate(&mut self, other: &SiftedCounts) {
        self.n_z_mu += other.n_z_mu;
        self.n_z_nu += other.n_z_nu;
        self.n_x_mu += other.n_x_mu;
        self.n_x_nu += other.n_x_nu;
        self.m_z_mu += other.m_z_mu;
        self.m_z_nu += other.m_z_nu;
        self.m_x_mu += other.m_x_mu;
        self.m_x_nu += other.m_x_nu;
        self.t += other.t;
    }

    pub fn z_basis(&self) -> BasisCounts {
        BasisCounts {
            n_mu: self.n_z_mu as f64,
            n_nu: self.n_z_nu as f64,
            m_mu: self.m_z_mu as f64,
            m_nu: self.m_z_nu as f64,
        }
    }

    pub fn x_basis(&self) -> BasisCounts {
        BasisCounts {
            n_mu: self.n_x_mu as f64,
            n_nu: self.n_x_nu as f64,
            m_mu: self.m_x_mu as f64,
            m_nu: self.m_x_nu as f64,
        }
    }
}

fn ratio(m: u64, n: u64) -> f64 {
    if n == 0 {
        0.0
    } else {
        m as f64 / n as f64
    }
}

/// Counts of one basis, as reals so synthetic expected values can be used.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BasisCounts {
    pub n_mu: f64,
    pub n_nu: f64,
    pub m_mu: f64,
    pub m_nu: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SecurityParams {
    #[serde(default = "default_eps_sec")]
    pub eps_sec: f64,
    #[serde(default = "default_eps_cor")]
    pub eps_cor: f64,
    /// Error-correction inefficiency; `leak_EC = f_ec * n_z * h(QBER_z)`.
    #[serde(default = "default_f_ec")]
    pub f_ec: f64,
}

fn default_eps_sec() -> f64 {
    1e-9
}
fn default_eps_cor() -> f64 {
    1e-15
}
fn default_f_ec() -> f64 {
    1.16
}

impl Default for SecurityParams {
    fn default() -> Self {
        Self { eps_sec: default_eps_sec(), eps_cor: default_eps_cor(), f_ec: default_f_ec() }
    }
}

impl SecurityParams {
    pub fn validate(&self) -> Result<(), FiniteKeyError> {
        let mut problems = Vec::new();
        if !(self.eps_sec > 0.0 && self.eps_sec < 1.0) {
            problems.push(format!("eps_sec must lie in (0, 1), got {}", self.eps_sec));
        }
        if !(self.eps_cor > 0.0 && self.eps_cor < 1.0) {
            problems.push(format!("eps_cor must lie in (0, 1), got {}", self.eps_cor));
        }
        if !(self.f_ec >= 1.0 && self.f_ec.is_finite()) {
            problems.push(format!("f_ec must be at least 1, got {}", self.f_ec));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(FiniteKeyError::InvalidSecurity(problems.join("; ")))
        }
    }

    /// Failure probability assigned to each Hoeffding deviation.
    pub fn eps_hoeffding(&self) -> f64 {
        self.eps_sec / SECRECY_TERMS
    }
}

/// Whether statistical fluctuations are accounted for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FiniteSize {
    /// Hoeffding deviations on the counts and the phase-error correction term.
    Hoeffding,
    /// Infinite-key limit: no deviation terms at all.
    Asymptotic,
}

/// Which quantity had to be clamped into its physical range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClampFlag {
    SZ0Lower,
    SZ1Lower,
    SX0Lower,
    SX1Lower,
    VX1UpperNegative,
    VX1UpperAboveSX1,
    PhiAboveHalf,
    PhiDegenerate,
    KeyLengthNegative,
}

/// `tau_n = sum_k p_k e^{-k} k^n / n!` over the signal and decoy intensities.
pub fn tau_n(n: u32, intensities: &IntensitySetting) -> f64 {
    poisson_weight(n, intensities.mu) * intensities.p_mu
        + poisson_weight(n, intensities.nu) * intensities.p_nu()
}

fn poisson_weight(n: u32, mean: f64) -> f64 {
    if mean == 0.0 {
        return if n == 0 { 1.0 } else { 0.0 };
    }
    let log_fact: f64 = (1..=n).map(|k| (k as f64).ln()).sum();
    (-mean + n as f64 * mean.ln() - log_fact).exp()
}

/// `sqrt(n/2 * ln(1/eps))`.
pub fn hoeffding_delta(n: f64, eps: f64) -> f64 {
    if n <= 0.0 {
        0.0
    } else {
        (n / 2.0 * (1.0 / eps).ln()).sqrt()
    }
}

/// One-decoy bounds for a single basis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BasisBounds {
    pub s0_lower: f64,
    pub s0_upper: f64,
    pub s1_lower: f64,
    /// Single-photon error upper bound before clamping.
    pub v1_upper_raw: f64,
    pub s0_lower_clamped: bool,
    pub s1_lower_clamped: bool,
}

/// Bounds for one basis. `eps` is the per-deviation failure probability and
/// `None` selects the infinite-key limit.
pub fn basis_bounds(counts: &BasisCounts, intensities: &IntensitySetting, eps: Option<f64>) -> BasisBounds {
    let (mu, nu) = (intensities.mu, intensities.nu);
    let (p_mu, p_nu) = (intensities.p_mu, intensities.p_nu());
    let tau0 = tau_n(0, intensities);
    let tau1 = tau_n(1, intensities);
    let n_b = counts.n_mu + counts.n_nu;
    let m_b = counts.m_mu + counts.m_nu;
    let (dn, dm) = match eps {
        Some(e) => (hoeffding_delta(n_b, e), hoeffding_delta(m_b, e)),
        None => (0.0, 0.0),
    };
    let scale_mu = mu.exp() / p_mu;
    let scale_nu = nu.exp() / p_nu;
    let n_mu_plus = scale_mu * (counts.n_mu + dn);
    let n_nu_minus = scale_nu * (counts.n_nu - dn);
    let m_mu_plus = scale_mu * (counts.m_mu + dm);
    let m_nu_plus = scale_nu * (counts.m_nu + dm);
    let m_nu_minus = scale_nu * (counts.m_nu - dm);

    let s0_lower_raw = tau0 * (mu * n_nu_minus - nu * n_mu_plus) / (mu - nu);
    // vacuum errors occur at rate 1/2, so the decoy error yield bounds the vacuum yield
    let s0_upper = 2.0 * tau0 * m_nu_plus;
    let s1_lower_raw = tau1 * mu / (nu * (mu - nu))
        * (n_nu_minus - (nu * nu) / (mu * mu) * n_mu_plus - (mu * mu - nu * nu) / (mu * mu) * s0_upper / tau0);
    let v1_upper_raw = tau1 * (m_mu_plus - m_nu_minus) / (mu - nu);

    BasisBounds {
        s0_lower: s0_lower_raw.max(0.0),
        s0_upper,
        s1_lower: s1_lower_raw.max(0.0),
        v1_upper_raw,
        s0_lower_clamped: s0_lower_raw < 0.0,
        s1_lower_clamped: s1_lower_raw < 0.0,
    }
}

/// The bound set entering the key-length formula.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoyBounds {
    pub s_z0_lower: f64,
    pub s_z1_lower: f64,
    pub s_x1_lower: f64,
    /// Clamped to `[0, s_x1_lower]`.
    pub v_x1_upper: f64,
    pub v_x1_upper_raw: f64,
    pub clamped: Vec<ClampFlag>,
}

pub fn decoy_bounds(
    counts: &SiftedCounts,
    intensities: &IntensitySetting,
    sec: &SecurityParams,
    mode: FiniteSize,
) -> Result<DecoyBounds, FiniteKeyError> {
    intensities.validate()?;
    counts.validate()?;
    sec.validate()?;
    let eps = match mode {
        FiniteSize::Hoeffding => Some(sec.eps_hoeffding()),
        FiniteSize::Asymptotic => None,
    };
    let z = basis_bounds(&counts.z_basis(), intensities, eps);
    let x = basis_bounds(&counts.x_basis(), intensities, eps);
    let mut clamped = Vec::new();
    if z.s0_lower_clamped {
        clamped.push(ClampFlag::SZ0Lower);
    }
    if z.s1_lower_clamped {
        clamped.push(ClampFlag::SZ1Lower);
    }
    if x.s0_lower_clamped {
        clamped.push(ClampFlag::SX0Lower);
    }
    if x.s1_lower_clamped {
        clamped.push(ClampFlag::SX1Lower);
    }
    let mut v = x.v1_upper_raw;
    if v < 0.0 {
        clamped.push(ClampFlag::VX1UpperNegative);
        v = 0.0;
    }
    if v > x.s1_lower {
        clamped.push(ClampFlag::VX1UpperAboveSX1);
        v = x.s1_lower;
    }
    Ok(DecoyBounds {
        s_z0_lower: z.s0_lower,
        s_z1_lower: z.s1_lower,
        s_x1_lower: x.s1_lower,
        v_x1_upper: v,
        v_x1_upper_raw: x.v1_upper_raw,
        clamped,
    })
}

/// Finite-size correction to the observed single-photon error rate `b`,
/// with `c`, `d` the single-photon counts of the two bases and `a` the
/// secrecy parameter. Zero when `b` is 0 or 1 and when either count is zero.
pub fn gamma(a: f64, b: f64, c: f64, d: f64) -> f64 {
    let spread = (1.0 - b) * b;
    if spread <= 0.0 || c <= 0.0 || d <= 0.0 {
        return 0.0;
    }
    let log_arg = (c + d) / (c * d * spread) * GAMMA_CONSTANT * GAMMA_CONSTANT / (a * a);
    let radicand = (c + d) * spread / (c * d * std::f64::consts::LN_2) * log_arg.log2();
    radicand.max(0.0).sqrt()
}

/// Upper bound on the Z-basis single-photon phase-error rate, clamped to
/// `[0, 0.5]`. Returns the bound and any clamp applied.
pub fn phase_error_upper(
    s_z1_lower: f64,
    s_x1_lower: f64,
    v_x1_upper: f64,
    sec: &SecurityParams,
    mode: FiniteSize,
) -> (f64, Option<ClampFlag>) {
    if s_x1_lower <= 0.0 {
        return (0.5, Some(ClampFlag::PhiDegenerate));
    }
    let b = (v_x1_upper / s_x1_lower).clamp(0.0, 1.0);
    let correction = match mode {
        FiniteSize::Hoeffding => gamma(sec.eps_sec, b, s_z1_lower, s_x1_lower),
        FiniteSize::Asymptotic => 0.0,
    };
    let phi = b + correction;
    if phi > 0.5 {
        (0.5, Some(ClampFlag::PhiAboveHalf))
    } else {
        (phi, None)
    }
}

/// Bits disclosed by error correction.
pub fn leak_ec(n_z: u64, qber_z: f64, f_ec: f64) -> f64 {
    f_ec * n_z as f64 * entropy_unchecked(qber_z)
}

/// Secret key length in bits and the corresponding rate over `t`.
pub fn key_length(
    bounds: &DecoyBounds,
    phi_z_upper: f64,
    counts: &SiftedCounts,
    sec: &SecurityParams,
) -> (u64, f64, bool) {
    let leak = leak_ec(counts.n_z(), counts.qber_z(), sec.f_ec);
    let raw = bounds.s_z0_lower + bounds.s_z1_lower * (1.0 - entropy_unchecked(phi_z_upper))
        - leak
        - 6.0 * (SECRECY_TERMS / sec.eps_sec).log2()
        - (2.0 / sec.eps_cor).log2();
    let clamped = raw < 0.0;
    let l = if clamped { 0 } else { raw.floor() as u64 };
    let skr = if counts.t > 0.0 { l as f64 / counts.t } else { 0.0 };
    (l, skr, clamped)
}

/// Full finite-key report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyRateReport {
    pub intensities: IntensitySetting,
    pub security: SecurityParams,
    pub tau_0: f64,
    pub tau_1: f64,
    pub n_z: u64,
    pub t: f64,
    pub s_z0_lower: f64,
    pub s_z1_lower: f64,
    pub s_x1_lower: f64,
    pub v_x1_upper: f64,
    pub v_x1_upper_raw: f64,
    pub phi_z_upper: f64,
    pub leak_ec: f64,
    pub key_length: u64,
    pub skr: f64,
    pub qber_z: f64,
    pub qber_x: f64,
    pub clamped: Vec<ClampFlag>,
}

pub fn compute_key_rate(
    counts: &SiftedCounts,
    intensities: &IntensitySetting,
    sec: &SecurityParams,
) -> Result<KeyRateReport, FiniteKeyError> {
    compute_key_rate_with(counts, intensities, sec, FiniteSize::Hoeffding)
}

pub fn compute_key_rate_with(
    counts: &SiftedCounts,
    intensities: &IntensitySetting,
    sec: &SecurityParams,
    mode: FiniteSize,
) -> Result<KeyRateReport, FiniteKeyError> {
    let bounds = decoy_bounds(counts, intensities, sec, mode)?;
    let (phi, phi_flag) =
        phase_error_upper(bounds.s_z1_lower, bounds.s_x1_lower, bounds.v_x1_upper, sec, mode);
    let (l, skr, l_clamped) = key_length(&bounds, phi, counts, sec);
    let mut clamped = bounds.clamped.clone();
    clamped.extend(phi_flag);
    if l_clamped {
        clamped.push(ClampFlag::KeyLengthNegative);
    }
    Ok(KeyRateReport {
        intensities: *intensities,
        security: *sec,
        tau_0: tau_n(0, intensities),
        tau_1: tau_n(1, intensities),
        n_z: counts.n_z(),
        t: counts.t,
        s_z0_lower: bounds.s_z0_lower,
        s_z1_lower: bounds.s_z1_lower,
        s_x1_lower: bounds.s_x1_lower,
        v_x1_upper: bounds.v_x1_upper,
        v_x1_upper_raw: bounds.v_x1_upper_raw,
        phi_z_upper: phi,
        leak_ec: leak_ec(counts.n_z(), counts.qber_z(), sec.f_ec),
        key_length: l,
        skr,
        qber_z: counts.qber_z(),
        qber_x: counts.qber_x(),
        clamped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn row_100km() -> (SiftedCounts, IntensitySetting) {
        (
            SiftedCounts {
                n_z_mu: 9_419_400,
                m_z_mu: 70_873,
                n_x_mu: 557_703,
                m_x_mu: 2_576,
                n_z_nu: 602_441,
                m_z_nu: 5_644,
                n_x_nu: 35_140,
                m_x_nu: 200,
                t: 317.8,
            },
            IntensitySetting::new(0.565, 0.143, 0.798, 0.944).unwrap(),
        )
    }

    #[test]
    fn tau_1_direct_evaluation() {
        let (_, i) = row_100km();
        let expected = 0.798 * (-0.565f64).exp() * 0.565 + 0.202 * (-0.143f64).exp() * 0.143;
        assert!((tau_n(1, &i) - expected).abs() < 1e-15);
        assert!((tau_n(1, &i) - 0.2812).abs() < 5e-4);
    }

    #[test]
    fn tau_0_is_one_for_vacuum_signal() {
        let i = IntensitySetting { mu: 0.0, nu: 0.0, p_mu: 0.5, p_z: 0.5 };
        assert_eq!(tau_n(0, &i), 1.0);
        assert_eq!(tau_n(1, &i), 0.0);
    }

    #[test]
    fn tau_normalization() {
        for &(mu, nu, p) in &[(0.565, 0.143, 0.798), (0.9, 0.05, 0.3), (0.2, 0.1, 0.5)] {
            let i = IntensitySetting::new(mu, nu, p, 0.5).unwrap();
            let total: f64 = (0..=50).map(|n| tau_n(n, &i)).sum();
            assert!((total - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn hoeffding_examples() {
        assert_eq!(hoeffding_delta(0.0, 1e-10), 0.0);
        let d = hoeffding_delta(1e7, 1e-10);
        assert!((d - (5e6 * 1e10f64.ln()).sqrt()).abs() < 1e-9);
        assert!((d / 10_731.0 - 1.0).abs() < 1e-3);
        assert!(hoeffding_delta(2e7, 1e-10) > d);
        assert!(hoeffding_delta(1e7, 1e-12) > d);
    }

    #[test]
    fn table_row_100km_single_photon_bound() {
        let (c, i) = row_100km();
        let r = compute_key_rate(&c, &i, &SecurityParams::default()).unwrap();
        assert!((r.s_z1_lower / 5_155_932.0 - 1.0).abs() < 0.02, "{}", r.s_z1_lower);
        assert!((r.phi_z_upper / 0.0177 - 1.0).abs() < 0.10, "{}", r.phi_z_upper);
        assert!((r.key_length as f64 / 3_742_736.0 - 1.0).abs() < 0.05);
        assert!((r.skr / 1.18e4 - 1.0).abs() < 0.05);
    }

    #[test]
    fn zero_counts_give_zero_key() {
        let c = SiftedCounts { t: 1.0, ..SiftedCounts::default() };
        let (_, i) = row_100km();
        let r = compute_key_rate(&c, &i, &SecurityParams::default()).unwrap();
        assert_eq!(r.s_z0_lower, 0.0);
        assert_eq!(r.s_z1_lower, 0.0);
        assert_eq!(r.s_x1_lower, 0.0);
        assert_eq!(r.v_x1_upper, 0.0);
        assert_eq!(r.key_length, 0);
        assert_eq!(r.skr, 0.0);
        assert!(r.clamped.contains(&ClampFlag::KeyLengthNegative));
    }

    #[test]
    fn rejects_invalid_inputs() {
        let (mut c, i) = row_100km();
        let swapped = IntensitySetting { mu: 0.1, nu: 0.2, ..i };
        assert!(compute_key_rate(&c, &swapped, &SecurityParams::default()).is_err());
        c.m_z_mu = c.n_z_mu + 1;
        assert!(compute_key_rate(&c, &i, &SecurityParams::default()).is_err());
        let (c, _) = row_100km();
        let sec = SecurityParams { f_ec: 0.9, ..SecurityParams::default() };
        assert!(compute_key_rate(&c, &i, &sec).is_err());
    }

    #[test]
    fn no_errors_and_no_fluctuations_give_zero_phase_error() {
        let sec = SecurityParams::default();
        let (phi, _) = phase_error_upper(1e6, 5e4, 0.0, &sec, FiniteSize::Asymptotic);
        assert_eq!(phi, 0.0);
        let (phi, _) = phase_error_upper(1e6, 5e4, 0.0, &sec, FiniteSize::Hoeffding);
        assert_eq!(phi, gamma(sec.eps_sec, 0.0, 1e6, 5e4));
        assert_eq!(phi, 0.0);
    }

    #[test]
    fn degenerate_x_bound_clamps_phase_error() {
        let (phi, flag) = phase_error_upper(1e6, 0.0, 0.0, &SecurityParams::default(), FiniteSize::Hoeffding);
        assert_eq!(phi, 0.5);
        assert_eq!(flag, Some(ClampFlag::PhiDegenerate));
    }

    #[test]
    fn gamma_decreases_with_sample_sizes() {
        let a = 1e-9;
        for &b in &[0.005, 0.02, 0.1, 0.3] {
            let mut prev_c = f64::INFINITY;
            for k in 0..12 {
                let c = 1e4 * 2f64.powi(k);
                let g = gamma(a, b, c, 1e5);
                assert!(g < prev_c);
                prev_c = g;
            }
            let mut prev_d = f64::INFINITY;
            for k in 0..12 {
                let d = 1e4 * 2f64.powi(k);
                let g = gamma(a, b, 1e6, d);
                assert!(g < prev_d);
                prev_d = g;
            }
        }
    }

    #[test]
    fn physicality_of_vacuum_plus_single_photon() {
        let (c, i) = row_100km();
        let b = decoy_bounds(&c, &i, &SecurityParams::default(), FiniteSize::Hoeffding).unwrap();
        assert!(b.s_z0_lower + b.s_z1_lower <= c.n_z() as f64);
    }

    #[test]
    fn key_length_monotone_in_security_and_errors() {
        let (c, i) = row_100km();
        let base = compute_key_rate(&c, &i, &SecurityParams::default()).unwrap();
        let mut prev = base.key_length;
        for exp in 10..=20 {
            let sec = SecurityParams { eps_sec: 10f64.powi(-exp), ..SecurityParams::default() };
            let r = compute_key_rate(&c, &i, &sec).unwrap();
            assert!(r.key_length <= prev);
            prev = r.key_length;
        }
        let mut prev = base.key_length;
        for extra in 1..=10u64 {
            let worse = SiftedCounts { m_z_mu: c.m_z_mu + extra * 5_000, ..c };
            let r = compute_key_rate(&worse, &i, &SecurityParams::default()).unwrap();
            assert!(r.key_length <= prev);
            prev = r.key_length;
        }
        let bounds = decoy_bounds(&c, &i, &SecurityParams::default(), FiniteSize::Hoeffding).unwrap();
        let mut prev = u64::MAX;
        for k in 0..=25 {
            let phi = 0.02 * k as f64;
            let (l, _, _) = key_length(&bounds, phi, &c, &SecurityParams::default());
            assert!(l <= prev);
            prev = l;
        }
    }

    /// Expected counts from per-photon-number yields `y[n]` and error
    /// probabilities `e[n]` for `pulses` pulses sent in one basis.
    fn synthetic(i: &IntensitySetting, pulses: f64, y: &[f64], e: &[f64]) -> BasisCounts {
        let weighted = |k: f64, p: f64, f: &dyn Fn(usize) -> f64| {
            (0..y.len()).map(|n| p * poisson_weight(n as u32, k) * f(n)).sum::<f64>() * pulses
        };
        BasisCounts {
            n_mu: weighted(i.mu, i.p_mu, &|n| y[n]),
            n_nu: weighted(i.nu, i.p_nu(), &|n| y[n]),
            m_mu: weighted(i.mu, i.p_mu, &|n| y[n] * e[n]),
            m_nu: weighted(i.nu, i.p_nu(), &|n| y[n] * e[n]),
        }
    }

    #[test]
    fn infinite_key_single_photon_bound_is_tight_for_weak_pulses() {
        let i = IntensitySetting::new(0.1, 0.02, 0.8, 0.944).unwrap();
        let eta: f64 = 1e-3;
        let y: Vec<f64> = (0..40).map(|n| 1e-7 + 1.0 - (1.0 - eta).powi(n)).collect();
        // errors only from the vacuum component, which the vacuum bound absorbs exactly
        let e: Vec<f64> = (0..40).map(|n| if n == 0 { 0.5 } else { 0.0 }).collect();
        let c = synthetic(&i, 1e10, &y, &e);
        let b = basis_bounds(&c, &i, None);
        let truth = tau_n(1, &i) * y[1] * 1e10;
        assert!(b.s1_lower <= truth);
        assert!((b.s1_lower / truth - 1.0).abs() < 0.01, "{} vs {truth}", b.s1_lower);
    }

    #[test]
    fn infinite_key_bound_matches_closed_form_for_linear_yields() {
        // with Y_n = n * eta and no errors the bound equals
        // tau_1 * eta * (mu e^nu - nu e^mu) / (mu - nu) per pulse
        let i = IntensitySetting::new(0.565, 0.143, 0.798, 0.944).unwrap();
        let eta = 1e-3;
        let y: Vec<f64> = (0..60).map(|n| n as f64 * eta).collect();
        let e = vec![0.0; 60];
        let c = synthetic(&i, 1.0, &y, &e);
        let b = basis_bounds(&c, &i, None);
        let (mu, nu) = (i.mu, i.nu);
        let expected = tau_n(1, &i) * eta * (mu * nu.exp() - nu * mu.exp()) / (mu - nu);
        assert!((b.s1_lower / expected - 1.0).abs() < 1e-9);
        assert!(b.s1_lower < tau_n(1, &i) * eta);
    }

    #[test]
    fn bounds_bracket_truth_on_random_yield_models() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..1000 {
            let nu = rng.random_range(0.02..0.4);
            let mu = rng.random_range(nu + 0.05..1.0);
            let i = IntensitySetting::new(mu, nu, rng.random_range(0.1..0.9), 0.5).unwrap();
            let y0 = rng.random_range(0.0..1e-3);
            let mut y = vec![y0];
            let mut e = vec![0.5];
            for _ in 1..30 {
                y.push(rng.random_range(0.0..1.0));
                e.push(rng.random_range(0.0..0.5));
            }
            let pulses = 1e9;
            let c = synthetic(&i, pulses, &y, &e);
            let b = basis_bounds(&c, &i, None);
            let tau0 = tau_n(0, &i);
            let tau1 = tau_n(1, &i);
            let s0 = tau0 * y[0] * pulses;
            let s1 = tau1 * y[1] * pulses;
            let v1 = tau1 * y[1] * e[1] * pulses;
            let tol = 1e-9 * pulses;
            assert!(b.s0_lower <= s0 + tol);
            assert!(b.s0_upper >= s0 - tol);
            assert!(b.s1_lower <= s1 + tol);
            assert!(b.v1_upper_raw >= v1 - tol);
        }
    }

    #[test]
    fn gamma_constant_choice_is_minor_at_table_sizes() {
        // the alternative constant 19 instead of 21 changes the key length by far less than 5%
        let (c, i) = row_100km();
        let sec = SecurityParams::default();
        let bounds = decoy_bounds(&c, &i, &sec, FiniteSize::Hoeffding).unwrap();
        let b = bounds.v_x1_upper / bounds.s_x1_lower;
        let g21 = gamma(sec.eps_sec, b, bounds.s_z1_lower, bounds.s_x1_lower);
        let g19 = gamma(sec.eps_sec * 21.0 / 19.0, b, bounds.s_z1_lower, bounds.s_x1_lower);
        let (l21, _, _) = key_length(&bounds, b + g21, &c, &sec);
        let (l19, _, _) = key_length(&bounds, b + g19, &c, &sec);
        assert!((l21 as f64 / l19 as f64 - 1.0).abs() < 0.05);
    }

    proptest! {
        #[test]
        fn report_is_deterministic_and_finite(
            n in 0u64..10_000_000,
            frac_nu in 0.0f64..0.3,
            q in 0.0f64..0.5,
            x_frac in 0.0f64..0.3,
        ) {
            let n_nu = (n as f64 * frac_nu) as u64;
            let n_x = (n as f64 * x_frac) as u64;
            let c = SiftedCounts {
                n_z_mu: n, n_z_nu: n_nu, n_x_mu: n_x, n_x_nu: (n_x as f64 * frac_nu) as u64,
                m_z_mu: (n as f64 * q) as u64, m_z_nu: (n_nu as f64 * q) as u64,
                m_x_mu: (n_x as f64 * q) as u64, m_x_nu: (n_x as f64 * frac_nu * q) as u64,
                t: 10.0,
            };
            let i = IntensitySetting::new(0.565, 0.143, 0.798, 0.944).unwrap();
            let a = compute_key_rate(&c, &i, &SecurityParams::default()).unwrap();
            let b = compute_key_rate(&c, &i, &SecurityParams::default()).unwrap();
            prop_assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
            prop_assert!(a.phi_z_upper >= 0.0 && a.phi_z_upper <= 0.5);
            prop_assert!(a.skr.is_finite() && a.leak_ec.is_finite());
            prop_assert!(a.s_z0_lower >= 0.0 && a.s_z1_lower >= 0.0 && a.s_x1_lower >= 0.0);
            prop_assert!(a.v_x1_upper >= 0.0 && a.v_x1_upper <= a.s_x1_lower);
        }

        #[test]
        fn bounds_are_physical_for_channel_counts(
            log_eta in -4.0f64..-0.5,
            dark in 0.0f64..1e-5,
            err in 0.0f64..0.05,
            log_pulses in 8.0f64..11.0,
        ) {
            // expected counts of a lossy channel with dark counts, rounded
            let i = IntensitySetting::new(0.565, 0.143, 0.798, 0.944).unwrap();
            let eta = 10f64.powf(log_eta);
            let y: Vec<f64> = (0..40).map(|n| dark + (1.0 - dark) * (1.0 - (1.0 - eta).powi(n))).collect();
            let e: Vec<f64> = (0..40)
                .map(|n| if n == 0 { 0.5 } else { (dark * 0.5 + (y[n] - dark) * err) / y[n] })
                .collect();
            let pulses = 10f64.powf(log_pulses);
            let z = synthetic(&i, pulses * i.p_z, &y, &e);
            let x = synthetic(&i, pulses * i.p_x(), &y, &e);
            let c = SiftedCounts {
                n_z_mu: z.n_mu.round() as u64, n_z_nu: z.n_nu.round() as u64,
                m_z_mu: z.m_mu.round() as u64, m_z_nu: z.m_nu.round() as u64,
                n_x_mu: x.n_mu.round() as u64, n_x_nu: x.n_nu.round() as u64,
                m_x_mu: x.m_mu.round() as u64, m_x_nu: x.m_nu.round() as u64,
                t: 1.0,
            };
            let r = compute_key_rate(&c, &i, &SecurityParams::default()).unwrap();
            prop_assert!(r.s_z0_lower + r.s_z1_lower <= c.n_z() as f64);
        }
    }
}
