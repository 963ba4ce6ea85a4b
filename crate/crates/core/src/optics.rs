//! Polarization qubit algebra: Jones vectors, 2x2 unitaries, projective
//! measurements, photon-number sampling and the binary entropy.
//!
//! Jones vectors are written in the (H, V) basis. The four BB84 states are
//! `(|H> + e^{i theta}|V>)/sqrt(2)` with `theta in {0, pi}` labelled basis Z and
//! `theta in {pi/2, 3pi/2}` labelled basis X. On the Poincare sphere the Z
//! states sit on the +-S2 axis and the X states on the +-S3 axis.

use std::f64::consts::{FRAC_1_SQRT_2, FRAC_PI_2, PI};
use std::fmt;
use std::ops::Mul;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance on the state norm.
pub const NORM_TOLERANCE: f64 = 1e-12;
/// Elementwise tolerance on `U^dagger U = I`.
pub const UNITARY_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OpticsError {
    #[error("probability {0} outside [0, 1]")]
    ProbabilityOutOfRange(f64),
    #[error("state norm {0} differs from 1")]
    NotNormalized(f64),
    #[error("matrix is not unitary (max deviation {0:.3e})")]
    NotUnitary(f64),
    #[error("negative mean photon number {0}")]
    NegativeMean(f64),
    #[error("invalid intensity setting: {0}")]
    InvalidIntensity(String),
}

/// Measurement / preparation basis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Basis {
    Z,
    X,
}

impl Basis {
    pub const ALL: [Basis; 2] = [Basis::Z, Basis::X];

    pub fn index(self) -> usize {
        match self {
            Basis::Z => 0,
            Basis::X => 1,
        }
    }
}

/// One of the four BB84 symbols.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Bb84Symbol {
    pub basis: Basis,
    /// Encoded bit, 0 or 1.
    pub bit: u8,
}

impl Bb84Symbol {
    pub const ALL: [Bb84Symbol; 4] = [
        Bb84Symbol { basis: Basis::Z, bit: 0 },
        Bb84Symbol { basis: Basis::Z, bit: 1 },
        Bb84Symbol { basis: Basis::X, bit: 0 },
        Bb84Symbol { basis: Basis::X, bit: 1 },
    ];

    pub fn new(basis: Basis, bit: u8) -> Self {
        assert!(bit <= 1, "bit must be 0 or 1");
        Self { basis, bit }
    }

    /// Relative phase between |V> and |H>.
    pub fn theta(self) -> f64 {
        match (self.basis, self.bit) {
            (Basis::Z, 0) => 0.0,
            (Basis::X, 0) => FRAC_PI_2,
            (Basis::Z, _) => PI,
            (Basis::X, _) => 3.0 * FRAC_PI_2,
        }
    }

    /// Inverse of [`Bb84Symbol::theta`]; `None` for angles outside the four
    /// encoding phases.
    pub fn from_theta(theta: f64) -> Option<Self> {
        let quarter = (theta.rem_euclid(2.0 * PI) / FRAC_PI_2).round() as i64 % 4;
        let snapped = quarter as f64 * FRAC_PI_2;
        if (theta.rem_euclid(2.0 * PI) - snapped).abs() > 1e-9
            && (theta.rem_euclid(2.0 * PI) - 2.0 * PI).abs() > 1e-9
        {
            return None;
        }
        Some(match quarter {
            0 => Bb84Symbol::new(Basis::Z, 0),
            1 => Bb84Symbol::new(Basis::X, 0),
            2 => Bb84Symbol::new(Basis::Z, 1),
            _ => Bb84Symbol::new(Basis::X, 1),
        })
    }
}

/// Pure polarization state (Jones vector).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolarizationState {
    pub amplitude_h: Complex64,
    pub amplitude_v: Complex64,
}

impl PolarizationState {
    pub fn new(amplitude_h: Complex64, amplitude_v: Complex64) -> Result<Self, OpticsError> {
        let s = Self { amplitude_h, amplitude_v };
        let norm = s.norm_sqr();
        if (norm - 1.0).abs() > NORM_TOLERANCE {
            return Err(OpticsError::NotNormalized(norm));
        }
        Ok(s)
    }

    /// Builds a state from arbitrary non-zero amplitudes, rescaling to unit norm.
    pub fn normalized(amplitude_h: Complex64, amplitude_v: Complex64) -> Self {
        let n = (amplitude_h.norm_sqr() + amplitude_v.norm_sqr()).sqrt();
        Self { amplitude_h: amplitude_h / n, amplitude_v: amplitude_v / n }
    }

    pub fn norm_sqr(&self) -> f64 {
        self.amplitude_h.norm_sqr() + self.amplitude_v.norm_sqr()
    }

    /// `<self|other>`.
    pub fn inner(&self, other: &PolarizationState) -> Complex64 {
        self.amplitude_h.conj() * other.amplitude_h + self.amplitude_v.conj() * other.amplitude_v
    }

    /// `|<self|other>|^2`, insensitive to global phase.
    pub fn overlap(&self, other: &PolarizationState) -> f64 {
        self.inner(other).norm_sqr()
    }
}

/// `(|H> + e^{i theta}|V>)/sqrt(2)` for the symbol's theta.
pub fn symbol_to_state(symbol: Bb84Symbol) -> PolarizationState {
    let theta = symbol.theta();
    PolarizationState {
        amplitude_h: Complex64::new(FRAC_1_SQRT_2, 0.0),
        amplitude_v: Complex64::from_polar(FRAC_1_SQRT_2, theta),
    }
}

/// 2x2 unitary acting on Jones vectors, row-major.
#[derive(Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolarizationUnitary {
    m: [[Complex64; 2]; 2],
}

impl fmt::Debug for PolarizationUnitary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[[{}, {}], [{}, {}]]", self.m[0][0], self.m[0][1], self.m[1][0], self.m[1][1])
    }
}

impl PolarizationUnitary {
    pub fn identity() -> Self {
        let one = Complex64::new(1.0, 0.0);
        let zero = Complex64::new(0.0, 0.0);
        Self { m: [[one, zero], [zero, one]] }
    }

    /// Validating constructor.
    pub fn from_matrix(m: [[Complex64; 2]; 2]) -> Result<Self, OpticsError> {
        let u = Self { m };
        let dev = u.unitarity_deviation();
        if dev > UNITARY_TOLERANCE {
            return Err(OpticsError::NotUnitary(dev));
        }
        Ok(u)
    }

    pub fn matrix(&self) -> [[Complex64; 2]; 2] {
        self.m
    }

    /// `diag(1, e^{i phi})`: rotation about S1 by `phi` on the Poincare sphere.
    pub fn phase(phi: f64) -> Self {
        let zero = Complex64::new(0.0, 0.0);
        Self { m: [[Complex64::new(1.0, 0.0), zero], [zero, Complex64::from_polar(1.0, phi)]] }
    }

    /// `exp(-i eps sigma_y)`, the real rotation `[[cos, -sin], [sin, cos]]`.
    /// Leaves the X-basis states invariant up to phase.
    pub fn rotation_y(eps: f64) -> Self {
        let (s, c) = eps.sin_cos();
        Self {
            m: [
                [Complex64::new(c, 0.0), Complex64::new(-s, 0.0)],
                [Complex64::new(s, 0.0), Complex64::new(c, 0.0)],
            ],
        }
    }

    /// `exp(-i eps sigma_x)`. Leaves the Z-basis states invariant up to phase.
    pub fn rotation_x(eps: f64) -> Self {
        let (s, c) = eps.sin_cos();
        Self {
            m: [
                [Complex64::new(c, 0.0), Complex64::new(0.0, -s)],
                [Complex64::new(0.0, -s), Complex64::new(c, 0.0)],
            ],
        }
    }

    /// `exp(-i angle (n . sigma))` for a unit axis `n = (nx, ny, nz)` in Pauli
    /// order. On the Poincare sphere this rotates by `2 * angle`.
    pub fn axis_rotation(axis: [f64; 3], angle: f64) -> Self {
        let norm = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
        let [nx, ny, nz] = axis.map(|a| a / norm);
        let (s, c) = angle.sin_cos();
        Self {
            m: [
                [Complex64::new(c, -s * nz), Complex64::new(-s * ny, -s * nx)],
                [Complex64::new(s * ny, -s * nx), Complex64::new(c, s * nz)],
            ],
        }
    }

    /// Three-angle parameterization `Rz(alpha) * Ry(theta) * Rz(beta)` with
    /// `Rz(a) = diag(e^{ia}, e^{-ia})`; spans SU(2).
    pub fn from_angles(alpha: f64, theta: f64, beta: f64) -> Self {
        let rz = |a: f64| {
            let zero = Complex64::new(0.0, 0.0);
            Self { m: [[Complex64::from_polar(1.0, a), zero], [zero, Complex64::from_polar(1.0, -a)]] }
        };
        rz(alpha) * Self::rotation_y(theta) * rz(beta)
    }

    pub fn adjoint(&self) -> Self {
        let m = &self.m;
        Self { m: [[m[0][0].conj(), m[1][0].conj()], [m[0][1].conj(), m[1][1].conj()]] }
    }

    pub fn determinant(&self) -> Complex64 {
        self.m[0][0] * self.m[1][1] - self.m[0][1] * self.m[1][0]
    }

    /// Largest elementwise deviation of `U^dagger U` from the identity.
    pub fn unitarity_deviation(&self) -> f64 {
        let p = self.adjoint() * *self;
        let id = Self::identity();
        let mut dev: f64 = 0.0;
        for i in 0..2 {
            for j in 0..2 {
                dev = dev.max((p.m[i][j] - id.m[i][j]).norm());
            }
        }
        dev
    }

    pub fn is_unitary(&self, tol: f64) -> bool {
        self.unitarity_deviation() <= tol && (self.determinant().norm() - 1.0).abs() <= tol
    }

    /// Projects back onto U(2) with a Gram-Schmidt pass over the columns.
    /// Used after long products of drift steps.
    pub fn reunitarize(&self) -> Self {
        let c0 = [self.m[0][0], self.m[1][0]];
        let n0 = (c0[0].norm_sqr() + c0[1].norm_sqr()).sqrt();
        let c0 = [c0[0] / n0, c0[1] / n0];
        let c1 = [self.m[0][1], self.m[1][1]];
        let proj = c0[0].conj() * c1[0] + c0[1].conj() * c1[1];
        let c1 = [c1[0] - proj * c0[0], c1[1] - proj * c0[1]];
        let n1 = (c1[0].norm_sqr() + c1[1].norm_sqr()).sqrt();
        let c1 = [c1[0] / n1, c1[1] / n1];
        Self { m: [[c0[0], c1[0]], [c0[1], c1[1]]] }
    }

    pub fn apply(&self, s: &PolarizationState) -> PolarizationState {
        PolarizationState {
            amplitude_h: self.m[0][0] * s.amplitude_h + self.m[0][1] * s.amplitude_v,
            amplitude_v: self.m[1][0] * s.amplitude_h + self.m[1][1] * s.amplitude_v,
        }
    }
}

impl Mul for PolarizationUnitary {
    type Output = PolarizationUnitary;

    fn mul(self, rhs: PolarizationUnitary) -> PolarizationUnitary {
        let a = &self.m;
        let b = &rhs.m;
        let mut m = [[Complex64::new(0.0, 0.0); 2]; 2];
        for (i, row) in m.iter_mut().enumerate() {
            for (j, cell) in row.iter_mut().enumerate() {
                *cell = a[i][0] * b[0][j] + a[i][1] * b[1][j];
            }
        }
        PolarizationUnitary { m }
    }
}

/// `U s`. Norm is preserved by unitarity.
pub fn apply_unitary(u: &PolarizationUnitary, s: &PolarizationState) -> PolarizationState {
    u.apply(s)
}

/// Born-rule outcome probabilities `(p_bit0, p_bit1)` for measuring
/// `compensation * s` in `basis`.
pub fn measurement_probabilities(
    s: &PolarizationState,
    basis: Basis,
    compensation: &PolarizationUnitary,
) -> (f64, f64) {
    let rotated = compensation.apply(s);
    let p0 = symbol_to_state(Bb84Symbol::new(basis, 0)).overlap(&rotated);
    let p1 = symbol_to_state(Bb84Symbol::new(basis, 1)).overlap(&rotated);
    let total = p0 + p1;
    (p0 / total, p1 / total)
}

/// Poisson sample of the photon number in a phase-randomized weak coherent pulse.
pub fn poisson_photon_number<R: Rng + ?Sized>(mean: f64, rng: &mut R) -> Result<u64, OpticsError> {
    if mean < 0.0 || !mean.is_finite() {
        return Err(OpticsError::NegativeMean(mean));
    }
    if mean == 0.0 {
        return Ok(0);
    }
    let dist = Poisson::new(mean).map_err(|_| OpticsError::NegativeMean(mean))?;
    Ok(dist.sample(rng) as u64)
}

/// Shannon binary entropy in bits, `h(0) = h(1) = 0`.
pub fn binary_entropy(x: f64) -> Result<f64, OpticsError> {
    if !(0.0..=1.0).contains(&x) {
        return Err(OpticsError::ProbabilityOutOfRange(x));
    }
    Ok(entropy_unchecked(x))
}

pub(crate) fn entropy_unchecked(x: f64) -> f64 {
    if x <= 0.0 || x >= 1.0 {
        0.0
    } else {
        -x * x.log2() - (1.0 - x) * (1.0 - x).log2()
    }
}

/// Signal/decoy intensities and preparation probabilities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntensitySetting {
    /// Signal mean photon number.
    pub mu: f64,
    /// Decoy mean photon number.
    pub nu: f64,
    /// Probability of sending the signal intensity.
    pub p_mu: f64,
    /// Probability of preparing in the Z basis.
    pub p_z: f64,
}

impl IntensitySetting {
    pub fn new(mu: f64, nu: f64, p_mu: f64, p_z: f64) -> Result<Self, OpticsError> {
        let s = Self { mu, nu, p_mu, p_z };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), OpticsError> {
        let bad = |msg: String| Err(OpticsError::InvalidIntensity(msg));
        if !(self.nu > 0.0 && self.nu.is_finite()) {
            return bad(format!("nu must be positive, got {}", self.nu));
        }
        if !(self.mu > self.nu && self.mu.is_finite()) {
            return bad(format!("mu must exceed nu, got mu={} nu={}", self.mu, self.nu));
        }
        if !(self.p_mu > 0.0 && self.p_mu < 1.0) {
            return bad(format!("p_mu must lie in (0, 1), got {}", self.p_mu));
        }
        if !(self.p_z > 0.0 && self.p_z < 1.0) {
            return bad(format!("p_z must lie in (0, 1), got {}", self.p_z));
        }
        Ok(())
    }

    pub fn p_nu(&self) -> f64 {
        1.0 - self.p_mu
    }

    pub fn p_x(&self) -> f64 {
        1.0 - self.p_z
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn close(a: Complex64, b: Complex64, tol: f64) -> bool {
        (a - b).norm() <= tol
    }

    #[test]
    fn z0_state_is_diagonal() {
        let s = symbol_to_state(Bb84Symbol::new(Basis::Z, 0));
        assert!(close(s.amplitude_h, Complex64::new(FRAC_1_SQRT_2, 0.0), 1e-15));
        assert!(close(s.amplitude_v, Complex64::new(FRAC_1_SQRT_2, 0.0), 1e-15));
    }

    #[test]
    fn x0_state_is_circular() {
        let s = symbol_to_state(Bb84Symbol::new(Basis::X, 0));
        assert!(close(s.amplitude_h, Complex64::new(FRAC_1_SQRT_2, 0.0), 1e-15));
        assert!(close(s.amplitude_v, Complex64::new(0.0, FRAC_1_SQRT_2), 1e-15));
    }

    #[test]
    fn pairwise_overlaps_follow_mutually_unbiased_structure() {
        // Oracle: <a|b> = (1 + e^{i(tb - ta)})/2 directly from the state formula.
        for a in Bb84Symbol::ALL {
            for b in Bb84Symbol::ALL {
                let d = b.theta() - a.theta();
                let oracle = (Complex64::new(1.0, 0.0) + Complex64::from_polar(1.0, d)) / 2.0;
                let got = symbol_to_state(a).inner(&symbol_to_state(b));
                assert!(close(got, oracle, 1e-14));
                let expect = if a == b {
                    1.0
                } else if a.basis == b.basis {
                    0.0
                } else {
                    0.5
                };
                assert!((got.norm_sqr() - expect).abs() < 1e-14, "{a:?} {b:?}");
            }
        }
    }

    #[test]
    fn theta_mapping_is_a_bijection() {
        let mut thetas: Vec<f64> = Bb84Symbol::ALL.iter().map(|s| s.theta()).collect();
        thetas.sort_by(f64::total_cmp);
        thetas.dedup();
        assert_eq!(thetas.len(), 4);
        for s in Bb84Symbol::ALL {
            assert_eq!(Bb84Symbol::from_theta(s.theta()), Some(s));
            let expect_basis = if s.theta() == 0.0 || s.theta() == PI { Basis::Z } else { Basis::X };
            assert_eq!(s.basis, expect_basis);
        }
        assert_eq!(Bb84Symbol::from_theta(0.3), None);
    }

    #[test]
    fn phase_flip_example() {
        let s = symbol_to_state(Bb84Symbol::new(Basis::Z, 0));
        let out = apply_unitary(&PolarizationUnitary::phase(PI), &s);
        assert!(close(out.amplitude_h, Complex64::new(FRAC_1_SQRT_2, 0.0), 1e-15));
        assert!(close(out.amplitude_v, Complex64::new(-FRAC_1_SQRT_2, 0.0), 1e-15));
    }

    #[test]
    fn intensity_setting_validation() {
        assert!(IntensitySetting::new(0.565, 0.143, 0.798, 0.944).is_ok());
        assert!(IntensitySetting::new(0.1, 0.2, 0.5, 0.5).is_err());
        assert!(IntensitySetting::new(0.5, 0.0, 0.5, 0.5).is_err());
        assert!(IntensitySetting::new(0.5, 0.1, 1.0, 0.5).is_err());
        assert!(IntensitySetting::new(0.5, 0.1, 0.5, 0.0).is_err());
    }

    #[test]
    fn identity_leaves_state_unchanged() {
        for sym in Bb84Symbol::ALL {
            let s = symbol_to_state(sym);
            assert_eq!(apply_unitary(&PolarizationUnitary::identity(), &s), s);
        }
    }

    #[test]
    fn random_unitaries_preserve_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..10_000 {
            let u = PolarizationUnitary::from_angles(
                rng.random_range(0.0..2.0 * PI),
                rng.random_range(0.0..2.0 * PI),
                rng.random_range(0.0..2.0 * PI),
            );
            assert!(u.is_unitary(UNITARY_TOLERANCE));
            let s = PolarizationState::normalized(
                Complex64::new(rng.random(), rng.random()),
                Complex64::new(rng.random(), rng.random()),
            );
            assert!((u.apply(&s).norm_sqr() - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn measurement_examples() {
        let z0 = symbol_to_state(Bb84Symbol::new(Basis::Z, 0));
        let id = PolarizationUnitary::identity();
        let (p0, p1) = measurement_probabilities(&z0, Basis::Z, &id);
        assert!((p0 - 1.0).abs() < 1e-15 && p1.abs() < 1e-15);
        let (p0, p1) = measurement_probabilities(&z0, Basis::X, &id);
        assert!((p0 - 0.5).abs() < 1e-15 && (p1 - 0.5).abs() < 1e-15);
        for eps in [0.0, 0.01, 0.2, 0.7, 1.3] {
            let (_, p1) = measurement_probabilities(&z0, Basis::Z, &PolarizationUnitary::rotation_y(eps));
            assert!((p1 - eps.sin().powi(2)).abs() < 1e-10);
            // the Z-plane rotation leaves X-basis statistics untouched
            let x0 = symbol_to_state(Bb84Symbol::new(Basis::X, 0));
            let (_, q1) = measurement_probabilities(&x0, Basis::X, &PolarizationUnitary::rotation_y(eps));
            assert!(q1.abs() < 1e-12);
        }
    }

    #[test]
    fn axis_rotation_matches_named_rotations() {
        for eps in [0.1, -0.4, 2.0] {
            let a = PolarizationUnitary::axis_rotation([0.0, 1.0, 0.0], eps);
            let b = PolarizationUnitary::rotation_y(eps);
            let c = PolarizationUnitary::axis_rotation([1.0, 0.0, 0.0], eps);
            let d = PolarizationUnitary::rotation_x(eps);
            for i in 0..2 {
                for j in 0..2 {
                    assert!(close(a.m[i][j], b.m[i][j], 1e-15));
                    assert!(close(c.m[i][j], d.m[i][j], 1e-15));
                }
            }
        }
    }

    #[test]
    fn from_matrix_rejects_non_unitary() {
        let mut m = PolarizationUnitary::identity().matrix();
        m[0][0] = Complex64::new(1.1, 0.0);
        assert!(matches!(PolarizationUnitary::from_matrix(m), Err(OpticsError::NotUnitary(_))));
    }

    #[test]
    fn poisson_mean_zero_is_always_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            assert_eq!(poisson_photon_number(0.0, &mut rng).unwrap(), 0);
        }
        assert!(poisson_photon_number(-1.0, &mut rng).is_err());
    }

    #[test]
    fn poisson_statistics_match_pmf() {
        let mean = 0.565;
        let samples = 10_000_000u64;
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let dist = Poisson::new(mean).unwrap();
        let mut sum = 0u64;
        let mut ones = 0u64;
        for _ in 0..samples {
            let n = Distribution::<f64>::sample(&dist, &mut rng) as u64;
            sum += n;
            ones += (n == 1) as u64;
        }
        let m = sum as f64 / samples as f64;
        assert!((m - mean).abs() < 1e-3, "sample mean {m}");
        let p1 = mean * (-mean).exp();
        let sigma = (p1 * (1.0 - p1) / samples as f64).sqrt();
        let emp = ones as f64 / samples as f64;
        assert!((emp - p1).abs() < 3.0 * sigma, "P(1) {emp} vs {p1}");
        // the public sampler draws from the same law
        let draws: u64 = (0..100_000).map(|_| poisson_photon_number(mean, &mut rng).unwrap()).sum();
        assert!((draws as f64 / 1e5 - mean).abs() < 0.01);
    }

    #[test]
    fn entropy_examples() {
        assert_eq!(binary_entropy(0.5).unwrap(), 1.0);
        assert_eq!(binary_entropy(0.0).unwrap(), 0.0);
        assert_eq!(binary_entropy(1.0).unwrap(), 0.0);
        let x: f64 = 0.0224;
        let direct = -x * x.log2() - (1.0 - x) * (1.0 - x).log2();
        assert!((binary_entropy(x).unwrap() - direct).abs() < 1e-12);
        assert!(binary_entropy(-0.01).is_err());
        assert!(binary_entropy(1.5).is_err());
    }

    proptest! {
        #[test]
        fn entropy_is_symmetric(x in 0.0f64..=1.0) {
            let a = binary_entropy(x).unwrap();
            let b = binary_entropy(1.0 - x).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }

        #[test]
        fn measurement_probabilities_sum_to_one(
            re_h in -1.0f64..1.0, im_h in -1.0f64..1.0, re_v in -1.0f64..1.0, im_v in -1.0f64..1.0,
            a in 0.0f64..6.3, t in 0.0f64..6.3, b in 0.0f64..6.3,
        ) {
            prop_assume!(re_h.abs() + im_h.abs() + re_v.abs() + im_v.abs() > 1e-3);
            let s = PolarizationState::normalized(Complex64::new(re_h, im_h), Complex64::new(re_v, im_v));
            let u = PolarizationUnitary::from_angles(a, t, b);
            for basis in Basis::ALL {
                let (p0, p1) = measurement_probabilities(&s, basis, &u);
                prop_assert!((p0 + p1 - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn composition_matches_product(
            a1 in 0.0f64..6.3, t1 in 0.0f64..6.3, b1 in 0.0f64..6.3,
            a2 in 0.0f64..6.3, t2 in 0.0f64..6.3, b2 in 0.0f64..6.3,
            sym in 0usize..4,
        ) {
            let u1 = PolarizationUnitary::from_angles(a1, t1, b1);
            let u2 = PolarizationUnitary::from_angles(a2, t2, b2);
            let s = symbol_to_state(Bb84Symbol::ALL[sym]);
            let seq = apply_unitary(&u2, &apply_unitary(&u1, &s));
            let prod = apply_unitary(&(u2 * u1), &s);
            prop_assert!(close(seq.amplitude_h, prod.amplitude_h, 1e-10));
            prop_assert!(close(seq.amplitude_v, prod.amplitude_v, 1e-10));
        }

        #[test]
        fn encoded_bit_is_recovered_in_matching_basis(sym in 0usize..4) {
            let s = Bb84Symbol::ALL[sym];
            let (p0, p1) = measurement_probabilities(&symbol_to_state(s), s.basis, &PolarizationUnitary::identity());
            let p_bit = if s.bit == 0 { p0 } else { p1 };
            prop_assert!((p_bit - 1.0).abs() < 1e-12);
        }
    }
}
