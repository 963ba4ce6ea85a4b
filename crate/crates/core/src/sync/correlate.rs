//! Exact circular cross-correlation of integer strings against a +-1 code.

use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

/// `out[lag] = sum_j row[j] * code[(j + lag) mod L]`, computed by FFT and
/// rounded back to integers. Exact as long as `sum |row| * L < 2^52`.
pub fn circular_cross_correlation(row: &[i32], code: &[i8]) -> Vec<i64> {
    Correlator::new(code).correlate(row)
}

/// Reusable correlator holding the code spectrum and FFT plans.
pub struct Correlator {
    len: usize,
    code_spectrum: Vec<Complex64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl Correlator {
    pub fn new(code: &[i8]) -> Self {
        let len = code.len();
        let mut planner = FftPlanner::<f64>::new();
        let forward = planner.plan_fft_forward(len);
        let inverse = planner.plan_fft_inverse(len);
        let mut code_spectrum: Vec<Complex64> =
            code.iter().map(|&c| Complex64::new(c as f64, 0.0)).collect();
        forward.process(&mut code_spectrum);
        Self { len, code_spectrum, forward, inverse }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn correlate(&self, row: &[i32]) -> Vec<i64> {
        assert_eq!(row.len(), self.len, "row length must equal code length");
        let mut buf: Vec<Complex64> = row.iter().map(|&v| Complex64::new(v as f64, 0.0)).collect();
        self.forward.process(&mut buf);
        for (b, c) in buf.iter_mut().zip(&self.code_spectrum) {
            *b = b.conj() * c;
        }
        self.inverse.process(&mut buf);
        let scale = 1.0 / self.len as f64;
        buf.iter().map(|v| (v.re * scale).round() as i64).collect()
    }
}

/// Direct O(L^2) reference.
pub fn brute_force_correlation(row: &[i32], code: &[i8]) -> Vec<i64> {
    let len = code.len();
    (0..len)
        .map(|lag| {
            row.iter()
                .enumerate()
                .map(|(j, &v)| v as i64 * code[(j + lag) % len] as i64)
                .sum()
        })
        .collect()
}
