//! Real-input FFT: unnormalised forward, `1/T`-scaled inverse.

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{DemaError, Result};

/// Half spectrum of a real series of length `len`: coefficients for
/// frequency indices `0..=len/2`.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexSpectrum {
    len: usize,
    coeffs: Vec<Complex64>,
}

impl ComplexSpectrum {
    pub fn new(len: usize, coeffs: Vec<Complex64>) -> Result<Self> {
        if coeffs.len() != len / 2 + 1 {
            return Err(DemaError::Shape(format!(
                "spectrum of a length-{len} series needs {} coefficients, got {}",
                len / 2 + 1,
                coeffs.len()
            )));
        }
        Ok(Self { len, coeffs })
    }

    /// Length of the real series this spectrum came from.
    pub fn series_len(&self) -> usize {
        self.len
    }

    pub fn coeffs(&self) -> &[Complex64] {
        &self.coeffs
    }

    pub fn coeffs_mut(&mut self) -> &mut [Complex64] {
        &mut self.coeffs
    }

    pub fn amplitudes(&self) -> Vec<f64> {
        self.coeffs.iter().map(|c| c.norm()).collect()
    }

    /// Copy keeping only the coefficients where `keep[k]` is true.
    pub fn filtered(&self, keep: &[bool]) -> Self {
        let coeffs = self
            .coeffs
            .iter()
            .zip(keep)
            .map(|(&c, &k)| if k { c } else { Complex64::new(0.0, 0.0) })
            .collect();
        Self {
            len: self.len,
            coeffs,
        }
    }
}

pub fn rfft(x: &[f64]) -> Result<ComplexSpectrum> {
    if x.is_empty() {
        return Err(DemaError::EmptyInput);
    }
    let n = x.len();
    let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    buf.truncate(n / 2 + 1);
    ComplexSpectrum::new(n, buf)
}

pub fn irfft(spec: &ComplexSpectrum) -> Result<Vec<f64>> {
    let n = spec.len;
    if n == 0 {
        return Err(DemaError::EmptyInput);
    }
    let half = &spec.coeffs;
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    buf[..half.len()].copy_from_slice(half);
    for k in 1..n - n / 2 {
        buf[n - k] = half[k].conj();
    }
    // DC (and Nyquist for even n) must be real for a real signal.
    buf[0].im = 0.0;
    if n.is_multiple_of(2) {
        buf[n / 2].im = 0.0;
    }
    FftPlanner::new().plan_fft_inverse(n).process(&mut buf);
    let scale = 1.0 / n as f64;
    Ok(buf.into_iter().map(|c| c.re * scale).collect())
}
