//! Adaptive Fourier filter.
//!
//! Frequencies `0..=T/2` are ranked by amplitude averaged over variates. The
//! top `theta` fraction forms the cross-time component and the remaining
//! bins form the cross-variate component. The two add back to the input.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, DemaError, Result};
use crate::tensor::{irfft, rfft, ComplexSpectrum};
use crate::SeriesWindow;

pub const DEFAULT_THETA: f64 = 0.4;

#[derive(Clone, Debug)]
pub struct SpectralSplit {
    pub cross_time: SeriesWindow,
    pub cross_variate: SeriesWindow,
    /// Selected frequency indices, ascending.
    pub selected: Vec<usize>,
    pub theta: f64,
}

/// JSON record of a split's frequency selection.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct SelectionRecord {
    pub theta: f64,
    pub series_len: usize,
    pub selected: Vec<usize>,
    pub complement: Vec<usize>,
}

impl SpectralSplit {
    pub fn record(&self) -> SelectionRecord {
        let bins = self.cross_time.len() / 2 + 1;
        let complement = (0..bins)
            .filter(|k| self.selected.binary_search(k).is_err())
            .collect();
        SelectionRecord {
            theta: self.theta,
            series_len: self.cross_time.len(),
            selected: self.selected.clone(),
            complement,
        }
    }
}

fn validate(window: &SeriesWindow, theta: f64) -> Result<()> {
    if !(theta > 0.0 && theta <= 1.0) {
        return config_err(format!("theta must lie in (0, 1], got {theta}"));
    }
    if window.n_vars() == 0 || window.is_empty() {
        return Err(DemaError::EmptyInput);
    }
    if window.len() < 2 {
        return config_err("spectral split needs at least 2 time steps");
    }
    Ok(())
}

/// Number of bins kept for a given `theta` out of `bins`: `ceil(theta * bins)`, at least 1.
pub fn selected_count(theta: f64, bins: usize) -> usize {
    // Guard against products like 0.1 * 10 = 1.0000000000000002.
    let k = (theta * bins as f64 - 1e-9).ceil() as usize;
    k.clamp(1, bins)
}

fn spectra(window: &SeriesWindow) -> Result<Vec<ComplexSpectrum>> {
    window.rows().map(rfft).collect()
}

fn rank_from_spectra(spectra: &[ComplexSpectrum], theta: f64) -> Vec<usize> {
    let bins = spectra[0].coeffs().len();
    let mut avg = vec![0.0; bins];
    for s in spectra {
        for (a, z) in avg.iter_mut().zip(s.coeffs()) {
            *a += z.norm() / spectra.len() as f64;
        }
    }
    let mut order: Vec<usize> = (0..bins).collect();
    // Stable sort: equal amplitudes keep ascending frequency order.
    order.sort_by(|&a, &b| avg[b].total_cmp(&avg[a]));
    let mut chosen = order[..selected_count(theta, bins)].to_vec();
    chosen.sort_unstable();
    chosen
}

/// Indices of the `ceil(theta * (T/2 + 1))` frequencies with the largest
/// variate-averaged amplitude, ascending. Ties go to the lower index.
pub fn amplitude_rank(window: &SeriesWindow, theta: f64) -> Result<Vec<usize>> {
    validate(window, theta)?;
    Ok(rank_from_spectra(&spectra(window)?, theta))
}

pub fn decompose(window: &SeriesWindow, theta: f64) -> Result<SpectralSplit> {
    validate(window, theta)?;
    let specs = spectra(window)?;
    let selected = rank_from_spectra(&specs, theta);
    let bins = window.len() / 2 + 1;
    let mut keep = vec![false; bins];
    for &k in &selected {
        keep[k] = true;
    }
    let drop: Vec<bool> = keep.iter().map(|k| !k).collect();

    let (n, t) = (window.n_vars(), window.len());
    let mut cross_time = SeriesWindow::zeros(n, t);
    let mut cross_variate = SeriesWindow::zeros(n, t);
    for (i, spec) in specs.iter().enumerate() {
        cross_time
            .row_mut(i)
            .copy_from_slice(&irfft(&spec.filtered(&keep))?);
        cross_variate
            .row_mut(i)
            .copy_from_slice(&irfft(&spec.filtered(&drop))?);
    }
    Ok(SpectralSplit {
        cross_time,
        cross_variate,
        selected,
        theta,
    })
}

/// Whether `u` and `v` share a direction when expanded on an orthogonal
/// basis. A coefficient counts as nonzero above `1e-10` times the largest
/// coefficient magnitude of the same vector.
pub fn support_overlap(u: &[f64], v: &[f64], basis: &[Vec<f64>]) -> Result<bool> {
    let dim = u.len();
    if v.len() != dim || basis.len() != dim || basis.iter().any(|e| e.len() != dim) {
        return Err(DemaError::Contract(format!(
            "need {dim} basis vectors of length {dim} and equal-length inputs"
        )));
    }
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let norms: Vec<f64> = basis.iter().map(|e| dot(e, e).sqrt()).collect();
    if norms.contains(&0.0) {
        return Err(DemaError::Contract("basis contains a zero vector".into()));
    }
    for i in 0..dim {
        for j in i + 1..dim {
            if dot(&basis[i], &basis[j]).abs() > 1e-9 * norms[i] * norms[j] {
                return Err(DemaError::Contract(format!(
                    "basis vectors {i} and {j} are not orthogonal"
                )));
            }
        }
    }
    let support = |x: &[f64]| -> Vec<bool> {
        let coeffs: Vec<f64> = basis
            .iter()
            .zip(&norms)
            .map(|(e, n)| dot(x, e) / (n * n))
            .collect();
        let scale = coeffs.iter().map(|c| c.abs()).fold(0.0, f64::max);
        coeffs
            .iter()
            .map(|c| scale > 0.0 && c.abs() > 1e-10 * scale)
            .collect()
    };
    let (su, sv) = (support(u), support(v));
    Ok(su.iter().zip(&sv).any(|(a, b)| *a && *b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::rng;
    use proptest::prelude::*;
    use rand::Rng;

    fn sine_window(t: usize, period: f64) -> SeriesWindow {
        SeriesWindow::from_fn(1, t, |_, s| {
            (2.0 * std::f64::consts::PI * s as f64 / period).sin()
        })
    }

    fn random_window(n: usize, t: usize, seed: u64) -> SeriesWindow {
        let mut r = rng(seed);
        SeriesWindow::from_fn(n, t, |_, _| r.random_range(-2.0..2.0))
    }

    /// Amplitude at bin `k` by direct summation.
    fn dft_amp(x: &[f64], k: usize) -> f64 {
        let t = x.len() as f64;
        let (mut re, mut im) = (0.0, 0.0);
        for (s, v) in x.iter().enumerate() {
            let a = -2.0 * std::f64::consts::PI * (k * s) as f64 / t;
            re += v * a.cos();
            im += v * a.sin();
        }
        (re * re + im * im).sqrt()
    }

    #[test]
    fn constant_window_selects_dc() {
        let w = SeriesWindow::from_fn(3, 16, |_, _| 1.7);
        assert_eq!(amplitude_rank(&w, 0.05).unwrap(), vec![0]);
    }

    #[test]
    fn sinusoid_top1_is_bin_2() {
        let w = sine_window(16, 8.0);
        let oracle: Vec<f64> = (0..=8).map(|k| dft_amp(w.row(0), k)).collect();
        let best = (0..=8)
            .max_by(|&a, &b| oracle[a].total_cmp(&oracle[b]))
            .unwrap();
        assert_eq!(best, 2);
        assert_eq!(amplitude_rank(&w, 1.0 / 9.0).unwrap(), vec![best]);
    }

    #[test]
    fn full_theta_keeps_everything() {
        let w = random_window(2, 15, 1);
        assert_eq!(
            amplitude_rank(&w, 1.0).unwrap(),
            (0..=7).collect::<Vec<_>>()
        );
        let split = decompose(&w, 1.0).unwrap();
        assert!(split.cross_time.max_abs_diff(&w) <= 1e-9);
        assert!(split.cross_variate.data().iter().all(|v| v.abs() <= 1e-9));
    }

    #[test]
    fn in_band_sinusoid_has_no_residual() {
        let w = sine_window(32, 8.0);
        // Direct DFT: all energy sits in bin 4.
        let amps: Vec<f64> = (0..=16).map(|k| dft_amp(w.row(0), k)).collect();
        assert!(amps.iter().enumerate().all(|(k, a)| k == 4 || *a < 1e-9));
        let split = decompose(&w, 0.2).unwrap();
        assert!(split.selected.contains(&4));
        assert!(split.cross_variate.data().iter().all(|v| v.abs() <= 1e-9));
    }

    #[test]
    fn invalid_theta() {
        let w = random_window(1, 8, 2);
        assert!(matches!(amplitude_rank(&w, 0.0), Err(DemaError::Config(_))));
        assert!(matches!(
            amplitude_rank(&w, -0.3),
            Err(DemaError::Config(_))
        ));
        assert!(matches!(decompose(&w, 1.5), Err(DemaError::Config(_))));
    }

    #[test]
    fn selected_count_rounding() {
        assert_eq!(selected_count(0.1, 10), 1);
        assert_eq!(selected_count(0.4, 49), 20);
        assert_eq!(selected_count(1e-6, 49), 1);
        assert_eq!(selected_count(1.0, 49), 49);
    }

    #[test]
    fn record_partitions_bins() {
        let split = decompose(&random_window(2, 20, 9), 0.3).unwrap();
        let rec = split.record();
        let mut all = [rec.selected.clone(), rec.complement.clone()].concat();
        all.sort_unstable();
        assert_eq!(all, (0..=10).collect::<Vec<_>>());
    }

    #[test]
    fn support_overlap_examples() {
        let e = |i: usize| {
            (0..3)
                .map(|j| if i == j { 1.0 } else { 0.0 })
                .collect::<Vec<f64>>()
        };
        let basis = vec![e(0), e(1), e(2)];
        assert!(!support_overlap(&e(0), &e(1), &basis).unwrap());
        assert!(support_overlap(&[1.0, 1.0, 0.0], &e(1), &basis).unwrap());
        let skew = vec![vec![1.0, 1.0, 0.0], vec![1.0, 0.0, 0.0], e(2)];
        assert!(matches!(
            support_overlap(&e(0), &e(1), &skew),
            Err(DemaError::Contract(_))
        ));
    }

    proptest! {
        #[test]
        fn decomposition_is_lossless(seed in 0u64..1000, n in 1usize..4, t in 2usize..80, theta in 0.01f64..=1.0) {
            let w = random_window(n, t, seed);
            let s = decompose(&w, theta).unwrap();
            let mut sum = s.cross_time.clone();
            for (a, b) in sum.data_mut().iter_mut().zip(s.cross_variate.data()) {
                *a += b;
            }
            prop_assert!(sum.max_abs_diff(&w) <= 1e-9);
        }

        #[test]
        fn selection_is_monotone_in_theta(seed in 0u64..1000, t in 4usize..64, a in 0.01f64..=1.0, b in 0.01f64..=1.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let w = random_window(2, t, seed);
            let small = amplitude_rank(&w, lo).unwrap();
            let large = amplitude_rank(&w, hi).unwrap();
            prop_assert!(small.iter().all(|k| large.contains(k)));
        }
    }
}
