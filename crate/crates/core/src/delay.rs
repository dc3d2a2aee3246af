//! Global lag priors between variates, estimated by cross-correlation.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, Result};
use crate::tensor::{irfft, rfft};
use crate::SeriesWindow;

/// Overlaps shorter than this give no correlation estimate.
pub const MIN_OVERLAP: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LagEstimate {
    /// Positive when the pattern of the first series shows up in the second
    /// `tau` steps later.
    pub tau: i64,
    pub rho: f64,
    /// No lag had a usable correlation (constant series or short overlaps).
    pub degenerate: bool,
}

fn check_pair(a: &[f64], b: &[f64], max_lag: usize) -> Result<()> {
    if a.len() != b.len() {
        return shape_err(format!("series lengths differ: {} vs {}", a.len(), b.len()));
    }
    if a.len() < MIN_OVERLAP {
        return config_err(format!(
            "cross-correlation needs at least {MIN_OVERLAP} points"
        ));
    }
    if max_lag >= a.len() {
        return config_err(format!(
            "max lag {max_lag} must be below series length {}",
            a.len()
        ));
    }
    Ok(())
}

fn centered(x: &[f64]) -> (Vec<f64>, f64) {
    let mean = x.iter().sum::<f64>() / x.len() as f64;
    let c: Vec<f64> = x.iter().map(|v| v - mean).collect();
    let ss = c.iter().map(|v| v * v).sum::<f64>();
    (c, ss)
}

/// Relative threshold below which an overlap's sum of squared deviations
/// counts as zero.
const FLAT_REL: f64 = 1e-12;

fn pearson(sab: f64, ssa: f64, ssb: f64, floor_a: f64, floor_b: f64) -> Option<f64> {
    if ssa <= floor_a || ssb <= floor_b {
        return None;
    }
    Some((sab / (ssa * ssb).sqrt()).clamp(-1.0, 1.0))
}

/// Pearson correlation of `a[s]` with `b[s + t]` over the overlap, for
/// `t` in `-max_lag..=max_lag`, by direct summation.
pub fn lag_correlations(a: &[f64], b: &[f64], max_lag: usize) -> Result<Vec<Option<f64>>> {
    check_pair(a, b, max_lag)?;
    let n = a.len() as i64;
    let (ca, ssa_all) = centered(a);
    let (cb, ssb_all) = centered(b);
    let mut out = Vec::with_capacity(2 * max_lag + 1);
    for t in -(max_lag as i64)..=max_lag as i64 {
        let lo = 0.max(-t) as usize;
        let hi = n.min(n - t) as usize;
        let len = hi - lo;
        if len < MIN_OVERLAP {
            out.push(None);
            continue;
        }
        let xa = &ca[lo..hi];
        let xb = &cb[(lo as i64 + t) as usize..(hi as i64 + t) as usize];
        let ma = xa.iter().sum::<f64>() / len as f64;
        let mb = xb.iter().sum::<f64>() / len as f64;
        let (mut sab, mut ssa, mut ssb) = (0.0, 0.0, 0.0);
        for (p, q) in xa.iter().zip(xb) {
            sab += (p - ma) * (q - mb);
            ssa += (p - ma) * (p - ma);
            ssb += (q - mb) * (q - mb);
        }
        out.push(pearson(
            sab,
            ssa,
            ssb,
            FLAT_REL * ssa_all,
            FLAT_REL * ssb_all,
        ));
    }
    Ok(out)
}

/// Same values as [`lag_correlations`], with the lagged cross products
/// from one FFT and the overlap statistics from prefix sums.
pub fn lag_correlations_fft(a: &[f64], b: &[f64], max_lag: usize) -> Result<Vec<Option<f64>>> {
    check_pair(a, b, max_lag)?;
    let n = a.len();
    let (ca, ssa_all) = centered(a);
    let (cb, ssb_all) = centered(b);
    let m = (2 * n).next_power_of_two();
    let mut pa = ca.clone();
    pa.resize(m, 0.0);
    let mut pb = cb.clone();
    pb.resize(m, 0.0);
    let fa = rfft(&pa)?;
    let mut fb = rfft(&pb)?;
    for (y, x) in fb.coeffs_mut().iter_mut().zip(fa.coeffs()) {
        *y *= x.conj();
    }
    // cross[t mod m] = Σ_s a[s] b[s + t]
    let cross = irfft(&fb)?;

    let prefix = |x: &[f64], sq: bool| {
        let mut p = vec![0.0; x.len() + 1];
        for (i, v) in x.iter().enumerate() {
            p[i + 1] = p[i] + if sq { v * v } else { *v };
        }
        p
    };
    let (sa, sa2, sb, sb2) = (
        prefix(&ca, false),
        prefix(&ca, true),
        prefix(&cb, false),
        prefix(&cb, true),
    );

    let n = n as i64;
    let mut out = Vec::with_capacity(2 * max_lag + 1);
    for t in -(max_lag as i64)..=max_lag as i64 {
        let lo = 0.max(-t) as usize;
        let hi = n.min(n - t) as usize;
        let len = hi - lo;
        if len < MIN_OVERLAP {
            out.push(None);
            continue;
        }
        let (blo, bhi) = ((lo as i64 + t) as usize, (hi as i64 + t) as usize);
        let k = len as f64;
        let (suma, sumb) = (sa[hi] - sa[lo], sb[bhi] - sb[blo]);
        let raw = cross[t.rem_euclid(m as i64) as usize];
        let sab = raw - suma * sumb / k;
        let ssa = (sa2[hi] - sa2[lo]) - suma * suma / k;
        let ssb = (sb2[bhi] - sb2[blo]) - sumb * sumb / k;
        out.push(pearson(
            sab,
            ssa,
            ssb,
            FLAT_REL * ssa_all,
            FLAT_REL * ssb_all,
        ));
    }
    Ok(out)
}

/// Lag with the largest absolute correlation. Ties (within 1e-12) go to the
/// smaller `|t|`, then to the negative lag.
fn pick(scores: &[Option<f64>], max_lag: usize) -> LagEstimate {
    let ml = max_lag as i64;
    let mut best: Option<(i64, f64)> = None;
    for mag in 0..=ml {
        for t in if mag == 0 { vec![0] } else { vec![-mag, mag] } {
            let Some(r) = scores[(t + ml) as usize] else {
                continue;
            };
            if best.is_none_or(|(_, br)| r.abs() > br.abs() + 1e-12) {
                best = Some((t, r));
            }
        }
    }
    match best {
        Some((tau, rho)) => LagEstimate {
            tau,
            rho,
            degenerate: false,
        },
        None => LagEstimate {
            tau: 0,
            rho: 0.0,
            degenerate: true,
        },
    }
}

/// Lag in `[-max_lag, max_lag]` maximising `|corr(a[s], b[s + t])|`.
pub fn xcorr_delay(a: &[f64], b: &[f64], max_lag: usize) -> Result<LagEstimate> {
    Ok(pick(&lag_correlations(a, b, max_lag)?, max_lag))
}

/// [`xcorr_delay`] through the FFT path.
pub fn xcorr_delay_fft(a: &[f64], b: &[f64], max_lag: usize) -> Result<LagEstimate> {
    Ok(pick(&lag_correlations_fft(a, b, max_lag)?, max_lag))
}

/// `round(tau / patch_len)`, halves rounded away from zero.
pub fn token_shift(tau: i64, patch_len: usize) -> i64 {
    let p = patch_len.max(1) as i64;
    let q = (2 * tau.abs() + p) / (2 * p);
    q * tau.signum()
}

pub fn default_max_lag(t: usize) -> usize {
    (t / 4).min(t.saturating_sub(1))
}

/// Pairwise lag priors. `tau[a][b] > 0` means variate `a` repeats the
/// pattern of variate `b` that many steps later.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DelayPriors {
    pub tau: Vec<Vec<i64>>,
    pub rho: Vec<Vec<f64>>,
    pub delta_tok: Vec<Vec<i64>>,
    pub max_lag: usize,
}

impl DelayPriors {
    /// Priors with no cross-variate coupling: zero lags, `rho = I`.
    pub fn identity(n: usize) -> Self {
        Self {
            tau: vec![vec![0; n]; n],
            rho: (0..n)
                .map(|a| (0..n).map(|b| if a == b { 1.0 } else { 0.0 }).collect())
                .collect(),
            delta_tok: vec![vec![0; n]; n],
            max_lag: 0,
        }
    }

    pub fn n_vars(&self) -> usize {
        self.tau.len()
    }

    /// Copy with every off-diagonal strength set to zero.
    pub fn without_cross_terms(&self) -> Self {
        let mut out = self.clone();
        for (a, row) in out.rho.iter_mut().enumerate() {
            for (b, r) in row.iter_mut().enumerate() {
                if a != b {
                    *r = 0.0;
                }
            }
        }
        out
    }

    /// Largest token shift in the matrix (0 when all are non-positive).
    pub fn max_shift(&self) -> i64 {
        self.delta_tok
            .iter()
            .flatten()
            .copied()
            .max()
            .unwrap_or(0)
            .max(0)
    }
}

/// Lag priors for every ordered pair of variates in `window`.
pub fn delay_matrix(
    window: &SeriesWindow,
    max_lag: usize,
    patch_len: usize,
) -> Result<DelayPriors> {
    let n = window.n_vars();
    let mut priors = DelayPriors::identity(n);
    priors.max_lag = max_lag;
    for a in 0..n {
        for b in 0..n {
            if a == b {
                continue;
            }
            let est = xcorr_delay_fft(window.row(b), window.row(a), max_lag)?;
            priors.tau[a][b] = est.tau;
            priors.rho[a][b] = est.rho;
            priors.delta_tok[a][b] = token_shift(est.tau, patch_len);
        }
    }
    Ok(priors)
}
