use crate::error::{config_err, shape_err, Result};
use crate::SeriesWindow;

/// Mean squared reconstruction error over variates, per time step.
pub fn anomaly_score(x: &SeriesWindow, recon: &SeriesWindow) -> Result<Vec<f64>> {
    if x.n_vars() != recon.n_vars() || x.len() != recon.len() {
        return shape_err("series and reconstruction sizes differ");
    }
    let n = x.n_vars().max(1) as f64;
    Ok((0..x.len())
        .map(|s| {
            (0..x.n_vars())
                .map(|i| (x.get(i, s) - recon.get(i, s)).powi(2))
                .sum::<f64>()
                / n
        })
        .collect())
}

/// The `(1 − ratio)` quantile of `scores` (nearest rank). Points strictly
/// above it are flagged.
pub fn select_threshold(scores: &[f64], ratio: f64) -> Result<f64> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return config_err(format!("anomaly ratio must lie in (0, 1), got {ratio}"));
    }
    if scores.is_empty() {
        return Err(crate::DemaError::EmptyInput);
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = ((1.0 - ratio) * sorted.len() as f64).ceil() as usize;
    Ok(sorted[rank.clamp(1, sorted.len()) - 1])
}
