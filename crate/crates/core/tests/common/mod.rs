#![allow(dead_code)]

use dema_core::pipeline::Dataset;
use dema_core::SeriesWindow;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Two periodic components plus AR(1) noise in variate 1; variate 2 is
/// variate 1 shifted `delay` steps later plus white noise.
pub fn delayed_pair(len: usize, delay: usize, seed: u64) -> SeriesWindow {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total = len + delay;
    let mut ar = 0.0;
    let base: Vec<f64> = (0..total)
        .map(|t| {
            let t_f = t as f64;
            ar = 0.7 * ar + 0.2 * rng.sample::<f64, _>(StandardNormal);
            (std::f64::consts::TAU * t_f / 24.0).sin()
                + 0.5 * (std::f64::consts::TAU * t_f / 37.0 + 1.0).sin()
                + ar
        })
        .collect();
    let lead = base[delay..].to_vec();
    let lagged: Vec<f64> = (0..len)
        .map(|t| base[t] + 0.1 * rng.sample::<f64, _>(StandardNormal))
        .collect();
    SeriesWindow::from_rows(vec![lead, lagged]).unwrap()
}

pub fn ar1(n: usize, len: usize, phi: f64, seed: u64) -> SeriesWindow {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    for _ in 0..n {
        let mut x = 0.0;
        rows.push(
            (0..len)
                .map(|_| {
                    x = phi * x + rng.sample::<f64, _>(StandardNormal);
                    x
                })
                .collect(),
        );
    }
    SeriesWindow::from_rows(rows).unwrap()
}

pub fn dataset(series: SeriesWindow, labels: Option<Vec<f64>>) -> Dataset {
    let columns = (0..series.n_vars()).map(|i| format!("v{i}")).collect();
    Dataset::new(columns, series, labels, [0.7, 0.1, 0.2]).unwrap()
}

/// Mean squared error of repeating each variate's last input value over
/// every test forecast window.
pub fn last_value_mse(data: &Dataset, seq_len: usize, horizon: usize) -> f64 {
    use dema_core::model::Task;
    use dema_core::pipeline::{make_windows, Split, Target};
    let (series, _, _) = data.segment(Split::Test, seq_len).unwrap();
    let (mut sum, mut count) = (0.0, 0usize);
    for w in make_windows(&series, None, seq_len, horizon, Task::Forecast).unwrap() {
        let Target::Series(y) = w.target else {
            unreachable!()
        };
        for i in 0..y.n_vars() {
            let last = w.input.get(i, seq_len - 1);
            for &v in y.row(i) {
                sum += (v - last) * (v - last);
                count += 1;
            }
        }
    }
    sum / count as f64
}
