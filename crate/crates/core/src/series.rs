use crate::error::{shape_err, DemaError, Result};

/// Multivariate window: `n` variates by `t` time steps, row-major by variate.
#[derive(Clone, Debug, PartialEq)]
pub struct SeriesWindow {
    n: usize,
    t: usize,
    data: Vec<f64>,
}

impl SeriesWindow {
    pub fn new(n: usize, t: usize, data: Vec<f64>) -> Result<Self> {
        if n * t != data.len() {
            return shape_err(format!(
                "window {n}x{t} needs {} values, got {}",
                n * t,
                data.len()
            ));
        }
        Ok(Self { n, t, data })
    }

    pub fn zeros(n: usize, t: usize) -> Self {
        Self {
            n,
            t,
            data: vec![0.0; n * t],
        }
    }

    /// Build from one `Vec` per variate; all rows must share a length.
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n = rows.len();
        if n == 0 {
            return Err(DemaError::EmptyInput);
        }
        let t = rows[0].len();
        if rows.iter().any(|r| r.len() != t) {
            return shape_err("ragged variate rows");
        }
        Ok(Self {
            n,
            t,
            data: rows.concat(),
        })
    }

    pub fn from_fn(n: usize, t: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(n * t);
        for i in 0..n {
            for s in 0..t {
                data.push(f(i, s));
            }
        }
        Self { n, t, data }
    }

    /// Number of variates.
    pub fn n_vars(&self) -> usize {
        self.n
    }

    /// Number of time steps.
    pub fn len(&self) -> usize {
        self.t
    }

    pub fn is_empty(&self) -> bool {
        self.t == 0 || self.n == 0
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.t..(i + 1) * self.t]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.t..(i + 1) * self.t]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.t.max(1)).take(self.n)
    }

    pub fn get(&self, i: usize, s: usize) -> f64 {
        self.data[i * self.t + s]
    }

    pub fn set(&mut self, i: usize, s: usize, v: f64) {
        self.data[i * self.t + s] = v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Columns `start..end` of every variate.
    pub fn slice_time(&self, start: usize, end: usize) -> Result<Self> {
        if start > end || end > self.t {
            return shape_err(format!("time slice {start}..{end} of length {}", self.t));
        }
        Ok(Self::from_fn(self.n, end - start, |i, s| {
            self.get(i, start + s)
        }))
    }

    pub fn max_abs_diff(&self, other: &SeriesWindow) -> f64 {
        assert_eq!(
            (self.n, self.t),
            (other.n, other.t),
            "window shape mismatch"
        );
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}
