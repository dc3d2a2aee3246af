//! Instance normalisation, patching, patch encoding, and the two scan layouts.

use rand::Rng;

use crate::error::{config_err, Result};
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::SeriesWindow;

pub const REVIN_EPS: f64 = 1e-5;

/// Per-variate statistics used to undo instance normalisation.
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub eps: f64,
}

/// Normalise each variate to zero mean and unit (population) std.
/// The std is floored at `eps`, so constant variates map to zeros.
pub fn revin_normalize(window: &SeriesWindow) -> (SeriesWindow, InstanceStats) {
    revin_normalize_masked(window, None)
}

/// As [`revin_normalize`], with statistics taken over observed points only
/// (mask value nonzero = missing). Missing points are set to zero.
pub fn revin_normalize_masked(
    window: &SeriesWindow,
    missing: Option<&SeriesWindow>,
) -> (SeriesWindow, InstanceStats) {
    let (n, t) = (window.n_vars(), window.len());
    let mut mean = vec![0.0; n];
    let mut std = vec![0.0; n];
    let mut out = window.clone();
    for i in 0..n {
        let row = window.row(i);
        let observed: Vec<f64> = match missing {
            Some(m) => row
                .iter()
                .zip(m.row(i))
                .filter(|(_, &mi)| mi == 0.0)
                .map(|(&v, _)| v)
                .collect(),
            None => row.to_vec(),
        };
        let cnt = observed.len().max(1) as f64;
        let mu = observed.iter().sum::<f64>() / cnt;
        let var = observed.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / cnt;
        let sd = var.sqrt().max(REVIN_EPS);
        mean[i] = mu;
        std[i] = sd;
        for s in 0..t {
            let is_missing = missing.is_some_and(|m| m.get(i, s) != 0.0);
            out.set(
                i,
                s,
                if is_missing {
                    0.0
                } else {
                    (window.get(i, s) - mu) / sd
                },
            );
        }
    }
    (
        out,
        InstanceStats {
            mean,
            std,
            eps: REVIN_EPS,
        },
    )
}

pub fn revin_denormalize(y: &SeriesWindow, stats: &InstanceStats) -> SeriesWindow {
    SeriesWindow::from_fn(y.n_vars(), y.len(), |i, s| {
        y.get(i, s) * stats.std[i] + stats.mean[i]
    })
}

/// Number of patches after right-padding to a whole number of strides.
pub fn patch_count(t: usize, patch_len: usize, stride: usize) -> Result<usize> {
    if patch_len == 0 || stride == 0 {
        return config_err("patch length and stride must be positive");
    }
    if patch_len > t {
        return config_err(format!(
            "patch length {patch_len} exceeds series length {t}"
        ));
    }
    Ok((padded_len(t, patch_len, stride) - patch_len) / stride + 1)
}

fn padded_len(t: usize, patch_len: usize, stride: usize) -> usize {
    let rem = (t - patch_len) % stride;
    if rem == 0 {
        t
    } else {
        t + stride - rem
    }
}

/// Split each variate into patches `[N, L, P]`, repeating the last value
/// when the tail does not fill a whole stride.
pub fn patchify(window: &SeriesWindow, patch_len: usize, stride: usize) -> Result<Tensor> {
    let (n, t) = (window.n_vars(), window.len());
    let l = patch_count(t, patch_len, stride)?;
    let mut data = Vec::with_capacity(n * l * patch_len);
    for i in 0..n {
        let row = window.row(i);
        for p in 0..l {
            for k in 0..patch_len {
                data.push(row[(p * stride + k).min(t - 1)]);
            }
        }
    }
    Tensor::new(vec![n, l, patch_len], data)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layout {
    /// `[N, L, D]`: each variate's tokens in time order.
    TimeMajor,
    /// `[L, N, D]`: all variates at each token step.
    VariateMajor,
}

/// Token tensor tagged with its layout.
#[derive(Clone, Copy, Debug)]
pub struct TokenGrid<'t> {
    pub layout: Layout,
    pub tokens: Var<'t>,
}

impl<'t> TokenGrid<'t> {
    pub fn new(layout: Layout, tokens: Var<'t>) -> Self {
        Self { layout, tokens }
    }

    pub fn to_variate_major(self) -> Result<Self> {
        match self.layout {
            Layout::VariateMajor => Ok(self),
            Layout::TimeMajor => Ok(Self::new(Layout::VariateMajor, self.tokens.swap01()?)),
        }
    }

    pub fn to_time_major(self) -> Result<Self> {
        match self.layout {
            Layout::TimeMajor => Ok(self),
            Layout::VariateMajor => Ok(Self::new(Layout::TimeMajor, self.tokens.swap01()?)),
        }
    }

    /// `(N, L, D)` regardless of layout.
    pub fn dims(&self) -> (usize, usize, usize) {
        let s = self.tokens.shape();
        match self.layout {
            Layout::TimeMajor => (s[0], s[1], s[2]),
            Layout::VariateMajor => (s[1], s[0], s[2]),
        }
    }
}

/// Linear map from a patch of `P` points to a `D`-dim token, shared across
/// variates. Equivalent to a width-`P` convolution with stride `P`.
#[derive(Clone, Debug)]
pub struct PatchEncoder {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl PatchEncoder {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        patch_len: usize,
        d_model: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            weight: store.uniform(
                format!("{prefix}.weight"),
                &[patch_len, d_model],
                patch_len,
                rng,
            ),
            bias: store.zeros(format!("{prefix}.bias"), &[d_model]),
        }
    }

    /// `[N, L, P]` patches to a time-major grid `[N, L, D]`.
    pub fn embed<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        patches: Tensor,
    ) -> Result<TokenGrid<'t>> {
        let x = tape.constant(patches);
        let tokens = x.linear(
            tape.param(store, self.weight),
            Some(tape.param(store, self.bias)),
        )?;
        Ok(TokenGrid::new(Layout::TimeMajor, tokens))
    }
}
