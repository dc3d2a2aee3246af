//! Differentiable operations on [`Var`].

use std::rc::Rc;

use super::gemm::{gemm, MatRef};
use super::{Tensor, Var};
use crate::error::{shape_err, DemaError, Result};

/// Zero-padding policy for [`Var::conv1d`]. Both keep the sequence length.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// `(K-1)/2` zeros on the left, the rest on the right.
    Same,
    /// `K-1` zeros on the left: output `l` sees inputs `l-K+1..=l`.
    Causal,
}

impl Padding {
    fn left(self, k: usize) -> usize {
        match self {
            Padding::Same => (k - 1) / 2,
            Padding::Causal => k - 1,
        }
    }
}

fn check_finite(t: &Tensor, op: &str) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(DemaError::Numeric(format!("{op}: non-finite input")))
    }
}

fn same_shape(a: &Tensor, b: &Tensor, op: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return shape_err(format!(
            "{op}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        ));
    }
    Ok(())
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.max(0.0) + (-x.abs()).exp().ln_1p()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044_715 * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044_715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044_715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

// Tape-bound and fallible, so these stay inherent methods rather than operator traits.
#[allow(clippy::should_implement_trait)]
impl<'t> Var<'t> {
    fn unary(self, f: impl Fn(f64) -> f64, df: impl Fn(f64, f64) -> f64 + 'static) -> Var<'t> {
        let x = self.value();
        let y = x.map(f);
        let y_rc = Rc::new(y.clone());
        self.tape.record(y, &[self], move |g| {
            let data = x
                .data()
                .iter()
                .zip(y_rc.data())
                .zip(g.data())
                .map(|((&xi, &yi), &gi)| gi * df(xi, yi))
                .collect();
            vec![Some(Tensor::new(x.shape().to_vec(), data).expect("shape"))]
        })
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        same_shape(&a, &b, "add")?;
        let y = a.zip_map(&b, |p, q| p + q);
        Ok(self.tape.record(y, &[self, other], |g| {
            vec![Some(g.clone()), Some(g.clone())]
        }))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        same_shape(&a, &b, "sub")?;
        let y = a.zip_map(&b, |p, q| p - q);
        Ok(self.tape.record(y, &[self, other], |g| {
            vec![Some(g.clone()), Some(g.map(|v| -v))]
        }))
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        same_shape(&a, &b, "mul")?;
        let y = a.zip_map(&b, |p, q| p * q);
        Ok(self.tape.record(y, &[self, other], move |g| {
            vec![
                Some(g.zip_map(&b, |gi, bi| gi * bi)),
                Some(g.zip_map(&a, |gi, ai| gi * ai)),
            ]
        }))
    }

    /// `scale * x + shift`, elementwise.
    pub fn affine(self, scale: f64, shift: f64) -> Var<'t> {
        let y = self.value().map(|v| scale * v + shift);
        self.tape
            .record(y, &[self], move |g| vec![Some(g.map(|v| v * scale))])
    }

    pub fn scale(self, s: f64) -> Var<'t> {
        self.affine(s, 0.0)
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(f64::exp, |_, y| y)
    }

    pub fn relu(self) -> Var<'t> {
        self.unary(|x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn sigmoid(self) -> Result<Var<'t>> {
        check_finite(&self.value(), "sigmoid")?;
        Ok(self.unary(sigmoid, |_, y| y * (1.0 - y)))
    }

    pub fn softplus(self) -> Result<Var<'t>> {
        check_finite(&self.value(), "softplus")?;
        Ok(self.unary(softplus, |x, _| sigmoid(x)))
    }

    pub fn gelu(self) -> Var<'t> {
        self.unary(gelu, |x, _| gelu_grad(x))
    }

    /// Multiply every row of the last axis by `v` (`[.., C] * [C]`).
    pub fn mul_last(self, v: Var<'t>) -> Result<Var<'t>> {
        let (x, w) = (self.value(), v.value());
        let c = x.last_dim();
        if w.shape() != [c] {
            return shape_err(format!("mul_last: {:?} vs {:?}", x.shape(), w.shape()));
        }
        let mut y = (*x).clone();
        for row in y.data_mut().chunks_mut(c) {
            for (a, b) in row.iter_mut().zip(w.data()) {
                *a *= b;
            }
        }
        Ok(self.tape.record(y, &[self, v], move |g| {
            let mut gx = g.clone();
            let mut gw = vec![0.0; c];
            for ((grow, xrow), gxrow) in g
                .data()
                .chunks(c)
                .zip(x.data().chunks(c))
                .zip(gx.data_mut().chunks_mut(c))
            {
                for i in 0..c {
                    gw[i] += grow[i] * xrow[i];
                    gxrow[i] = grow[i] * w.data()[i];
                }
            }
            vec![Some(gx), Some(Tensor::new(vec![c], gw).expect("shape"))]
        }))
    }

    /// 2-D matrix product.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
            return shape_err(format!("matmul: {:?} x {:?}", a.shape(), b.shape()));
        }
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut y = vec![0.0; m * n];
        gemm(
            1.0,
            MatRef::new(a.data(), m, k),
            MatRef::new(b.data(), k, n),
            0.0,
            &mut y,
        );
        let y = Tensor::new(vec![m, n], y)?;
        Ok(self.tape.record(y, &[self, other], move |g| {
            let gm = MatRef::new(g.data(), m, n);
            let mut ga = vec![0.0; m * k];
            gemm(1.0, gm, MatRef::new(b.data(), k, n).t(), 0.0, &mut ga);
            let mut gb = vec![0.0; k * n];
            gemm(1.0, MatRef::new(a.data(), m, k).t(), gm, 0.0, &mut gb);
            vec![
                Some(Tensor::new(vec![m, k], ga).expect("shape")),
                Some(Tensor::new(vec![k, n], gb).expect("shape")),
            ]
        }))
    }

    /// `x W + b` over the last axis: `[.., in] -> [.., out]`.
    pub fn linear(self, weight: Var<'t>, bias: Option<Var<'t>>) -> Result<Var<'t>> {
        let (x, w) = (self.value(), weight.value());
        if w.rank() != 2 || x.last_dim() != w.shape()[0] || x.rank() == 0 {
            return shape_err(format!(
                "linear: input {:?} with weight {:?}",
                x.shape(),
                w.shape()
            ));
        }
        let (din, dout) = (w.shape()[0], w.shape()[1]);
        let rows = x.len() / din;
        let mut y = vec![0.0; rows * dout];
        if let Some(b) = bias {
            let bv = b.value();
            if bv.shape() != [dout] {
                return shape_err(format!(
                    "linear: bias {:?} for output width {dout}",
                    bv.shape()
                ));
            }
            for row in y.chunks_mut(dout) {
                row.copy_from_slice(bv.data());
            }
        }
        gemm(
            1.0,
            MatRef::new(x.data(), rows, din),
            MatRef::new(w.data(), din, dout),
            1.0,
            &mut y,
        );
        let mut shape = x.shape().to_vec();
        *shape.last_mut().expect("rank >= 1") = dout;
        let y = Tensor::new(shape, y)?;
        let mut parents = vec![self, weight];
        parents.extend(bias);
        let has_bias = bias.is_some();
        Ok(self.tape.record(y, &parents, move |g| {
            let gm = MatRef::new(g.data(), rows, dout);
            let mut gx = vec![0.0; rows * din];
            gemm(1.0, gm, MatRef::new(w.data(), din, dout).t(), 0.0, &mut gx);
            let mut gw = vec![0.0; din * dout];
            gemm(1.0, MatRef::new(x.data(), rows, din).t(), gm, 0.0, &mut gw);
            let mut out = vec![
                Some(Tensor::new(x.shape().to_vec(), gx).expect("shape")),
                Some(Tensor::new(vec![din, dout], gw).expect("shape")),
            ];
            if has_bias {
                let mut gb = vec![0.0; dout];
                for row in g.data().chunks(dout) {
                    for (a, b) in gb.iter_mut().zip(row) {
                        *a += b;
                    }
                }
                out.push(Some(Tensor::new(vec![dout], gb).expect("shape")));
            }
            out
        }))
    }

    /// Layer normalisation over the last axis with optional affine terms.
    pub fn layer_norm(
        self,
        gamma: Option<Var<'t>>,
        beta: Option<Var<'t>>,
        eps: f64,
    ) -> Result<Var<'t>> {
        if eps <= 0.0 {
            return Err(DemaError::Config("layer_norm eps must be positive".into()));
        }
        let x = self.value();
        check_finite(&x, "layer_norm")?;
        let c = x.last_dim();
        let gv = gamma.map(|g| g.value());
        let bv = beta.map(|b| b.value());
        for p in gv.iter().chain(bv.iter()) {
            if p.shape() != [c] {
                return shape_err(format!("layer_norm: affine {:?} for width {c}", p.shape()));
            }
        }
        let rows = x.len() / c;
        let mut xhat = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &x.data()[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for i in 0..c {
                xhat[r * c + i] = (row[i] - mean) * is;
            }
        }
        let mut y = xhat.clone();
        for row in y.chunks_mut(c) {
            for (i, v) in row.iter_mut().enumerate() {
                if let Some(g) = &gv {
                    *v *= g.data()[i];
                }
                if let Some(b) = &bv {
                    *v += b.data()[i];
                }
            }
        }
        let shape = x.shape().to_vec();
        let y = Tensor::new(shape.clone(), y)?;
        let mut parents = vec![self];
        parents.extend(gamma);
        parents.extend(beta);
        let (has_g, has_b) = (gamma.is_some(), beta.is_some());
        Ok(self.tape.record(y, &parents, move |g| {
            let mut gx = vec![0.0; g.len()];
            let mut ggamma = vec![0.0; c];
            let mut gbeta = vec![0.0; c];
            let mut gxhat = vec![0.0; c];
            for r in 0..rows {
                let grow = &g.data()[r * c..(r + 1) * c];
                let xh = &xhat[r * c..(r + 1) * c];
                for i in 0..c {
                    ggamma[i] += grow[i] * xh[i];
                    gbeta[i] += grow[i];
                    gxhat[i] = grow[i] * gv.as_ref().map_or(1.0, |gm| gm.data()[i]);
                }
                let mean_g = gxhat.iter().sum::<f64>() / c as f64;
                let mean_gx = gxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                for i in 0..c {
                    gx[r * c + i] = inv_std[r] * (gxhat[i] - mean_g - xh[i] * mean_gx);
                }
            }
            let mut out = vec![Some(Tensor::new(shape.clone(), gx).expect("shape"))];
            if has_g {
                out.push(Some(Tensor::new(vec![c], ggamma).expect("shape")));
            }
            if has_b {
                out.push(Some(Tensor::new(vec![c], gbeta).expect("shape")));
            }
            out
        }))
    }

    /// Depthwise 1-D convolution along axis 1 of `[B, L, C]` with kernel
    /// `[C, K]`; output keeps length `L`.
    pub fn conv1d(
        self,
        kernel: Var<'t>,
        bias: Option<Var<'t>>,
        padding: Padding,
    ) -> Result<Var<'t>> {
        let (x, w) = (self.value(), kernel.value());
        check_finite(&x, "conv1d")?;
        if x.rank() != 3 || w.rank() != 2 || w.shape()[0] != x.shape()[2] || w.shape()[1] == 0 {
            return shape_err(format!(
                "conv1d: input {:?} with kernel {:?}",
                x.shape(),
                w.shape()
            ));
        }
        let (nb, len, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let k = w.shape()[1];
        let left = padding.left(k) as isize;
        let bv = bias.map(|b| b.value());
        if let Some(b) = &bv {
            if b.shape() != [c] {
                return shape_err(format!("conv1d: bias {:?} for {c} channels", b.shape()));
            }
        }
        let mut y = vec![0.0; x.len()];
        for bi in 0..nb {
            for l in 0..len {
                let out = &mut y[(bi * len + l) * c..(bi * len + l + 1) * c];
                if let Some(b) = &bv {
                    out.copy_from_slice(b.data());
                }
                for kk in 0..k {
                    let src = l as isize + kk as isize - left;
                    if src < 0 || src >= len as isize {
                        continue;
                    }
                    let xin =
                        &x.data()[(bi * len + src as usize) * c..(bi * len + src as usize + 1) * c];
                    for ch in 0..c {
                        out[ch] += w.data()[ch * k + kk] * xin[ch];
                    }
                }
            }
        }
        let y = Tensor::new(x.shape().to_vec(), y)?;
        let mut parents = vec![self, kernel];
        parents.extend(bias);
        let has_bias = bias.is_some();
        Ok(self.tape.record(y, &parents, move |g| {
            let mut gx = vec![0.0; x.len()];
            let mut gw = vec![0.0; c * k];
            let mut gb = vec![0.0; c];
            for bi in 0..nb {
                for l in 0..len {
                    let gout = &g.data()[(bi * len + l) * c..(bi * len + l + 1) * c];
                    for ch in 0..c {
                        gb[ch] += gout[ch];
                    }
                    for kk in 0..k {
                        let src = l as isize + kk as isize - left;
                        if src < 0 || src >= len as isize {
                            continue;
                        }
                        let base = (bi * len + src as usize) * c;
                        for ch in 0..c {
                            gw[ch * k + kk] += gout[ch] * x.data()[base + ch];
                            gx[base + ch] += gout[ch] * w.data()[ch * k + kk];
                        }
                    }
                }
            }
            let mut out = vec![
                Some(Tensor::new(x.shape().to_vec(), gx).expect("shape")),
                Some(Tensor::new(vec![c, k], gw).expect("shape")),
            ];
            if has_bias {
                out.push(Some(Tensor::new(vec![c], gb).expect("shape")));
            }
            out
        }))
    }

    /// Swap the first two axes.
    pub fn swap01(self) -> Result<Var<'t>> {
        let y = self.value().swap01()?;
        Ok(self
            .tape
            .record(y, &[self], |g| vec![Some(g.swap01().expect("rank >= 2"))]))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let orig = x.shape().to_vec();
        let y = (*x).clone().reshape(shape)?;
        Ok(self.tape.record(y, &[self], move |g| {
            vec![Some(g.clone().reshape(&orig).expect("shape"))]
        }))
    }

    /// Mean over the rows of a 2-D tensor: `[R, C] -> [C]`.
    pub fn mean_rows(self) -> Result<Var<'t>> {
        let x = self.value();
        if x.rank() != 2 || x.shape()[0] == 0 {
            return shape_err(format!("mean_rows: {:?}", x.shape()));
        }
        let (r, c) = (x.shape()[0], x.shape()[1]);
        let mut y = vec![0.0; c];
        for row in x.data().chunks(c) {
            for (a, b) in y.iter_mut().zip(row) {
                *a += b / r as f64;
            }
        }
        let y = Tensor::new(vec![c], y)?;
        Ok(self.tape.record(y, &[self], move |g| {
            let gx = Tensor::from_fn(&[r, c], |i| g.data()[i % c] / r as f64);
            vec![Some(gx)]
        }))
    }

    /// Softmax over the last axis.
    pub fn softmax(self) -> Var<'t> {
        let x = self.value();
        let c = x.last_dim();
        let mut y = (*x).clone();
        for row in y.data_mut().chunks_mut(c) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let yv = Rc::new(y.clone());
        self.tape.record(y, &[self], move |g| {
            let mut gx = g.clone();
            for (grow, yrow) in gx.data_mut().chunks_mut(c).zip(yv.data().chunks(c)) {
                let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                for (gi, yi) in grow.iter_mut().zip(yrow) {
                    *gi = yi * (*gi - dot);
                }
            }
            vec![Some(gx)]
        })
    }

    pub fn sum(self) -> Var<'t> {
        let x = self.value();
        let shape = x.shape().to_vec();
        self.tape
            .record(Tensor::scalar(x.sum()), &[self], move |g| {
                vec![Some(Tensor::full(&shape, g.data()[0]))]
            })
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.value().len().max(1);
        self.sum().scale(1.0 / n as f64)
    }

    /// Mean squared error against a constant target. With a mask, only
    /// entries where the mask is nonzero count, and the mean is over them.
    pub fn mse(self, target: &Tensor, mask: Option<&Tensor>) -> Result<Var<'t>> {
        let x = self.value();
        same_shape(&x, target, "mse")?;
        if let Some(m) = mask {
            same_shape(&x, m, "mse mask")?;
        }
        let weights: Vec<f64> = match mask {
            Some(m) => m
                .data()
                .iter()
                .map(|&v| if v != 0.0 { 1.0 } else { 0.0 })
                .collect(),
            None => vec![1.0; x.len()],
        };
        let count = weights.iter().sum::<f64>().max(1.0);
        let diff: Vec<f64> = x
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| a - b)
            .collect();
        let loss = diff
            .iter()
            .zip(&weights)
            .map(|(d, w)| w * d * d)
            .sum::<f64>()
            / count;
        let shape = x.shape().to_vec();
        Ok(self.tape.record(Tensor::scalar(loss), &[self], move |g| {
            let s = 2.0 * g.data()[0] / count;
            let data = diff.iter().zip(&weights).map(|(d, w)| s * w * d).collect();
            vec![Some(Tensor::new(shape.clone(), data).expect("shape"))]
        }))
    }

    /// Per-row affine map with constant coefficients on `[R, C]`:
    /// `y[r, c] = x[r, c] * scale[r] + shift[r]`.
    pub fn row_affine(self, scale: &[f64], shift: &[f64]) -> Result<Var<'t>> {
        let x = self.value();
        if x.rank() != 2 || scale.len() != x.shape()[0] || shift.len() != x.shape()[0] {
            return shape_err(format!(
                "row_affine: {:?} with {} rows of coefficients",
                x.shape(),
                scale.len()
            ));
        }
        let c = x.shape()[1];
        let mut y = (*x).clone();
        for (r, row) in y.data_mut().chunks_mut(c).enumerate() {
            for v in row.iter_mut() {
                *v = *v * scale[r] + shift[r];
            }
        }
        let scale = scale.to_vec();
        Ok(self.tape.record(y, &[self], move |g| {
            let mut gx = g.clone();
            for (r, row) in gx.data_mut().chunks_mut(c).enumerate() {
                for v in row.iter_mut() {
                    *v *= scale[r];
                }
            }
            vec![Some(gx)]
        }))
    }
}
