//! Variate path: delay-aware causal linear attention across variates.
//!
//! For query variate `a` at token `l`, keys of variate `b` are placed at
//! `j + Δ_ab` and only those with `j + Δ_ab ≤ l` are visible:
//!
//! ```text
//! y[l, a] = Σ_{b, j} ρ_ab ⟨R_l φ(q_la), R_{j+Δ_ab} φ(k_jb)⟩ v_jb
//!           / max(Σ_{b, j} ρ_ab ⟨φ(q_la), φ(k_jb)⟩, eps)
//! ```
//!
//! Since `R_xᵀ R_y = R_{y−x}`, the numerator equals a plain causal prefix
//! sum over the keys of `b` read at query position `l − Δ_ab`. The linear
//! kernel keeps one `D_u × D_u` state per key variate and never builds the
//! `(N·L) × (N·L)` score matrix.

use rand::Rng;

use crate::delay::DelayPriors;
use crate::embedding::{Layout, TokenGrid};
use crate::error::{config_err, shape_err, DemaError, Result};
use crate::layers::Linear;
use crate::tensor::gemm::{gemm, MatRef};
use crate::tensor::{ParamStore, Tape, Tensor, Var};

pub const ROPE_BASE: f64 = 10_000.0;
pub const DEFAULT_POWER: f64 = 3.0;
pub const DEFAULT_EPS: f64 = 1e-6;

/// Per-pair angular frequencies `base^(−2i/dim)`.
#[derive(Clone, Debug, PartialEq)]
pub struct RotaryTable {
    pub freqs: Vec<f64>,
}

impl RotaryTable {
    pub fn new(dim: usize, base: f64) -> Result<Self> {
        if !dim.is_multiple_of(2) {
            return config_err(format!("rotary embedding needs an even width, got {dim}"));
        }
        let half = dim / 2;
        Ok(Self {
            freqs: (0..half)
                .map(|i| base.powf(-2.0 * i as f64 / dim as f64))
                .collect(),
        })
    }

    pub fn dim(&self) -> usize {
        2 * self.freqs.len()
    }

    /// `out = R_pos x`.
    pub fn rotate_into(&self, x: &[f64], pos: i64, out: &mut [f64]) {
        for (i, f) in self.freqs.iter().enumerate() {
            let (s, c) = (pos as f64 * f).sin_cos();
            let (x0, x1) = (x[2 * i], x[2 * i + 1]);
            out[2 * i] = c * x0 - s * x1;
            out[2 * i + 1] = s * x0 + c * x1;
        }
    }
}

pub fn rope_rotate(x: &[f64], pos: i64, table: &RotaryTable) -> Result<Vec<f64>> {
    if x.len() != table.dim() {
        return shape_err(format!(
            "rotary table of width {} applied to length {}",
            table.dim(),
            x.len()
        ));
    }
    let mut out = vec![0.0; x.len()];
    table.rotate_into(x, pos, &mut out);
    Ok(out)
}

/// Cached `(cos, sin)` rows for positions `0..len`.
struct AngleCache {
    half: usize,
    cos: Vec<f64>,
    sin: Vec<f64>,
}

impl AngleCache {
    fn new(table: &RotaryTable, len: usize) -> Self {
        let half = table.freqs.len();
        let mut cos = Vec::with_capacity(len * half);
        let mut sin = Vec::with_capacity(len * half);
        for p in 0..len {
            for f in &table.freqs {
                let (s, c) = (p as f64 * f).sin_cos();
                cos.push(c);
                sin.push(s);
            }
        }
        Self { half, cos, sin }
    }

    /// `out = R_pos x`, or `R_posᵀ x` when `inverse`.
    fn rotate(&self, x: &[f64], pos: usize, inverse: bool, out: &mut [f64]) {
        let (cs, sn) = (
            &self.cos[pos * self.half..][..self.half],
            &self.sin[pos * self.half..][..self.half],
        );
        let sign = if inverse { -1.0 } else { 1.0 };
        for i in 0..self.half {
            let (c, s) = (cs[i], sign * sn[i]);
            let (x0, x1) = (x[2 * i], x[2 * i + 1]);
            out[2 * i] = c * x0 - s * x1;
            out[2 * i + 1] = s * x0 + c * x1;
        }
    }
}

/// `φ(x) = ‖r‖ / ‖r^p‖ · r^p` with `r = ReLU(x)`; zero when `r` is zero.
pub fn kernel_phi(x: &[f64], power: f64) -> Vec<f64> {
    let r: Vec<f64> = x.iter().map(|v| v.max(0.0)).collect();
    if power == 1.0 {
        return r;
    }
    let rp: Vec<f64> = r.iter().map(|v| v.powf(power)).collect();
    let nr = r.iter().map(|v| v * v).sum::<f64>().sqrt();
    let np = rp.iter().map(|v| v * v).sum::<f64>().sqrt();
    if nr == 0.0 || np == 0.0 {
        return vec![0.0; x.len()];
    }
    rp.iter().map(|v| v * nr / np).collect()
}

fn kernel_phi_grad(x: &[f64], power: f64, g: &[f64], out: &mut [f64]) {
    let r: Vec<f64> = x.iter().map(|v| v.max(0.0)).collect();
    if power == 1.0 {
        for i in 0..x.len() {
            out[i] = if x[i] > 0.0 { g[i] } else { 0.0 };
        }
        return;
    }
    let rp: Vec<f64> = r.iter().map(|v| v.powf(power)).collect();
    let nr = r.iter().map(|v| v * v).sum::<f64>().sqrt();
    let np = rp.iter().map(|v| v * v).sum::<f64>().sqrt();
    if nr == 0.0 || np == 0.0 {
        out.fill(0.0);
        return;
    }
    let s = nr / np;
    let gu: f64 = g.iter().zip(&rp).map(|(a, b)| a * b).sum();
    for i in 0..x.len() {
        out[i] = if x[i] > 0.0 {
            let du = s * g[i] - gu * nr / (np * np * np) * rp[i];
            power * r[i].powf(power - 1.0) * du + gu / (np * nr) * r[i]
        } else {
            0.0
        };
    }
}

/// Row-wise [`kernel_phi`] over the last axis.
pub fn phi_rows<'t>(x: Var<'t>, power: f64) -> Result<Var<'t>> {
    if power < 1.0 {
        return config_err(format!("kernel power must be at least 1, got {power}"));
    }
    let xv = x.value();
    let c = xv.last_dim();
    let mut y = Vec::with_capacity(xv.len());
    for row in xv.data().chunks(c) {
        y.extend(kernel_phi(row, power));
    }
    let y = Tensor::new(xv.shape().to_vec(), y)?;
    Ok(x.tape().record(y, &[x], move |g| {
        let mut gx = vec![0.0; xv.len()];
        for ((row, grow), out) in xv
            .data()
            .chunks(c)
            .zip(g.data().chunks(c))
            .zip(gx.chunks_mut(c))
        {
            kernel_phi_grad(row, power, grow, out);
        }
        vec![Some(Tensor::new(xv.shape().to_vec(), gx).expect("shape"))]
    }))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DalaOptions {
    pub power: f64,
    pub eps: f64,
    /// Rotate the denominator features the same way as the numerator.
    pub rotated_denominator: bool,
}

impl Default for DalaOptions {
    fn default() -> Self {
        Self {
            power: DEFAULT_POWER,
            eps: DEFAULT_EPS,
            rotated_denominator: false,
        }
    }
}

/// Attention weights `ρ` clamped to `[0, 1]` and token shifts, row-major `N × N`.
struct PairTable {
    rho: Vec<f64>,
    shift: Vec<i64>,
}

impl PairTable {
    fn new(priors: &DelayPriors, n: usize) -> Result<Self> {
        if priors.n_vars() != n
            || priors.rho.len() != n
            || priors.rho.iter().any(|r| r.len() != n)
            || priors.delta_tok.iter().any(|r| r.len() != n)
        {
            return shape_err(format!(
                "priors for {} variates applied to {n}",
                priors.n_vars()
            ));
        }
        let rho = priors
            .rho
            .iter()
            .flatten()
            .map(|r| r.clamp(0.0, 1.0))
            .collect();
        let shift = priors.delta_tok.iter().flatten().copied().collect();
        Ok(Self { rho, shift })
    }

    /// Whether query `(l, a)` sees no key at all.
    fn is_empty_set(&self, n: usize, a: usize, l: usize) -> bool {
        (0..n).all(|b| (l as i64) < self.shift[a * n + b])
    }
}

fn check_qkv(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<(usize, usize, usize)> {
    if q.rank() != 3 || k.shape() != q.shape() || v.shape() != q.shape() {
        return shape_err(format!(
            "attention inputs {:?}, {:?}, {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        ));
    }
    Ok((q.shape()[0], q.shape()[1], q.shape()[2]))
}

/// One query that reads key variate `b`'s prefix state.
#[derive(Clone, Copy)]
struct Query {
    a: usize,
    l: usize,
    /// Rotation position `l − Δ_ab`.
    pos: usize,
    rho: f64,
}

/// Queries bucketed by the last key index they see.
fn bucket_queries(pairs: &PairTable, b: usize, l_len: usize, n: usize) -> Vec<Vec<Query>> {
    let mut buckets = vec![Vec::new(); l_len];
    for a in 0..n {
        let rho = pairs.rho[a * n + b];
        if rho == 0.0 {
            continue;
        }
        let shift = pairs.shift[a * n + b];
        for l in 0..l_len {
            let pos = l as i64 - shift;
            if pos < 0 {
                continue;
            }
            let last = (pos as usize).min(l_len - 1);
            buckets[last].push(Query {
                a,
                l,
                pos: pos as usize,
                rho,
            });
        }
    }
    buckets
}

fn max_position(pairs: &PairTable, l_len: usize) -> usize {
    let lowest = pairs.shift.iter().copied().min().unwrap_or(0).min(0);
    (l_len as i64 - lowest).max(1) as usize
}

/// Forward pass on kernel features: returns `(y, den)` with `den` the
/// unguarded denominator per `(l, a)` (NaN marks the fallback rows).
fn linear_forward(
    qf: &Tensor,
    kf: &Tensor,
    v: &Tensor,
    pairs: &PairTable,
    table: &RotaryTable,
    opts: &DalaOptions,
) -> (Vec<f64>, Vec<f64>) {
    let (l_len, n, u) = (qf.shape()[0], qf.shape()[1], qf.shape()[2]);
    let (qd, kd, vd) = (qf.data(), kf.data(), v.data());
    let idx = |l: usize, a: usize| (l * n + a) * u;
    let angles = AngleCache::new(table, max_position(pairs, l_len));
    let mut num = vec![0.0; l_len * n * u];
    let mut den = vec![0.0; l_len * n];
    let mut state = vec![0.0; u * u];
    let mut z = vec![0.0; u];
    let mut kr = vec![0.0; u];
    let mut qr = Vec::new();
    let mut out = Vec::new();
    for b in 0..n {
        let buckets = bucket_queries(pairs, b, l_len, n);
        state.fill(0.0);
        z.fill(0.0);
        for j in 0..l_len {
            let (kj, vj) = (&kd[idx(j, b)..][..u], &vd[idx(j, b)..][..u]);
            angles.rotate(kj, j, false, &mut kr);
            for (row, &kv) in state.chunks_mut(u).zip(&kr) {
                for (s, &vv) in row.iter_mut().zip(vj) {
                    *s += kv * vv;
                }
            }
            let zsrc = if opts.rotated_denominator {
                &kr[..]
            } else {
                kj
            };
            for (zz, &kk) in z.iter_mut().zip(zsrc) {
                *zz += kk;
            }
            let bucket = &buckets[j];
            if bucket.is_empty() {
                continue;
            }
            let m = bucket.len();
            qr.resize(m * u, 0.0);
            out.resize(m * u, 0.0);
            for (qi, q) in bucket.iter().enumerate() {
                let qrow = &mut qr[qi * u..][..u];
                angles.rotate(&qd[idx(q.l, q.a)..][..u], q.pos, false, qrow);
                let dsrc = if opts.rotated_denominator {
                    &qrow[..]
                } else {
                    &qd[idx(q.l, q.a)..][..u]
                };
                den[q.l * n + q.a] += q.rho * dsrc.iter().zip(&z).map(|(x, y)| x * y).sum::<f64>();
                for x in qrow.iter_mut() {
                    *x *= q.rho;
                }
            }
            gemm(
                1.0,
                MatRef::new(&qr[..m * u], m, u),
                MatRef::new(&state, u, u),
                0.0,
                &mut out[..m * u],
            );
            for (qi, q) in bucket.iter().enumerate() {
                for (nn, o) in num[idx(q.l, q.a)..][..u]
                    .iter_mut()
                    .zip(&out[qi * u..][..u])
                {
                    *nn += o;
                }
            }
        }
    }
    let mut y = num;
    for l in 0..l_len {
        for a in 0..n {
            let base = idx(l, a);
            if pairs.is_empty_set(n, a, l) {
                // Own token only: the rotations cancel.
                let rho = pairs.rho[a * n + a];
                let s = rho * dot(&qd[base..][..u], &kd[base..][..u]);
                let c = s / s.max(opts.eps);
                for d in 0..u {
                    y[base + d] = c * vd[base + d];
                }
                den[l * n + a] = f64::NAN;
                continue;
            }
            let guard = den[l * n + a].max(opts.eps);
            for x in &mut y[base..base + u] {
                *x /= guard;
            }
        }
    }
    (y, den)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Gradients of [`linear_forward`] with respect to `(qf, kf, v)`.
#[allow(clippy::too_many_arguments)]
fn linear_backward(
    qf: &Tensor,
    kf: &Tensor,
    v: &Tensor,
    y: &[f64],
    den: &[f64],
    g: &[f64],
    pairs: &PairTable,
    table: &RotaryTable,
    opts: &DalaOptions,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (l_len, n, u) = (qf.shape()[0], qf.shape()[1], qf.shape()[2]);
    let (qd, kd, vd) = (qf.data(), kf.data(), v.data());
    let idx = |l: usize, a: usize| (l * n + a) * u;
    let angles = AngleCache::new(table, max_position(pairs, l_len));
    let mut gq = vec![0.0; qd.len()];
    let mut gk = vec![0.0; kd.len()];
    let mut gv = vec![0.0; vd.len()];

    // Gradient w.r.t. the numerator and the (guarded) denominator.
    let mut dnum = vec![0.0; y.len()];
    let mut dden = vec![0.0; l_len * n];
    for r in 0..l_len * n {
        let (l, a) = (r / n, r % n);
        let base = idx(l, a);
        if den[r].is_nan() {
            let rho = pairs.rho[a * n + a];
            let (qa, ka, va) = (&qd[base..][..u], &kd[base..][..u], &vd[base..][..u]);
            let s = rho * dot(qa, ka);
            let gr = &g[base..][..u];
            if s > opts.eps {
                gv[base..base + u]
                    .iter_mut()
                    .zip(gr)
                    .for_each(|(x, y)| *x += y);
            } else {
                let c = s / opts.eps;
                gv[base..base + u]
                    .iter_mut()
                    .zip(gr)
                    .for_each(|(x, y)| *x += c * y);
                let ds = rho / opts.eps * dot(gr, va);
                for d in 0..u {
                    gq[base + d] += ds * ka[d];
                    gk[base + d] += ds * qa[d];
                }
            }
            continue;
        }
        let guard = den[r].max(opts.eps);
        for d in 0..u {
            dnum[base + d] = g[base + d] / guard;
        }
        if den[r] > opts.eps {
            dden[r] = -dot(&g[base..][..u], &y[base..][..u]) / guard;
        }
    }

    let mut state = vec![0.0; u * u];
    let mut z = vec![0.0; u];
    let mut kr = vec![0.0; u];
    let mut tmp = vec![0.0; u];
    let mut qr = Vec::new();
    let mut dn = Vec::new();
    let mut out = Vec::new();
    for b in 0..n {
        let buckets = bucket_queries(pairs, b, l_len, n);

        // Forward sweep: query gradients need the prefix state they read.
        state.fill(0.0);
        z.fill(0.0);
        for j in 0..l_len {
            let (kj, vj) = (&kd[idx(j, b)..][..u], &vd[idx(j, b)..][..u]);
            angles.rotate(kj, j, false, &mut kr);
            for (row, &kv) in state.chunks_mut(u).zip(&kr) {
                for (s, &vv) in row.iter_mut().zip(vj) {
                    *s += kv * vv;
                }
            }
            let zsrc = if opts.rotated_denominator {
                &kr[..]
            } else {
                kj
            };
            z.iter_mut().zip(zsrc).for_each(|(a, b)| *a += b);
            let bucket = &buckets[j];
            if bucket.is_empty() {
                continue;
            }
            let m = bucket.len();
            dn.resize(m * u, 0.0);
            out.resize(m * u, 0.0);
            for (qi, q) in bucket.iter().enumerate() {
                let row = &mut dn[qi * u..][..u];
                row.copy_from_slice(&dnum[idx(q.l, q.a)..][..u]);
                row.iter_mut().for_each(|x| *x *= q.rho);
            }
            // d(rotated query) = ρ · S dnum
            gemm(
                1.0,
                MatRef::new(&dn[..m * u], m, u),
                MatRef::new(&state, u, u).t(),
                0.0,
                &mut out[..m * u],
            );
            for (qi, q) in bucket.iter().enumerate() {
                let orow = &mut out[qi * u..][..u];
                let dd = q.rho * dden[q.l * n + q.a];
                if opts.rotated_denominator {
                    orow.iter_mut().zip(&z).for_each(|(o, zz)| *o += dd * zz);
                }
                angles.rotate(orow, q.pos, true, &mut tmp);
                let gqrow = &mut gq[idx(q.l, q.a)..][..u];
                for d in 0..u {
                    gqrow[d] += tmp[d];
                    if !opts.rotated_denominator {
                        gqrow[d] += dd * z[d];
                    }
                }
            }
        }

        // Reverse sweep: key j is read by every query in buckets j..L.
        state.fill(0.0);
        z.fill(0.0);
        for j in (0..l_len).rev() {
            let bucket = &buckets[j];
            if !bucket.is_empty() {
                let m = bucket.len();
                qr.resize(m * u, 0.0);
                dn.resize(m * u, 0.0);
                for (qi, q) in bucket.iter().enumerate() {
                    let qrow = &mut qr[qi * u..][..u];
                    let qsrc = &qd[idx(q.l, q.a)..][..u];
                    angles.rotate(qsrc, q.pos, false, qrow);
                    let dd = q.rho * dden[q.l * n + q.a];
                    let hsrc = if opts.rotated_denominator {
                        &qrow[..]
                    } else {
                        qsrc
                    };
                    z.iter_mut().zip(hsrc).for_each(|(h, x)| *h += dd * x);
                    let drow = &mut dn[qi * u..][..u];
                    drow.copy_from_slice(&dnum[idx(q.l, q.a)..][..u]);
                    drow.iter_mut().for_each(|x| *x *= q.rho);
                }
                // G += Σ ρ qr dnumᵀ
                gemm(
                    1.0,
                    MatRef::new(&qr[..m * u], m, u).t(),
                    MatRef::new(&dn[..m * u], m, u),
                    1.0,
                    &mut state,
                );
            }
            let base = idx(j, b);
            let (kj, vj) = (&kd[base..][..u], &vd[base..][..u]);
            angles.rotate(kj, j, false, &mut kr);
            // dkr = G v, dv = Gᵀ kr
            let mut dkr = vec![0.0; u];
            for (r, row) in state.chunks(u).enumerate() {
                dkr[r] = dot(row, vj);
                let kv = kr[r];
                for (gvd, s) in gv[base..base + u].iter_mut().zip(row) {
                    *gvd += kv * s;
                }
            }
            if opts.rotated_denominator {
                dkr.iter_mut().zip(&z).for_each(|(a, b)| *a += b);
            }
            angles.rotate(&dkr, j, true, &mut tmp);
            let gkrow = &mut gk[base..base + u];
            for d in 0..u {
                gkrow[d] += tmp[d];
                if !opts.rotated_denominator {
                    gkrow[d] += z[d];
                }
            }
        }
    }
    (gq, gk, gv)
}

fn features(q: &Tensor, k: &Tensor, power: f64) -> Result<(Tensor, Tensor)> {
    let tape = Tape::inference();
    let qf = phi_rows(tape.constant(q.clone()), power)?.value();
    let kf = phi_rows(tape.constant(k.clone()), power)?.value();
    Ok(((*qf).clone(), (*kf).clone()))
}

/// Linear-time attention on `[L, N, D_u]` queries, keys and values.
pub fn dala_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    priors: &DelayPriors,
    opts: &DalaOptions,
) -> Result<Tensor> {
    let (l, n, u) = check_qkv(q, k, v)?;
    let pairs = PairTable::new(priors, n)?;
    let table = RotaryTable::new(u, ROPE_BASE)?;
    let (qf, kf) = features(q, k, opts.power)?;
    let (y, _) = linear_forward(&qf, &kf, v, &pairs, &table, opts);
    Tensor::new(vec![l, n, u], y)
}

/// Direct double sum over every `(b, j)` pair for every query.
pub fn naive_dala_oracle(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    priors: &DelayPriors,
    opts: &DalaOptions,
) -> Result<Tensor> {
    let (l_len, n, u) = check_qkv(q, k, v)?;
    let pairs = PairTable::new(priors, n)?;
    let table = RotaryTable::new(u, ROPE_BASE)?;
    let (qf, kf) = features(q, k, opts.power)?;
    let at = |t: &Tensor, l: usize, a: usize| t.data()[(l * n + a) * u..][..u].to_vec();
    let mut y = vec![0.0; l_len * n * u];
    for l in 0..l_len {
        for a in 0..n {
            let fq = at(&qf, l, a);
            let rq = rope_rotate(&fq, l as i64, &table)?;
            let mut num = vec![0.0; u];
            let mut den = 0.0;
            let mut any = false;
            for b in 0..n {
                let shift = pairs.shift[a * n + b];
                let rho = pairs.rho[a * n + b];
                for j in 0..l_len {
                    let pos = j as i64 + shift;
                    if pos > l as i64 {
                        continue;
                    }
                    any = true;
                    let fk = at(&kf, j, b);
                    let rk = rope_rotate(&fk, pos, &table)?;
                    let w = rho * dot(&rq, &rk);
                    let vj = at(v, j, b);
                    for d in 0..u {
                        num[d] += w * vj[d];
                    }
                    den += rho
                        * if opts.rotated_denominator {
                            dot(&rq, &rk)
                        } else {
                            dot(&fq, &fk)
                        };
                }
            }
            if !any {
                let rho = pairs.rho[a * n + a];
                let (fk, va) = (at(&kf, l, a), at(v, l, a));
                let rk = rope_rotate(&fk, l as i64, &table)?;
                let w = rho * dot(&rq, &rk);
                num = va.iter().map(|x| w * x).collect();
                den = rho * dot(&fq, &fk);
            }
            for d in 0..u {
                y[(l * n + a) * u + d] = num[d] / den.max(opts.eps);
            }
        }
    }
    Tensor::new(vec![l_len, n, u], y)
}

/// Differentiable [`dala_attention`]; `ρ` and shifts are constants.
pub fn dala_attention_op<'t>(
    q: Var<'t>,
    k: Var<'t>,
    v: Var<'t>,
    priors: &DelayPriors,
    opts: &DalaOptions,
) -> Result<Var<'t>> {
    let (qv, kv, vv) = (q.value(), k.value(), v.value());
    let (l, n, u) = check_qkv(&qv, &kv, &vv)?;
    let pairs = PairTable::new(priors, n)?;
    let table = RotaryTable::new(u, ROPE_BASE)?;
    let qf = phi_rows(q, opts.power)?;
    let kf = phi_rows(k, opts.power)?;
    let (qfv, kfv) = (qf.value(), kf.value());
    let (y, den) = linear_forward(&qfv, &kfv, &vv, &pairs, &table, opts);
    let out = Tensor::new(vec![l, n, u], y.clone())?;
    let opts = *opts;
    Ok(q.tape().record(out, &[qf, kf, v], move |g| {
        let (gq, gk, gv) =
            linear_backward(&qfv, &kfv, &vv, &y, &den, g.data(), &pairs, &table, &opts);
        let shape = vec![l, n, u];
        vec![
            Some(Tensor::new(shape.clone(), gq).expect("shape")),
            Some(Tensor::new(shape.clone(), gk).expect("shape")),
            Some(Tensor::new(shape, gv).expect("shape")),
        ]
    }))
}

#[derive(Clone, Debug, PartialEq)]
pub struct DalaConfig {
    pub d_model: usize,
    pub d_inner: usize,
    pub options: DalaOptions,
}

impl DalaConfig {
    pub fn new(d_model: usize) -> Self {
        Self {
            d_model,
            d_inner: 2 * d_model,
            options: DalaOptions::default(),
        }
    }
}

/// Parameters of one variate-path layer.
#[derive(Clone, Debug)]
pub struct MambaDala {
    pub cfg: DalaConfig,
    pub content: Linear,
    pub gate: Linear,
    pub to_q: Linear,
    pub to_k: Linear,
    pub to_v: Linear,
    pub out: Linear,
}

impl MambaDala {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        cfg: DalaConfig,
        rng: &mut R,
    ) -> Result<Self> {
        if cfg.d_model == 0 || cfg.d_inner == 0 {
            return config_err("attention widths must be positive");
        }
        if !cfg.d_inner.is_multiple_of(2) {
            return config_err(format!(
                "attention inner width must be even, got {}",
                cfg.d_inner
            ));
        }
        if cfg.options.power < 1.0 || cfg.options.eps <= 0.0 {
            return config_err("kernel power must be >= 1 and eps positive");
        }
        let (d, du) = (cfg.d_model, cfg.d_inner);
        Ok(Self {
            content: Linear::new(store, &format!("{name}.content"), d, du, true, rng),
            gate: Linear::new(store, &format!("{name}.gate"), d, du, true, rng),
            to_q: Linear::new(store, &format!("{name}.q"), du, du, true, rng),
            to_k: Linear::new(store, &format!("{name}.k"), du, du, true, rng),
            to_v: Linear::new(store, &format!("{name}.v"), du, du, true, rng),
            out: Linear::new(store, &format!("{name}.out"), du, d, false, rng),
            cfg,
        })
    }

    /// Variate-major `[L, N, D]` in, variate-major `[L, N, D]` out.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        grid: TokenGrid<'t>,
        priors: &DelayPriors,
    ) -> Result<TokenGrid<'t>> {
        if grid.layout != Layout::VariateMajor {
            return Err(DemaError::Contract(
                "variate path needs a variate-major grid".into(),
            ));
        }
        let x = grid.tokens;
        let content = self.content.forward(tape, store, x)?;
        let gate = self.gate.forward(tape, store, x)?.sigmoid()?;
        let q = self.to_q.forward(tape, store, content)?;
        let k = self.to_k.forward(tape, store, content)?;
        let v = self.to_v.forward(tape, store, content)?;
        let y = dala_attention_op(q, k, v, priors, &self.cfg.options)?;
        let out = self.out.forward(tape, store, y.mul(gate)?)?;
        Ok(TokenGrid::new(Layout::VariateMajor, out))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{grad_check, param_grad_check, randn_like, rng};
    use rand::Rng;

    fn random_priors(n: usize, max_shift: i64, r: &mut impl Rng) -> DelayPriors {
        let mut p = DelayPriors::identity(n);
        for a in 0..n {
            for b in 0..n {
                if a != b {
                    p.delta_tok[a][b] = r.random_range(-max_shift..=max_shift);
                    p.rho[a][b] = r.random_range(-0.3..1.0);
                }
            }
        }
        p
    }

    fn qkv(l: usize, n: usize, u: usize, r: &mut impl Rng) -> (Tensor, Tensor, Tensor) {
        (
            randn_like(&[l, n, u], r),
            randn_like(&[l, n, u], r),
            randn_like(&[l, n, u], r),
        )
    }

    #[test]
    fn rope_identity_and_isometry() {
        let t = RotaryTable::new(8, ROPE_BASE).unwrap();
        let x: Vec<f64> = (0..8).map(|i| (i as f64).sin()).collect();
        assert_eq!(rope_rotate(&x, 0, &t).unwrap(), x);
        let y = rope_rotate(&x, 37, &t).unwrap();
        assert!((dot(&x, &x).sqrt() - dot(&y, &y).sqrt()).abs() <= 1e-12);
        assert!(RotaryTable::new(7, ROPE_BASE).is_err());
    }

    #[test]
    fn rope_relative_inner_product() {
        let t = RotaryTable::new(6, ROPE_BASE).unwrap();
        let mut r = rng(0);
        for _ in 0..50 {
            let u: Vec<f64> = (0..6).map(|_| r.random_range(-1.0..1.0)).collect();
            let v: Vec<f64> = (0..6).map(|_| r.random_range(-1.0..1.0)).collect();
            let lhs = dot(
                &rope_rotate(&u, 5, &t).unwrap(),
                &rope_rotate(&v, 3, &t).unwrap(),
            );
            let rhs = dot(
                &rope_rotate(&u, 2, &t).unwrap(),
                &rope_rotate(&v, 0, &t).unwrap(),
            );
            assert!((lhs - rhs).abs() <= 1e-10);
        }
    }

    #[test]
    fn phi_properties() {
        assert_eq!(kernel_phi(&[-1.0, -2.0, -0.1], 3.0), vec![0.0; 3]);
        let x = [0.3, -0.2, 1.1, 0.0, 0.7];
        assert_eq!(kernel_phi(&x, 1.0), vec![0.3, 0.0, 1.1, 0.0, 0.7]);
        let mut r = rng(1);
        for _ in 0..100 {
            let x: Vec<f64> = (0..7).map(|_| r.random_range(-1.0..1.0)).collect();
            let relu: Vec<f64> = x.iter().map(|v| v.max(0.0)).collect();
            let f = kernel_phi(&x, 3.0);
            assert!(f.iter().all(|&v| v >= 0.0));
            assert!((dot(&f, &f).sqrt() - dot(&relu, &relu).sqrt()).abs() <= 1e-10);
        }
    }

    #[test]
    fn phi_gradient() {
        let x = randn_like(&[5, 6], &mut rng(2));
        let w = randn_like(&[5, 6], &mut rng(3));
        for p in [1.0, 2.0, 3.0] {
            let wc = w.clone();
            let err = grad_check(
                move |v| Ok(phi_rows(v, p)?.mul(v.tape().constant(wc.clone()))?.sum()),
                &x,
                1e-6,
            );
            assert!(err <= 1e-4, "power {p}: {err}");
        }
    }

    #[test]
    fn single_key_returns_value() {
        let mut r = rng(4);
        let (q, k, v) = qkv(1, 1, 4, &mut r);
        let q = q.map(|x| x.abs() + 0.1);
        let k = k.map(|x| x.abs() + 0.1);
        let y = dala_attention(
            &q,
            &k,
            &v,
            &DelayPriors::identity(1),
            &DalaOptions::default(),
        )
        .unwrap();
        assert!(y.max_abs_diff(&v) <= 1e-12);
    }

    #[test]
    fn matches_oracle() {
        let mut r = rng(5);
        for case in 0..100 {
            let (l, n, u) = (
                r.random_range(1..=8),
                r.random_range(1..=4),
                2 * r.random_range(1..=4),
            );
            let (q, k, v) = qkv(l, n, u, &mut r);
            let priors = random_priors(n, 3, &mut r);
            let opts = DalaOptions {
                rotated_denominator: case % 5 == 4,
                ..DalaOptions::default()
            };
            let fast = dala_attention(&q, &k, &v, &priors, &opts).unwrap();
            let slow = naive_dala_oracle(&q, &k, &v, &priors, &opts).unwrap();
            assert!(
                fast.max_abs_diff(&slow) <= 1e-9,
                "case {case}: {}",
                fast.max_abs_diff(&slow)
            );
        }
    }

    #[test]
    fn fallback_when_no_key_is_visible() {
        let mut r = rng(6);
        let (q, k, v) = qkv(4, 2, 4, &mut r);
        let mut priors = DelayPriors::identity(2);
        priors.delta_tok = vec![vec![2, 3], vec![0, 0]];
        let opts = DalaOptions::default();
        let fast = dala_attention(&q, &k, &v, &priors, &opts).unwrap();
        let slow = naive_dala_oracle(&q, &k, &v, &priors, &opts).unwrap();
        assert!(fast.max_abs_diff(&slow) <= 1e-12);
    }

    #[test]
    fn no_cross_terms_is_per_variate_attention() {
        let mut r = rng(7);
        let (q, k, v) = qkv(6, 3, 4, &mut r);
        let priors = random_priors(3, 2, &mut r).without_cross_terms();
        let y = dala_attention(&q, &k, &v, &priors, &DalaOptions::default()).unwrap();
        for a in 0..3 {
            let pick = |t: &Tensor| {
                Tensor::from_fn(&[6, 1, 4], |i| t.data()[((i / 4) * 3 + a) * 4 + i % 4])
            };
            let ya = dala_attention(
                &pick(&q),
                &pick(&k),
                &pick(&v),
                &DelayPriors::identity(1),
                &DalaOptions::default(),
            )
            .unwrap();
            assert!(pick(&y).max_abs_diff(&ya) <= 1e-12);
        }
    }

    #[test]
    fn variate_permutation_equivariance() {
        let mut r = rng(8);
        let (q, k, v) = qkv(5, 3, 4, &mut r);
        let priors = random_priors(3, 2, &mut r);
        let perm = [1, 2, 0];
        let permute = |t: &Tensor| {
            Tensor::from_fn(&[5, 3, 4], |i| {
                let (l, a, d) = (i / 12, (i / 4) % 3, i % 4);
                t.data()[(l * 3 + perm[a]) * 4 + d]
            })
        };
        let mut pp = priors.clone();
        for a in 0..3 {
            for b in 0..3 {
                pp.rho[a][b] = priors.rho[perm[a]][perm[b]];
                pp.delta_tok[a][b] = priors.delta_tok[perm[a]][perm[b]];
            }
        }
        let opts = DalaOptions::default();
        let y = dala_attention(&q, &k, &v, &priors, &opts).unwrap();
        let yp = dala_attention(&permute(&q), &permute(&k), &permute(&v), &pp, &opts).unwrap();
        assert!(yp.max_abs_diff(&permute(&y)) <= 1e-12);
    }

    #[test]
    fn uniform_rho_scale_invariance() {
        let mut r = rng(9);
        let (q, k, v) = qkv(6, 3, 4, &mut r);
        let mut priors = random_priors(3, 2, &mut r);
        for (a, row) in priors.rho.iter_mut().enumerate() {
            for (b, x) in row.iter_mut().enumerate() {
                *x = if a == b { 0.5 } else { 0.4 };
            }
        }
        let mut doubled = priors.clone();
        doubled.rho.iter_mut().flatten().for_each(|x| *x *= 2.0);
        let opts = DalaOptions::default();
        let y1 = dala_attention(&q, &k, &v, &priors, &opts).unwrap();
        let y2 = dala_attention(&q, &k, &v, &doubled, &opts).unwrap();
        assert!(y1.max_abs_diff(&y2) <= 1e-9);
    }

    #[test]
    fn shifted_causality() {
        let mut r = rng(10);
        for _ in 0..20 {
            let (l_len, n, u) = (8, 3, 4);
            let (q, k, v) = qkv(l_len, n, u, &mut r);
            let priors = random_priors(n, 2, &mut r);
            let opts = DalaOptions::default();
            let y = dala_attention(&q, &k, &v, &priors, &opts).unwrap();
            let (lj, bj) = (r.random_range(0..l_len), r.random_range(0..n));
            let mut k2 = k.clone();
            let mut v2 = v.clone();
            for d in 0..u {
                k2.data_mut()[(lj * n + bj) * u + d] += 0.7;
                v2.data_mut()[(lj * n + bj) * u + d] -= 0.4;
            }
            let y2 = dala_attention(&q, &k2, &v2, &priors, &opts).unwrap();
            for l in 0..l_len {
                for a in 0..n {
                    let visible =
                        lj as i64 + priors.delta_tok[a][bj] <= l as i64 || (a == bj && l == lj);
                    if !visible {
                        for d in 0..u {
                            let i = (l * n + a) * u + d;
                            assert_eq!(y.data()[i], y2.data()[i]);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn op_gradients() {
        let mut r = rng(11);
        for rotated in [false, true] {
            let (q, k, v) = qkv(5, 3, 4, &mut r);
            let (q, k) = (q.map(|x| x + 0.3), k.map(|x| x + 0.3));
            let priors = random_priors(3, 2, &mut r);
            let w = randn_like(&[5, 3, 4], &mut r);
            let opts = DalaOptions {
                rotated_denominator: rotated,
                ..DalaOptions::default()
            };
            for which in 0..3 {
                let (qc, kc, vc, wc, pc) =
                    (q.clone(), k.clone(), v.clone(), w.clone(), priors.clone());
                let input = [&q, &k, &v][which].clone();
                let err = grad_check(
                    move |x| {
                        let t = x.tape();
                        let mut args = [
                            t.constant(qc.clone()),
                            t.constant(kc.clone()),
                            t.constant(vc.clone()),
                        ];
                        args[which] = x;
                        let y = dala_attention_op(args[0], args[1], args[2], &pc, &opts)?;
                        Ok(y.mul(t.constant(wc.clone()))?.sum())
                    },
                    &input,
                    1e-6,
                );
                assert!(err <= 1e-4, "rotated {rotated}, input {which}: {err}");
            }
        }
    }

    fn layer(d: usize, seed: u64) -> (ParamStore, MambaDala) {
        let mut store = ParamStore::new();
        let m = MambaDala::new(&mut store, "dala", DalaConfig::new(d), &mut rng(seed)).unwrap();
        (store, m)
    }

    fn run(store: &ParamStore, m: &MambaDala, x: &Tensor, priors: &DelayPriors) -> Tensor {
        let tape = Tape::inference();
        let g = TokenGrid::new(Layout::VariateMajor, tape.constant(x.clone()));
        (*m.forward(&tape, store, g, priors).unwrap().tokens.value()).clone()
    }

    #[test]
    fn gate_kill() {
        let (mut store, m) = layer(4, 12);
        store.set(m.gate.weight, Tensor::zeros(&[4, 8])).unwrap();
        store
            .set(m.gate.bias.unwrap(), Tensor::full(&[8], -60.0))
            .unwrap();
        let y = run(
            &store,
            &m,
            &randn_like(&[5, 2, 4], &mut rng(13)),
            &DelayPriors::identity(2),
        );
        assert!(y.max_abs() < 1e-20);
    }

    #[test]
    fn layer_causality_with_shift() {
        let (store, m) = layer(4, 14);
        let mut r = rng(15);
        for _ in 0..10 {
            let (l_len, n) = (9, 3);
            let priors = random_priors(n, 2, &mut r);
            let reach = priors
                .delta_tok
                .iter()
                .flatten()
                .map(|d| d.abs())
                .max()
                .unwrap();
            let x = randn_like(&[l_len, n, 4], &mut r);
            let y = run(&store, &m, &x, &priors);
            let cut = r.random_range(0..l_len);
            let mut xt = x.clone();
            for i in (cut + 1) * n * 4..xt.len() {
                xt.data_mut()[i] = 0.0;
            }
            let yt = run(&store, &m, &xt, &priors);
            let upto = cut as i64 - reach;
            for l in 0..l_len {
                if l as i64 > upto {
                    continue;
                }
                for i in l * n * 4..(l + 1) * n * 4 {
                    assert!((y.data()[i] - yt.data()[i]).abs() <= 1e-9);
                }
            }
        }
    }

    #[test]
    fn layer_gradients() {
        let (store, m) = layer(3, 16);
        let mut r = rng(17);
        let x = randn_like(&[4, 2, 3], &mut r);
        let w = randn_like(&[4, 2, 3], &mut r);
        let mut priors = DelayPriors::identity(2);
        priors.delta_tok = vec![vec![0, 1], vec![-1, 0]];
        priors.rho = vec![vec![1.0, 0.8], vec![0.6, 1.0]];
        for id in [
            m.to_q.weight,
            m.to_k.weight,
            m.to_v.weight,
            m.content.weight,
            m.gate.bias.unwrap(),
            m.out.weight,
        ] {
            let err = param_grad_check(
                &store,
                id,
                |tape, s| {
                    let g = TokenGrid::new(Layout::VariateMajor, tape.constant(x.clone()));
                    let y = m.forward(tape, s, g, &priors)?.tokens;
                    Ok(y.mul(tape.constant(w.clone()))?.sum())
                },
                1e-6,
            );
            assert!(err <= 1e-4, "{}: {err}", store.name(id));
        }
    }
}
