//! Temporal path: a selective state-space scan run independently per variate.
//!
//! Every channel `d` of the content branch drives its own diagonal SSM with
//! `D_h` states that share the token-dependent `Ā_t`, `B̄_t`, `C_t`:
//!
//! ```text
//! h_t[k, d] = Ā_t[k] h_{t-1}[k, d] + B̄_t[k] x_t[d]
//! y_t[d]    = Σ_k C_t[k] h_t[k, d]
//! ```
//!
//! The state is zeroed at the start of each variate's sequence.

use rand::Rng;

use crate::embedding::{Layout, TokenGrid};
use crate::error::{config_err, shape_err, DemaError, Result};
use crate::layers::Linear;
use crate::tensor::gemm::{gemm, MatRef};
use crate::tensor::{Padding, ParamId, ParamStore, Tape, Tensor, Var};

/// Token-dependent SSM parameters, each `[N, L, D_h]` except `a_log: [D_h]`.
#[derive(Clone, Copy, Debug)]
pub struct SelectiveParams<'t> {
    pub delta: Var<'t>,
    pub b: Var<'t>,
    pub c: Var<'t>,
    pub a_log: Var<'t>,
}

#[derive(Clone, Copy, Debug)]
pub struct DiscreteSsm<'t> {
    pub a_bar: Var<'t>,
    pub b_bar: Var<'t>,
}

/// `Ā = exp(Δ ⊙ A)` and `B̄ = (1 − Ā) ⊙ B` with `A = −exp(a_log)`.
pub fn discretize<'t>(p: &SelectiveParams<'t>) -> Result<DiscreteSsm<'t>> {
    let a = p.a_log.exp().scale(-1.0);
    let a_bar = p.delta.mul_last(a)?.exp();
    let b_bar = a_bar.affine(-1.0, 1.0).mul(p.b)?;
    Ok(DiscreteSsm { a_bar, b_bar })
}

struct ScanDims {
    n: usize,
    l: usize,
    h: usize,
    u: usize,
}

fn scan_dims(a_bar: &Tensor, b_bar: &Tensor, c: &Tensor, x: &Tensor) -> Result<ScanDims> {
    let (sa, sx) = (a_bar.shape(), x.shape());
    if sa.len() != 3
        || sx.len() != 3
        || sa[..2] != sx[..2]
        || b_bar.shape() != sa
        || c.shape() != sa
    {
        return shape_err(format!(
            "scan: a_bar {:?}, b_bar {:?}, c {:?}, x {:?}",
            sa,
            b_bar.shape(),
            c.shape(),
            sx
        ));
    }
    Ok(ScanDims {
        n: sa[0],
        l: sa[1],
        h: sa[2],
        u: sx[2],
    })
}

/// Step-by-step recurrence. `a_bar, b_bar, c: [N, L, D_h]`, `x: [N, L, D_u]`,
/// output `[N, L, D_u]`.
pub fn ssm_scan_reference(
    a_bar: &Tensor,
    b_bar: &Tensor,
    c: &Tensor,
    x: &Tensor,
) -> Result<Tensor> {
    let ScanDims { n, l, h, u } = scan_dims(a_bar, b_bar, c, x)?;
    let mut y = vec![0.0; n * l * u];
    let mut state = vec![0.0; h * u];
    for v in 0..n {
        state.fill(0.0);
        for t in 0..l {
            let row = v * l + t;
            let (a, b, ct) = (
                &a_bar.data()[row * h..][..h],
                &b_bar.data()[row * h..][..h],
                &c.data()[row * h..][..h],
            );
            let xt = &x.data()[row * u..][..u];
            let yt = &mut y[row * u..][..u];
            for k in 0..h {
                let hk = &mut state[k * u..][..u];
                for d in 0..u {
                    hk[d] = a[k] * hk[d] + b[k] * xt[d];
                    yt[d] += ct[k] * hk[d];
                }
            }
        }
    }
    Tensor::new(vec![n, l, u], y)
}

/// Chunked evaluation of the same scan. Within a chunk of `Q` tokens the
/// output is a `Q × Q` lower-triangular matrix `M[j, i] = Σ_k C_j[k] Ā_{i+1..j}[k] B̄_i[k]`
/// applied to the inputs, plus the decayed state carried in from the
/// previous chunk.
pub fn ssd_blocked(
    a_bar: &Tensor,
    b_bar: &Tensor,
    c: &Tensor,
    x: &Tensor,
    chunk: usize,
) -> Result<Tensor> {
    if chunk == 0 {
        return config_err("chunk size must be positive");
    }
    let ScanDims { n, l, h, u } = scan_dims(a_bar, b_bar, c, x)?;
    let mut y = vec![0.0; n * l * u];
    let (ad, bd, cd, xd) = (a_bar.data(), b_bar.data(), c.data(), x.data());
    let q_max = chunk.min(l.max(1));
    let mut m = vec![0.0; q_max * q_max];
    let mut prod = vec![0.0; h];
    let mut c_dec = vec![0.0; q_max * h];
    let mut b_dec = vec![0.0; q_max * h];
    let mut state = vec![0.0; h * u];
    for v in 0..n {
        state.fill(0.0);
        let base = v * l;
        for s in (0..l).step_by(chunk) {
            let q = chunk.min(l - s);
            let at = |j: usize| &ad[(base + s + j) * h..][..h];
            let bt = |j: usize| &bd[(base + s + j) * h..][..h];
            let ctk = |j: usize| &cd[(base + s + j) * h..][..h];

            m[..q * q].fill(0.0);
            for i in 0..q {
                prod.fill(1.0);
                for j in i..q {
                    if j > i {
                        for (p, a) in prod.iter_mut().zip(at(j)) {
                            *p *= a;
                        }
                    }
                    let (cj, bi) = (ctk(j), bt(i));
                    m[j * q + i] = (0..h).map(|k| cj[k] * prod[k] * bi[k]).sum();
                }
            }

            // Decay from the chunk start through token j, and from token i+1 to the chunk end.
            prod.fill(1.0);
            for j in 0..q {
                for (k, p) in prod.iter_mut().enumerate() {
                    *p *= at(j)[k];
                    c_dec[j * h + k] = ctk(j)[k] * *p;
                }
            }
            let chunk_decay = prod.clone();
            prod.fill(1.0);
            for i in (0..q).rev() {
                for (k, p) in prod.iter_mut().enumerate() {
                    b_dec[i * h + k] = *p * bt(i)[k];
                    *p *= at(i)[k];
                }
            }

            let xs = &xd[(base + s) * u..(base + s + q) * u];
            let ys = &mut y[(base + s) * u..(base + s + q) * u];
            gemm(
                1.0,
                MatRef::new(&m[..q * q], q, q),
                MatRef::new(xs, q, u),
                0.0,
                ys,
            );
            gemm(
                1.0,
                MatRef::new(&c_dec[..q * h], q, h),
                MatRef::new(&state, h, u),
                1.0,
                ys,
            );

            for (k, row) in state.chunks_mut(u).enumerate() {
                for v in row.iter_mut() {
                    *v *= chunk_decay[k];
                }
            }
            gemm(
                1.0,
                MatRef::new(&b_dec[..q * h], q, h).t(),
                MatRef::new(xs, q, u),
                1.0,
                &mut state,
            );
        }
    }
    Tensor::new(vec![n, l, u], y)
}

/// Differentiable scan: forward through [`ssd_blocked`], backward by the
/// reverse recurrence on recomputed states.
pub fn selective_scan<'t>(
    a_bar: Var<'t>,
    b_bar: Var<'t>,
    c: Var<'t>,
    x: Var<'t>,
    chunk: usize,
) -> Result<Var<'t>> {
    let (av, bv, cv, xv) = (a_bar.value(), b_bar.value(), c.value(), x.value());
    let y = ssd_blocked(&av, &bv, &cv, &xv, chunk)?;
    let tape = a_bar.tape();
    Ok(tape.record(y, &[a_bar, b_bar, c, x], move |g| {
        let ScanDims { n, l, h, u } = scan_dims(&av, &bv, &cv, &xv).expect("checked in forward");
        let (ad, bd, cd, xd, gd) = (av.data(), bv.data(), cv.data(), xv.data(), g.data());
        let mut ga = vec![0.0; n * l * h];
        let mut gb = vec![0.0; n * l * h];
        let mut gc = vec![0.0; n * l * h];
        let mut gx = vec![0.0; n * l * u];
        let mut states = vec![0.0; (l + 1) * h * u];
        let mut dh = vec![0.0; h * u];
        for v in 0..n {
            let base = v * l;
            for t in 0..l {
                let row = base + t;
                let (prev, cur) = states[t * h * u..(t + 2) * h * u].split_at_mut(h * u);
                for k in 0..h {
                    let (a, b) = (ad[row * h + k], bd[row * h + k]);
                    for d in 0..u {
                        cur[k * u + d] = a * prev[k * u + d] + b * xd[row * u + d];
                    }
                }
            }
            dh.fill(0.0);
            for t in (0..l).rev() {
                let row = base + t;
                let gt = &gd[row * u..][..u];
                let xt = &xd[row * u..][..u];
                let h_prev = &states[t * h * u..][..h * u];
                let h_cur = &states[(t + 1) * h * u..][..h * u];
                for k in 0..h {
                    let ck = cd[row * h + k];
                    let bk = bd[row * h + k];
                    let (mut dc, mut da, mut db) = (0.0, 0.0, 0.0);
                    for d in 0..u {
                        let i = k * u + d;
                        dh[i] += ck * gt[d];
                        dc += h_cur[i] * gt[d];
                        da += dh[i] * h_prev[i];
                        db += dh[i] * xt[d];
                        gx[row * u + d] += dh[i] * bk;
                    }
                    gc[row * h + k] = dc;
                    ga[row * h + k] = da;
                    gb[row * h + k] = db;
                    let ak = ad[row * h + k];
                    for v in &mut dh[k * u..(k + 1) * u] {
                        *v *= ak;
                    }
                }
            }
        }
        let sh = vec![n, l, h];
        vec![
            Some(Tensor::new(sh.clone(), ga).expect("shape")),
            Some(Tensor::new(sh.clone(), gb).expect("shape")),
            Some(Tensor::new(sh, gc).expect("shape")),
            Some(Tensor::new(vec![n, l, u], gx).expect("shape")),
        ]
    }))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SsdConfig {
    pub d_model: usize,
    pub d_inner: usize,
    pub d_state: usize,
    pub conv_kernel: usize,
    pub chunk: usize,
}

impl SsdConfig {
    pub fn new(d_model: usize) -> Self {
        Self {
            d_model,
            d_inner: 2 * d_model,
            d_state: 16,
            conv_kernel: 4,
            chunk: 16,
        }
    }
}

/// `softplus⁻¹(y)` for `y > 0`.
fn inv_softplus(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

/// Parameters of one temporal-path layer.
#[derive(Clone, Debug)]
pub struct MambaSsd {
    pub cfg: SsdConfig,
    pub content: Linear,
    pub gate: Linear,
    pub conv_weight: ParamId,
    pub conv_bias: ParamId,
    pub to_delta: Linear,
    pub to_b: Linear,
    pub to_c: Linear,
    pub a_log: ParamId,
    pub out: Linear,
}

impl MambaSsd {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        cfg: SsdConfig,
        rng: &mut R,
    ) -> Result<Self> {
        if cfg.d_model == 0 || cfg.d_inner == 0 || cfg.d_state == 0 || cfg.conv_kernel == 0 {
            return config_err("ssd widths and conv kernel must be positive");
        }
        if cfg.chunk == 0 {
            return config_err("chunk size must be positive");
        }
        let (d, du, dh) = (cfg.d_model, cfg.d_inner, cfg.d_state);
        let content = Linear::new(store, &format!("{name}.content"), d, du, true, rng);
        let gate = Linear::new(store, &format!("{name}.gate"), d, du, true, rng);
        let conv_weight = store.uniform(
            format!("{name}.conv.weight"),
            &[du, cfg.conv_kernel],
            cfg.conv_kernel,
            rng,
        );
        let conv_bias = store.zeros(format!("{name}.conv.bias"), &[du]);
        let to_delta = Linear::new(store, &format!("{name}.delta"), du, dh, true, rng);
        // Step sizes start log-uniform in [1e-3, 1e-1].
        let b = to_delta.bias.expect("has bias");
        for v in store.get_mut(b).data_mut() {
            let dt = (rng.random_range(0.001f64.ln()..0.1f64.ln())).exp();
            *v = inv_softplus(dt);
        }
        let to_b = Linear::new(store, &format!("{name}.b"), du, dh, true, rng);
        let to_c = Linear::new(store, &format!("{name}.c"), du, dh, true, rng);
        let a_init = Tensor::from_fn(&[dh], |i| {
            let frac = if dh > 1 {
                i as f64 / (dh - 1) as f64
            } else {
                0.0
            };
            (1.0 + 15.0 * frac).ln()
        });
        let a_log = store.add(format!("{name}.a_log"), a_init);
        let out = Linear::new(store, &format!("{name}.out"), du, d, false, rng);
        Ok(Self {
            cfg,
            content,
            gate,
            conv_weight,
            conv_bias,
            to_delta,
            to_b,
            to_c,
            a_log,
            out,
        })
    }

    /// `Δ = softplus(x W_Δ + b_Δ)`, `B = x W_B + b_B`, `C = x W_C + b_C`.
    pub fn selective_params<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        x: Var<'t>,
    ) -> Result<SelectiveParams<'t>> {
        Ok(SelectiveParams {
            delta: self.to_delta.forward(tape, store, x)?.softplus()?,
            b: self.to_b.forward(tape, store, x)?,
            c: self.to_c.forward(tape, store, x)?,
            a_log: tape.param(store, self.a_log),
        })
    }

    /// Time-major `[N, L, D]` in, time-major `[N, L, D]` out.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        grid: TokenGrid<'t>,
    ) -> Result<TokenGrid<'t>> {
        if grid.layout != Layout::TimeMajor {
            return Err(DemaError::Contract(
                "temporal path needs a time-major grid".into(),
            ));
        }
        let x = grid.tokens;
        let content = self.content.forward(tape, store, x)?.conv1d(
            tape.param(store, self.conv_weight),
            Some(tape.param(store, self.conv_bias)),
            Padding::Causal,
        )?;
        let gate = self.gate.forward(tape, store, x)?.sigmoid()?;
        let params = self.selective_params(tape, store, content)?;
        let ssm = discretize(&params)?;
        let y = selective_scan(ssm.a_bar, ssm.b_bar, params.c, content, self.cfg.chunk)?;
        let out = self.out.forward(tape, store, y.mul(gate)?)?;
        Ok(TokenGrid::new(Layout::TimeMajor, out))
    }
}
