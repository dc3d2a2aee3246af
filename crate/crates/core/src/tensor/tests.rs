use super::*;
use crate::error::DemaError;
use crate::testutil::{grad_check, randn_like, rng};

fn naive_matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                out[i * n + j] += a.data()[i * k + p] * b.data()[p * n + j];
            }
        }
    }
    Tensor::new(vec![m, n], out).unwrap()
}

/// Direct O(T^2) DFT, independent of the FFT path.
fn naive_dft(x: &[f64]) -> Vec<(f64, f64)> {
    let t = x.len();
    (0..=t / 2)
        .map(|k| {
            let mut re = 0.0;
            let mut im = 0.0;
            for (s, &v) in x.iter().enumerate() {
                let ang = -2.0 * std::f64::consts::PI * (k * s) as f64 / t as f64;
                re += v * ang.cos();
                im += v * ang.sin();
            }
            (re, im)
        })
        .collect()
}

#[test]
fn matmul_identity_and_hand_example() {
    let tape = Tape::inference();
    let a = Tensor::new(vec![3, 3], (1..=9).map(f64::from).collect()).unwrap();
    let i3 = tape.constant(Tensor::eye(3));
    let out = i3.matmul(tape.constant(a.clone())).unwrap();
    assert_eq!(*out.value(), a);

    let a = tape.constant(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let b = tape.constant(Tensor::new(vec![2, 1], vec![1.0, 1.0]).unwrap());
    assert_eq!(a.matmul(b).unwrap().value().data(), &[3.0, 7.0]);
}

#[test]
fn matmul_matches_triple_loop() {
    let mut r = rng(7);
    let a = randn_like(&[5, 7], &mut r);
    let b = randn_like(&[7, 3], &mut r);
    let tape = Tape::inference();
    let got = tape
        .constant(a.clone())
        .matmul(tape.constant(b.clone()))
        .unwrap();
    assert!(got.value().max_abs_diff(&naive_matmul(&a, &b)) <= 1e-12);
}

#[test]
fn matmul_shape_mismatch() {
    let tape = Tape::inference();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    assert!(matches!(a.matmul(b), Err(DemaError::Shape(_))));
}

#[test]
fn rfft_constant_is_dc_only() {
    let c = 2.5;
    let s = rfft(&[c; 4]).unwrap();
    assert!((s.coeffs()[0].re - 4.0 * c).abs() < 1e-12);
    assert!(s.coeffs()[1..].iter().all(|z| z.norm() < 1e-12));
}

#[test]
fn rfft_sinusoid_peak_matches_direct_dft() {
    let x: Vec<f64> = (0..16)
        .map(|t| (2.0 * std::f64::consts::PI * t as f64 / 8.0).sin())
        .collect();
    let s = rfft(&x).unwrap();
    let oracle = naive_dft(&x);
    for (z, (re, im)) in s.coeffs().iter().zip(&oracle) {
        assert!((z.re - re).abs() < 1e-9 && (z.im - im).abs() < 1e-9);
    }
    let amps = s.amplitudes();
    let peak = (0..amps.len())
        .max_by(|&a, &b| amps[a].total_cmp(&amps[b]))
        .unwrap();
    assert_eq!(peak, 2);
}

#[test]
fn rfft_roundtrip_all_lengths() {
    let mut r = rng(11);
    for t in 4..=512 {
        let x = randn_like(&[t], &mut r);
        let back = irfft(&rfft(x.data()).unwrap()).unwrap();
        let err = x
            .data()
            .iter()
            .zip(&back)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err <= 1e-9, "T={t}: {err}");
    }
}

#[test]
fn rfft_empty_input() {
    assert!(matches!(rfft(&[]), Err(DemaError::EmptyInput)));
}

#[test]
fn elementwise_analytic_values() {
    let tape = Tape::inference();
    let z = tape.constant(Tensor::scalar(0.0));
    assert!((z.softplus().unwrap().value().data()[0] - std::f64::consts::LN_2).abs() < 1e-12);
    assert_eq!(z.sigmoid().unwrap().value().data()[0], 0.5);
    let c = tape.constant(Tensor::full(&[2, 5], 3.0));
    let ln = c.layer_norm(None, None, 1e-5).unwrap();
    assert!(ln.value().max_abs() < 1e-12);
}

#[test]
fn non_finite_inputs_are_rejected() {
    let tape = Tape::inference();
    let bad = tape.constant(Tensor::new(vec![2], vec![1.0, f64::NAN]).unwrap());
    assert!(matches!(bad.sigmoid(), Err(DemaError::Numeric(_))));
    assert!(matches!(bad.softplus(), Err(DemaError::Numeric(_))));
    assert!(matches!(
        bad.layer_norm(None, None, 1e-5),
        Err(DemaError::Numeric(_))
    ));
}

#[test]
fn square_gradient() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::scalar(3.0));
    let y = x.mul(x).unwrap();
    let g = tape.backward(y).unwrap();
    assert_eq!(g.wrt(x).unwrap().data(), &[6.0]);
}

#[test]
fn backward_rejects_non_scalar() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::zeros(&[3]));
    assert!(matches!(tape.backward(x), Err(DemaError::Contract(_))));
}

#[test]
fn unused_parameter_has_zero_gradient() {
    let mut store = ParamStore::new();
    let used = store.full("used", &[2], 1.0);
    let unused = store.full("unused", &[3], 1.0);
    let tape = Tape::new();
    let loss = tape.param(&store, used).sum();
    let _ = tape.param(&store, unused);
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.param(&store, used).data(), &[1.0, 1.0]);
    assert_eq!(g.param(&store, unused), Tensor::zeros(&[3]));
}

#[test]
fn sigmoid_of_linear_matches_finite_differences() {
    let mut r = rng(3);
    let w = randn_like(&[4, 3], &mut r);
    let x = randn_like(&[1, 4], &mut r);
    let err = grad_check(
        |wv| {
            let xv = wv.tape().constant(x.clone());
            Ok(xv.matmul(wv)?.sigmoid()?.sum())
        },
        &w,
        1e-5,
    );
    assert!(err <= 1e-4, "{err}");
}

/// Every differentiable op against central differences at 10 random points.
#[test]
fn per_op_finite_difference_checks() {
    type Op = fn(Var<'_>) -> crate::Result<Var<'_>>;
    let ops: Vec<(&str, Vec<usize>, Op)> = vec![
        ("exp", vec![2, 3], |x| Ok(x.exp().sum())),
        ("sigmoid", vec![2, 3], |x| Ok(x.sigmoid()?.sum())),
        ("softplus", vec![2, 3], |x| Ok(x.softplus()?.sum())),
        ("gelu", vec![2, 3], |x| Ok(x.gelu().sum())),
        ("affine", vec![2, 3], |x| {
            Ok(x.affine(-1.5, 0.3).mul(x)?.sum())
        }),
        ("mul_sub_add", vec![2, 3], |x| {
            Ok(x.mul(x.exp())?.sub(x)?.add(x.sigmoid()?)?.sum())
        }),
        ("layer_norm", vec![3, 5], |x| {
            let t = x.tape();
            let g = t.leaf(Tensor::from_fn(&[5], |i| 0.5 + i as f64 * 0.1));
            let b = t.leaf(Tensor::from_fn(&[5], |i| -0.2 + i as f64 * 0.05));
            let w = t.constant(Tensor::from_fn(&[3, 5], |i| {
                ((i * 7 % 5) as f64 - 2.0) * 0.3
            }));
            Ok(x.layer_norm(Some(g), Some(b), 1e-5)?.mul(w)?.sum())
        }),
        ("linear", vec![2, 3, 4], |x| {
            let t = x.tape();
            let w = t.constant(Tensor::from_fn(&[4, 2], |i| (i as f64 - 3.0) * 0.2));
            let b = t.constant(Tensor::new(vec![2], vec![0.1, -0.3]).unwrap());
            Ok(x.linear(w, Some(b))?.sigmoid()?.sum())
        }),
        ("linear_weight", vec![3, 2], |w| {
            let t = w.tape();
            let x = t.constant(Tensor::from_fn(&[4, 3], |i| (i as f64 * 0.37).sin()));
            Ok(x.linear(w, None)?.sigmoid()?.sum())
        }),
        ("conv1d_causal", vec![2, 6, 3], |x| {
            let t = x.tape();
            let k = t.leaf(Tensor::from_fn(&[3, 4], |i| (i as f64 * 0.7).cos() * 0.5));
            let b = t.leaf(Tensor::from_fn(&[3], |i| i as f64 * 0.1));
            Ok(x.conv1d(k, Some(b), Padding::Causal)?.sigmoid()?.sum())
        }),
        ("conv1d_same", vec![1, 5, 2], |x| {
            let t = x.tape();
            let k = t.constant(Tensor::from_fn(&[2, 3], |i| (i as f64 * 0.9).sin()));
            Ok(x.conv1d(k, None, Padding::Same)?.sigmoid()?.sum())
        }),
        ("swap01", vec![2, 3, 2], |x| {
            let w = x
                .tape()
                .constant(Tensor::from_fn(&[3, 2, 2], |i| i as f64 * 0.1 - 0.5));
            Ok(x.swap01()?.mul(w)?.sum())
        }),
        ("mean_rows_softmax", vec![4, 3], |x| {
            let w = x
                .tape()
                .constant(Tensor::new(vec![3], vec![0.3, -1.0, 2.0]).unwrap());
            Ok(x.mean_rows()?.softmax().mul(w)?.sum())
        }),
        ("mse_masked", vec![2, 4], |x| {
            let target = Tensor::from_fn(&[2, 4], |i| i as f64 * 0.1);
            let mask = Tensor::from_fn(&[2, 4], |i| (i % 2) as f64);
            x.mse(&target, Some(&mask))
        }),
        ("row_affine", vec![2, 3], |x| {
            Ok(x.row_affine(&[2.0, -0.5], &[1.0, 3.0])?.sigmoid()?.sum())
        }),
        ("mul_last", vec![3, 4], |x| {
            let v = x.tape().leaf(Tensor::from_fn(&[4], |i| i as f64 - 1.5));
            Ok(x.mul_last(v)?.sigmoid()?.sum())
        }),
    ];
    let mut r = rng(42);
    for (name, shape, op) in ops {
        for _ in 0..10 {
            let x = randn_like(&shape, &mut r);
            let err = grad_check(op, &x, 1e-5);
            assert!(err <= 1e-4, "{name}: rel err {err}");
        }
    }
}

#[test]
fn ops_are_pure() {
    let mut r = rng(5);
    let x = randn_like(&[3, 8], &mut r);
    let w = randn_like(&[8, 4], &mut r);
    let run = || {
        let tape = Tape::inference();
        let y = tape
            .constant(x.clone())
            .linear(tape.constant(w.clone()), None)
            .unwrap();
        let y = y.layer_norm(None, None, 1e-5).unwrap().gelu().softmax();
        (*y.value()).clone()
    };
    let a = run();
    let b = run();
    assert!(a
        .data()
        .iter()
        .zip(b.data())
        .all(|(p, q)| p.to_bits() == q.to_bits()));
}

#[test]
fn causal_conv_ignores_future() {
    let tape = Tape::inference();
    let x = Tensor::from_fn(&[1, 6, 1], |i| i as f64 + 1.0);
    let mut y = x.clone();
    y.data_mut()[5] = 100.0;
    let k = tape.constant(Tensor::full(&[1, 4], 1.0));
    let a = tape
        .constant(x)
        .conv1d(k, None, Padding::Causal)
        .unwrap()
        .value();
    let b = tape
        .constant(y)
        .conv1d(k, None, Padding::Causal)
        .unwrap()
        .value();
    assert_eq!(&a.data()[..5], &b.data()[..5]);
    assert_eq!(a.data()[0], 1.0);
    assert_eq!(a.data()[3], 1.0 + 2.0 + 3.0 + 4.0);
}

#[test]
fn swap01_index_law() {
    let t = Tensor::from_fn(&[2, 3, 4], |i| i as f64);
    let s = t.swap01().unwrap();
    assert_eq!(s.shape(), &[3, 2, 4]);
    for n in 0..2 {
        for l in 0..3 {
            for d in 0..4 {
                assert_eq!(t.data()[(n * 3 + l) * 4 + d], s.data()[(l * 2 + n) * 4 + d]);
            }
        }
    }
    assert_eq!(s.swap01().unwrap(), t);
}
