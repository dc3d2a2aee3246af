//! Finite-difference and random-input helpers shared by unit tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::Result;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn_like(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Norm-wise relative error `|a - b| / max(|a|, |b|, 1e-12)`.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-12)
}

/// Compare the tape gradient of a scalar function of `x` against central
/// differences with step `h`. Returns the norm-wise relative error.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> f64
where
    F: for<'t> Fn(Var<'t>) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let leaf = tape.leaf(x.clone());
    let loss = f(leaf).expect("forward");
    let grads = tape.backward(loss).expect("backward");
    let analytic = grads
        .wrt(leaf)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape()));

    let eval = |t: &Tensor| -> f64 {
        let tape = Tape::inference();
        let v = tape.constant(t.clone());
        f(v).expect("forward").value().data()[0]
    };
    let numeric: Vec<f64> = (0..x.len())
        .map(|i| {
            let mut plus = x.clone();
            plus.data_mut()[i] += h;
            let mut minus = x.clone();
            minus.data_mut()[i] -= h;
            (eval(&plus) - eval(&minus)) / (2.0 * h)
        })
        .collect();
    rel_err(analytic.data(), &numeric)
}

/// As [`grad_check`], but for every entry of parameter `id` of a loss
/// built from `store`.
pub fn param_grad_check<F>(store: &ParamStore, id: ParamId, f: F, h: f64) -> f64
where
    F: for<'t> Fn(&'t Tape, &ParamStore) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let loss = f(&tape, store).expect("forward");
    let analytic = tape.backward(loss).expect("backward").param(store, id);

    let eval = |s: &ParamStore| -> f64 {
        let tape = Tape::inference();
        f(&tape, s).expect("forward").value().data()[0]
    };
    let mut work = store.clone();
    let n = store.get(id).len();
    let numeric: Vec<f64> = (0..n)
        .map(|i| {
            let orig = store.get(id).data()[i];
            work.get_mut(id).data_mut()[i] = orig + h;
            let up = eval(&work);
            work.get_mut(id).data_mut()[i] = orig - h;
            let down = eval(&work);
            work.get_mut(id).data_mut()[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect();
    rel_err(analytic.data(), &numeric)
}
