//! Central finite-difference checks of analytic gradients.

use super::graph::{Graph, ParamStore, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn check_eps(eps: f64) -> Result<()> {
    if !(eps > 0.0 && eps <= 1e-3) {
        return Err(Error::Contract(format!("gradient check eps {eps} outside (0, 1e-3]")));
    }
    Ok(())
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(1.0)
}

/// Compares the gradient of `build` at `point` against central differences.
///
/// Returns `max_i |g_i - fd_i| / max(1, |g_i|)`.
pub fn gradient_check<F>(build: F, point: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    check_eps(eps)?;
    let eval = |t: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let x = g.constant(t);
        let l = build(&mut g, x)?;
        g.value(l)?.item()
    };

    let mut g = Graph::new();
    let x = g.input(point.clone());
    let loss = build(&mut g, x)?;
    let base = g.value(loss)?.item()?;
    let grads = g.backward(loss)?;
    let analytic = grads
        .wrt(x)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(point.shape()));

    let again = eval(point.clone())?;
    if again.to_bits() != base.to_bits() {
        return Err(Error::NonDeterministic(format!("{base} then {again}")));
    }

    let mut worst: f64 = 0.0;
    for i in 0..point.len() {
        let mut plus = point.clone();
        plus.data_mut()[i] += eps;
        let mut minus = point.clone();
        minus.data_mut()[i] -= eps;
        let fd = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        worst = worst.max(rel_err(analytic.data()[i], fd));
    }
    Ok(worst)
}

/// Finite-difference check over every scalar of every parameter in `store`.
pub fn gradient_check_store<F>(store: &mut ParamStore, build: F, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    check_eps(eps)?;
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let l = build(&mut g, s)?;
        g.value(l)?.item()
    };

    let mut g = Graph::new();
    let loss = build(&mut g, store)?;
    let base = g.value(loss)?.item()?;
    let grads = g.backward(loss)?;
    store.absorb(&grads);
    if eval(store)?.to_bits() != base.to_bits() {
        return Err(Error::NonDeterministic("parameter loss changed between evaluations".into()));
    }

    let mut worst: f64 = 0.0;
    for p in 0..store.len() {
        let key = store.key(p);
        let analytic = store.get(key).grad.clone().expect("absorbed");
        for i in 0..analytic.len() {
            let orig = store.get(key).value.data()[i];
            store.get_mut(key).value.data_mut()[i] = orig + eps;
            let up = eval(store)?;
            store.get_mut(key).value.data_mut()[i] = orig - eps;
            let down = eval(store)?;
            store.get_mut(key).value.data_mut()[i] = orig;
            worst = worst.max(rel_err(analytic.data()[i], (up - down) / (2.0 * eps)));
        }
    }
    Ok(worst)
}
