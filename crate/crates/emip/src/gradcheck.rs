//! Central finite-difference checks of autograd gradients.
//!
//! Intended for `f64` stores on toy shapes: every parameter is first set to
//! random values (so zero-initialized projections do not hide the rest of a
//! block), then a sample of coordinates per parameter is perturbed by `±eps`.

use candle_core::{DType, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::params::ParamStore;

/// Worst disagreement found.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    /// `max |analytic - numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_err: f64,
    /// Parameter, analytic and numeric gradient at the worst coordinate.
    pub worst: Option<(String, f64, f64)>,
    pub coords_checked: usize,
}

/// Denominator floor that keeps vanishing gradients from dominating.
pub const REL_FLOOR: f64 = 1e-6;

/// Replaces every parameter with `N(0, scale^2)`-ish uniform noise.
pub fn randomize(store: &ParamStore, seed: u64, scale: f64) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (_, var) in store.trainable_vars() {
        let n = var.elem_count();
        let vals: Vec<f64> = (0..n).map(|_| rng.gen_range(-scale..scale)).collect();
        let t = Tensor::from_vec(vals, var.dims(), var.device())?.to_dtype(var.dtype())?;
        var.set(&t)?;
    }
    Ok(())
}

fn nudge(var: &Var, index: usize, delta: f64) -> Result<()> {
    let mut v = var.as_tensor().flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
    v[index] += delta;
    let t = Tensor::from_vec(v, var.dims(), var.device())?.to_dtype(var.dtype())?;
    var.set(&t)?;
    Ok(())
}

fn value(loss: &Tensor) -> Result<f64> {
    Ok(loss.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Compares autograd against central differences of the scalar `loss()` for
/// up to `per_param` coordinates of every trainable parameter.
pub fn check<F>(store: &ParamStore, loss: F, eps: f64, per_param: usize, seed: u64) -> Result<GradCheck>
where
    F: Fn() -> Result<Tensor>,
{
    let grads = loss()?.backward()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut at = None;
    let mut checked = 0;
    for (name, var) in store.trainable_vars() {
        let analytic = match grads.get(var.as_tensor()) {
            Some(g) => g.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?,
            None => vec![0.0; var.elem_count()],
        };
        let n = var.elem_count();
        let picks: Vec<usize> = if n <= per_param {
            (0..n).collect()
        } else {
            (0..per_param).map(|_| rng.gen_range(0..n)).collect()
        };
        for i in picks {
            nudge(&var, i, eps)?;
            let up = value(&loss()?)?;
            nudge(&var, i, -2.0 * eps)?;
            let down = value(&loss()?)?;
            nudge(&var, i, eps)?;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            if rel > worst || at.is_none() {
                worst = worst.max(rel);
                at = Some((name.clone(), a, numeric));
            }
            checked += 1;
        }
    }
    Ok(GradCheck {
        max_rel_err: worst,
        worst: at,
        coords_checked: checked,
    })
}

/// A fixed random projection that turns any output into a scalar with
/// non-trivial gradients everywhere.
pub fn probe(like: &Tensor, seed: u64) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vals: Vec<f64> = (0..like.elem_count()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Ok(Tensor::from_vec(vals, like.dims(), like.device())?.to_dtype(like.dtype())?)
}
