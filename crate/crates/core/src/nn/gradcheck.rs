//! Central finite-difference verification of analytic gradients, in `f64`.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;

/// Gradients smaller than this are compared in absolute rather than relative terms.
pub const REL_ERR_FLOOR: f64 = 1e-3;

/// A scalar function of the parameters.
pub trait Objective {
    /// Returns the loss; when `with_grad` is set, also adds d loss / d param into
    /// the store's `grad` tensors.
    fn evaluate(&mut self, store: &mut ParamStore<f64>, with_grad: bool) -> Result<f64>;
}

impl<F> Objective for F
where
    F: FnMut(&mut ParamStore<f64>, bool) -> Result<f64>,
{
    fn evaluate(&mut self, store: &mut ParamStore<f64>, with_grad: bool) -> Result<f64> {
        self(store, with_grad)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorCheck {
    pub name: String,
    pub elements: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorCheck>,
    pub max_rel_err: f64,
    pub tol: f64,
    pub passed: bool,
}

/// `|a - n| / max(|a|, |n|, REL_ERR_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compares the analytic gradient of every trainable entry against
/// `(f(w + eps) - f(w - eps)) / 2 eps`, one element at a time.
pub fn grad_check(f: &mut impl Objective, store: &mut ParamStore<f64>, eps: f64, tol: f64) -> Result<GradCheckReport> {
    if !(eps > 0.0) || !(tol > 0.0) {
        return Err(Error::InvalidParameter(format!("eps {eps} and tol {tol} must be > 0")));
    }
    store.zero_grad();
    let base = f.evaluate(store, true)?;
    let again = f.evaluate(store, false)?;
    if base.to_bits() != again.to_bits() {
        return Err(Error::NonDeterministic(format!("two forward passes gave {base:e} and {again:e}")));
    }
    let analytic: Vec<Vec<f64>> = store.iter().map(|e| e.grad.data().to_vec()).collect();

    let mut tensors = Vec::new();
    for id in 0..store.len() {
        if !store.entry(id).kind.trainable() {
            continue;
        }
        let mut check = TensorCheck {
            name: store.entry(id).name.clone(),
            elements: store.entry(id).value.numel(),
            max_rel_err: 0.0,
            max_abs_err: 0.0,
        };
        for k in 0..check.elements {
            let orig = store.entry(id).value.data()[k];
            store.entry_mut(id).value.data_mut()[k] = orig + eps;
            let plus = f.evaluate(store, false)?;
            store.entry_mut(id).value.data_mut()[k] = orig - eps;
            let minus = f.evaluate(store, false)?;
            store.entry_mut(id).value.data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[id][k];
            check.max_abs_err = check.max_abs_err.max((a - numeric).abs());
            check.max_rel_err = check.max_rel_err.max(relative_error(a, numeric));
        }
        tensors.push(check);
    }
    let max_rel_err = tensors.iter().map(|t| t.max_rel_err).fold(0.0, f64::max);
    Ok(GradCheckReport { tensors, max_rel_err, tol, passed: max_rel_err <= tol })
}
