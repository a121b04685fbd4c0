#[allow(unused_imports)]
use crate::math::FloatExt;
use alloc::collections::BTreeMap;
use alloc::string::String;


use super::{Binding, NeuralError, ParamStore, Tape, Tensor, Var};

/// Relative error floor used when both the analytic and numeric values vanish.
pub const REL_ERR_FLOOR: f64 = 1e-12;

/// Compares tape gradients of `f` against central differences over every
/// coordinate of every parameter in `params`.
///
/// Returns `max |a − d| / max(|a|, |d|, 1e-12)`.
pub fn grad_check<F>(f: F, params: &ParamStore, eps: f64) -> Result<f64, NeuralError>
where
    F: Fn(&mut Tape, Binding<'_>) -> Var,
{
    let mut tape = Tape::new();
    let loss = f(&mut tape, Binding::trainable(params));
    let analytic = tape.backward(loss)?.params();
    grad_check_against(f, params, eps, &analytic)
}

/// Same as [`grad_check`] but with caller-supplied analytic gradients.
/// Parameters missing from `analytic` are treated as having zero gradient.
pub fn grad_check_against<F>(
    f: F,
    params: &ParamStore,
    eps: f64,
    analytic: &BTreeMap<String, Tensor>,
) -> Result<f64, NeuralError>
where
    F: Fn(&mut Tape, Binding<'_>) -> Var,
{
    let eval = |store: &ParamStore| -> Result<f64, NeuralError> {
        let mut tape = Tape::new();
        let v = f(&mut tape, Binding::frozen(store));
        let x = tape.value(v).item();
        if x.is_finite() {
            Ok(x)
        } else {
            Err(NeuralError::NonFinite)
        }
    };
    let mut work = params.clone();
    let mut worst: f64 = 0.0;
    for (name, value) in params.iter() {
        for k in 0..value.len() {
            let orig = value.data()[k];
            work.get_mut(name).unwrap().data_mut()[k] = orig + eps;
            let up = eval(&work)?;
            work.get_mut(name).unwrap().data_mut()[k] = orig - eps;
            let down = eval(&work)?;
            work.get_mut(name).unwrap().data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic.get(name).map_or(0.0, |g| g.data()[k]);
            if !a.is_finite() {
                return Err(NeuralError::NonFinite);
            }
            let denom = a.abs().max(numeric.abs()).max(REL_ERR_FLOOR);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}
