//! Central finite-difference checks of tape gradients.

use rand::Rng;

use super::param::ParamStore;
use super::tape::{Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// Denominator floor of [`relative_error`]: gradients below this magnitude are
/// compared absolutely, since central differences cannot resolve them.
pub const REL_ERR_FLOOR: f64 = 1e-6;

/// `|analytic − numeric| / max(|analytic|, |numeric|, REL_ERR_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Worst-case agreement for one group of scalars.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupReport {
    pub name: String,
    pub scalars: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
}

/// Checks the gradient of `f` w.r.t. each of `inputs`, returning one report per
/// input.
pub fn check_inputs<F>(inputs: &[Tensor], step: f64, f: F) -> Result<Vec<GroupReport>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars = vals
            .iter()
            .map(|v| tape.leaf(v.clone(), true))
            .collect::<Result<Vec<_>>>()?;
        let loss = f(&mut tape, &vars)?;
        Ok(tape.value(loss).item())
    };

    let mut tape = Tape::new();
    let vars = inputs
        .iter()
        .map(|v| tape.leaf(v.clone(), true))
        .collect::<Result<Vec<_>>>()?;
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let mut reports = Vec::with_capacity(inputs.len());
    let mut work = inputs.to_vec();
    for (slot, var) in vars.iter().enumerate() {
        let analytic = grads
            .wrt(*var)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; inputs[slot].numel()]);
        let mut report = GroupReport {
            name: format!("input{slot}"),
            scalars: analytic.len(),
            max_rel_err: 0.0,
            max_abs_err: 0.0,
        };
        for (i, &a) in analytic.iter().enumerate() {
            let orig = work[slot].data()[i];
            work[slot].data_mut()[i] = orig + step;
            let plus = eval(&work)?;
            work[slot].data_mut()[i] = orig - step;
            let minus = eval(&work)?;
            work[slot].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            report.max_rel_err = report.max_rel_err.max(relative_error(a, numeric));
            report.max_abs_err = report.max_abs_err.max((a - numeric).abs());
        }
        reports.push(report);
    }
    Ok(reports)
}

/// Adds uniform noise in `±scale` to every trainable parameter.
///
/// Freshly initialized models have zero biases, so silent (padding) frames
/// put many rectifier inputs exactly on their kink at zero, where the
/// one-sided slopes differ and central differences cannot agree with any
/// subgradient. Checking at a jittered point avoids these measure-zero spots.
pub fn jitter_params(store: &mut ParamStore, rng: &mut impl Rng, scale: f64) {
    for p in store.params_mut().iter_mut().filter(|p| p.trainable) {
        for v in p.value.data_mut() {
            *v += rng.random_range(-scale..=scale);
        }
    }
}

/// Checks the gradient of a loss w.r.t. every trainable parameter in `store`,
/// grouping scalars by parameter name. `f` must build the full forward pass on
/// the supplied tape; it is re-run twice per perturbed scalar.
pub fn check_params<F>(store: &mut ParamStore, step: f64, f: F) -> Result<Vec<GroupReport>>
where
    F: FnMut(&mut Tape, &ParamStore) -> Result<Var>,
{
    check_params_strided(store, step, 1, f)
}

/// [`check_params`] on every `stride`-th scalar of each parameter, for models
/// too large to perturb exhaustively. `scalars` in the reports counts the
/// scalars actually checked.
pub fn check_params_strided<F>(store: &mut ParamStore, step: f64, stride: usize, mut f: F) -> Result<Vec<GroupReport>>
where
    F: FnMut(&mut Tape, &ParamStore) -> Result<Var>,
{
    let stride = stride.max(1);
    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    let grads = tape.backward(loss)?;
    store.zero_grad();
    store.accumulate(&tape, &grads);

    let ids: Vec<_> = store.ids().filter(|&id| store.get(id).trainable).collect();
    let mut reports = Vec::with_capacity(ids.len());
    for id in ids {
        let analytic = store.get(id).grad.data().to_vec();
        let mut report = GroupReport {
            name: store.get(id).name.clone(),
            scalars: analytic.len().div_ceil(stride),
            max_rel_err: 0.0,
            max_abs_err: 0.0,
        };
        for (i, &a) in analytic.iter().enumerate().step_by(stride) {
            let orig = store.get(id).value.data()[i];
            let mut eval_at = |value: f64, store: &mut ParamStore| -> Result<f64> {
                store.get_mut(id).value.data_mut()[i] = value;
                let mut tape = Tape::new();
                let loss = f(&mut tape, store)?;
                Ok(tape.value(loss).item())
            };
            let plus = eval_at(orig + step, store);
            let minus = eval_at(orig - step, store);
            store.get_mut(id).value.data_mut()[i] = orig;
            let numeric = (plus? - minus?) / (2.0 * step);
            report.max_rel_err = report.max_rel_err.max(relative_error(a, numeric));
            report.max_abs_err = report.max_abs_err.max((a - numeric).abs());
        }
        reports.push(report);
    }
    Ok(reports)
}
