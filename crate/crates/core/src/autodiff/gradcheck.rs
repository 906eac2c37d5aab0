//! Central finite-difference verification of tape gradients.

use super::{Tape, Tensor, TensorError, Var};

/// One-sided slopes that disagree by more than this fraction mark a kink
/// (for example `relu` evaluated at exactly zero); such entries are skipped.
const KINK_TOLERANCE: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Max over entries of `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
    pub max_relative_error: f64,
    pub checked: usize,
    /// Entries sitting on a nondifferentiable point.
    pub excluded: usize,
}

fn evaluate<F>(f: &F, params: &[Tensor]) -> Result<f64, TensorError>
where
    F: Fn(&Tape, &[Var]) -> Result<Var, TensorError>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.constant(p.clone())).collect();
    let out = f(&tape, &vars)?;
    let value = tape.value(out).item().ok_or_else(|| TensorError::NonScalarLoss(tape.shape(out)))?;
    if !value.is_finite() {
        return Err(TensorError::NonFinite(value));
    }
    Ok(value)
}

/// Compares reverse-mode gradients of the scalar function `f` against
/// central differences with step `eps` at every parameter entry.
pub fn grad_check<F>(f: F, params: &[Tensor], eps: f64) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&Tape, &[Var]) -> Result<Var, TensorError>,
{
    if !(1e-7..=1e-4).contains(&eps) {
        return Err(TensorError::InvalidStep(eps));
    }
    let tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = f(&tape, &vars)?;
    let center = tape.value(loss).item().ok_or_else(|| TensorError::NonScalarLoss(tape.shape(loss)))?;
    if !center.is_finite() {
        return Err(TensorError::NonFinite(center));
    }
    let grads = tape.backward(loss)?;

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        checked: 0,
        excluded: 0,
    };
    let mut probe: Vec<Tensor> = params.to_vec();
    for (pi, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).expect("parameter leaf").clone();
        for j in 0..params[pi].len() {
            let original = params[pi].data()[j];
            probe[pi].data_mut()[j] = original + eps;
            let plus = evaluate(&f, &probe)?;
            probe[pi].data_mut()[j] = original - eps;
            let minus = evaluate(&f, &probe)?;
            probe[pi].data_mut()[j] = original;

            let forward = (plus - center) / eps;
            let backward = (center - minus) / eps;
            if (forward - backward).abs() > KINK_TOLERANCE * 1f64.max(forward.abs()).max(backward.abs()) {
                report.excluded += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.data()[j];
            let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            report.max_relative_error = report.max_relative_error.max(err);
            report.checked += 1;
        }
    }
    Ok(report)
}
