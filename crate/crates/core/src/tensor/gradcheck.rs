//! Central finite-difference checks for tape adjoints.
//!
//! The numeric side only evaluates the forward pass on perturbed copies of
//! the inputs, so it shares no code with the adjoint kernels it checks.

use super::{Tape, Tensor, TensorError, Var};

/// Outcome of a gradient check, one relative error per input.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub relative_errors: Vec<f64>,
}

impl GradCheckReport {
    pub fn max_relative_error(&self) -> f64 {
        self.relative_errors.iter().copied().fold(0.0, f64::max)
    }
}

/// Compares tape adjoints of the scalar `f(inputs)` against central
/// differences with the given `step`.
///
/// The error for each input is `‖analytic − numeric‖₂ / max(‖analytic‖₂, ‖numeric‖₂)`,
/// or zero when both gradients vanish.
pub fn check_gradients<F>(inputs: &[Tensor], step: f64, f: F) -> Result<GradCheckReport, TensorError>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>, TensorError>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&tape, &vars)?;
    tape.backward(&loss)?;

    let eval = |perturbed: &[Tensor]| -> Result<f64, TensorError> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        Ok(f(&tape, &vars)?.item())
    };

    let mut relative_errors = Vec::with_capacity(inputs.len());
    let mut work = inputs.to_vec();
    for (k, var) in vars.iter().enumerate() {
        let analytic = tape.grad(var).expect("leaf gradient after backward");
        let mut numeric = vec![0.0; analytic.numel()];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let original = work[k].data()[i];
            work[k].data_mut()[i] = original + step;
            let plus = eval(&work)?;
            work[k].data_mut()[i] = original - step;
            let minus = eval(&work)?;
            work[k].data_mut()[i] = original;
            *slot = (plus - minus) / (2.0 * step);
        }
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let diff: Vec<f64> = analytic.data().iter().zip(&numeric).map(|(a, n)| a - n).collect();
        let scale = norm(analytic.data()).max(norm(&numeric));
        relative_errors.push(if scale == 0.0 { 0.0 } else { norm(&diff) / scale });
    }
    Ok(GradCheckReport { relative_errors })
}
