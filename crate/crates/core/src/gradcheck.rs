//! Central finite-difference gradient checks for taped computations.

use crate::error::{arg, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Default perturbation for central differences.
pub const FD_STEP: f64 = 1e-5;

/// `|a − n| / max(|a|, |n|, 1e-5)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-5)
}

/// Outcome of one gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub max_rel_error: f64,
    pub checked: usize,
}

fn evaluate<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if tape.value(out).len() != 1 {
        return arg("gradient check needs a scalar output");
    }
    Ok(tape.value(out).item())
}

/// Compare reverse-mode gradients of the scalar `f(inputs)` with central
/// differences. `stride` > 1 checks every `stride`-th coordinate of each input.
pub fn check_gradients<F>(f: F, inputs: &[Tensor], step: f64, stride: usize) -> Result<GradReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .map(|&v| {
            tape.grad(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(tape.shape(v)))
        })
        .collect();
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    let mut probe = inputs.to_vec();
    for (k, a) in analytic.iter().enumerate() {
        for i in (0..a.len()).step_by(stride.max(1)) {
            let orig = probe[k].data()[i];
            probe[k].data_mut()[i] = orig + step;
            let up = evaluate(&f, &probe)?;
            probe[k].data_mut()[i] = orig - step;
            let down = evaluate(&f, &probe)?;
            probe[k].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * step);
            worst = worst.max(relative_error(a.data()[i], numeric));
            checked += 1;
        }
    }
    Ok(GradReport {
        max_rel_error: worst,
        checked,
    })
}
