//! Central finite-difference gradient checking.
//!
//! The checker only ever runs the forward pass of the function under test, so
//! it stays independent of the backward rules it validates.

use crate::tape::{Tape, Var};
use crate::tensor::{Result, Tensor};

/// Finite-difference step.
pub const STEP: f64 = 1e-6;

/// Gradients smaller than this are compared in absolute rather than relative
/// terms.
pub const REL_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct GradCheck {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, REL_FLOOR)`.
    pub max_rel_error: f64,
    /// `(input, element)` where the largest error occurred.
    pub worst: (usize, usize),
    pub checked: usize,
}

/// Compares tape gradients of the scalar built by `f` against central
/// differences for every element of every input. All inputs are registered as
/// trainable leaves.
pub fn check_gradients<F>(inputs: &[Tensor], f: F) -> GradCheck
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> (Tape, Vec<Var>, Var) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|v| tape.param(v.clone())).collect();
        let out = f(&mut tape, &vars).expect("forward pass under gradient check failed");
        (tape, vars, out)
    };

    let (mut tape, vars, out) = eval(inputs);
    tape.backward(out).expect("backward under gradient check failed");
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, x)| {
            tape.grad(*v)
                .map(|g| g.data().to_vec())
                .unwrap_or_else(|| vec![0.0; x.numel()])
        })
        .collect();

    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, x) in inputs.iter().enumerate() {
        for k in 0..x.numel() {
            let orig = x.data()[k];
            work[i].data_mut()[k] = orig + STEP;
            let (t, _, o) = eval(&work);
            let plus = t.value(o).item();
            work[i].data_mut()[k] = orig - STEP;
            let (t, _, o) = eval(&work);
            let minus = t.value(o).item();
            work[i].data_mut()[k] = orig;

            let numeric = (plus - minus) / (2.0 * STEP);
            let a = analytic[i][k];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            if err > report.max_rel_error || err.is_nan() {
                report.max_rel_error = if err.is_nan() { f64::INFINITY } else { err };
                report.worst = (i, k);
            }
            report.checked += 1;
        }
    }
    report
}
