//! Gradient verification by central finite differences. Every backward rule
//! in the crate is held to this oracle; the corrupted-op fixture keeps the
//! checker itself honest.

use super::{Tape, Tensor, Var};

/// Outcome of one finite-difference comparison.
#[derive(Debug, Clone)]
pub struct FiniteDiffReport {
    /// Largest relative error over all checked coordinates.
    pub max_rel_err: f64,
    /// Coordinates compared.
    pub checked: usize,
    pub tol: f64,
    pub pass: bool,
}

/// Check `f`'s gradient w.r.t. a single input tensor. `f` must reduce to a
/// scalar; it is re-run from scratch for every probe, so it must be pure.
pub fn finite_diff_check(f: impl Fn(&mut Tape, Var) -> Var, x: &Tensor, tol: f64) -> FiniteDiffReport {
    finite_diff_check_multi(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), tol)
}

/// Check `f`'s gradient w.r.t. every tensor in `inputs`.
///
/// Analytic gradients come from one taped backward pass. Each coordinate is
/// then probed with a central difference at step `h = 1e-6 * max(1, |x_i|)`,
/// and compared at relative error `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn finite_diff_check_multi(
    f: impl Fn(&mut Tape, &[Var]) -> Var,
    inputs: &[Tensor],
    tol: f64,
) -> FiniteDiffReport {
    let eval = |tensors: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = tensors.iter().map(|t| tape.constant(t)).collect();
        let out = f(&mut tape, &vars);
        assert_eq!(tape.value(out).len(), 1, "finite_diff_check needs a scalar output");
        tape.value(out)[0]
    };

    // Analytic pass.
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let out = f(&mut tape, &vars);
    assert_eq!(tape.value(out).len(), 1, "finite_diff_check needs a scalar output");
    let grads = tape.backward(out);
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.get(v)).collect();

    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut max_rel_err: f64 = 0.0;
    let mut checked = 0;
    for ti in 0..inputs.len() {
        for i in 0..inputs[ti].numel() {
            let x0 = inputs[ti].data()[i];
            let h = 1e-6 * x0.abs().max(1.0);
            work[ti].data_mut()[i] = x0 + h;
            let fp = eval(&work);
            work[ti].data_mut()[i] = x0 - h;
            let fm = eval(&work);
            work[ti].data_mut()[i] = x0;

            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[ti].data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            max_rel_err = max_rel_err.max(rel);
            checked += 1;
        }
    }

    FiniteDiffReport { max_rel_err, checked, tol, pass: max_rel_err <= tol }
}
