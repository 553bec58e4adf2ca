//! Finite-difference verification of tape gradients.
//!
//! Always runs in f64: central differences lose roughly half the mantissa,
//! which leaves ~1e-8 of headroom in double precision but nothing in single.

use super::{Tape, Tensor, Var};

/// Compare the tape gradient of `f` at `x` against central differences.
///
/// `f` must build a scalar loss from its input leaf on the supplied tape.
/// Returns `max_i |analytic_i - numeric_i| / max(1, |numeric_i|)`; NaN
/// anywhere (forward, backward, or perturbation) propagates into the result
/// so callers treat it as a failure.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> f64
where
    F: Fn(&mut Tape<f64>, Var) -> Var,
{
    let analytic = {
        let mut tape = Tape::new();
        let leaf = tape.leaf(x.clone());
        let loss = f(&mut tape, leaf);
        let grads = tape
            .backward(loss)
            .expect("grad_check loss must be a scalar on the tape");
        grads.get_or_zeros(leaf, x.shape())
    };

    let eval = |pt: &Tensor<f64>| -> f64 {
        let mut tape = Tape::new();
        let leaf = tape.leaf(pt.clone());
        let loss = f(&mut tape, leaf);
        tape.value(loss).item()
    };

    let mut worst = 0.0f64;
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(&plus) - eval(&minus)) / (2.0 * eps);
        let diff = (analytic.data()[i] - numeric).abs() / numeric.abs().max(1.0);
        // NaN must win every comparison, so order the max around it.
        if diff.is_nan() {
            return f64::NAN;
        }
        if diff > worst {
            worst = diff;
        }
    }
    worst
}
