//! Finite-difference gradient checking.
//!
//! Everything here runs in f64: central differences with h = 1e-5 lose about
//! half the mantissa, which still leaves ~1e-10 of headroom in f64 but would
//! drown the signal in f32.

use super::tape::{Tape, Var};
use super::Tensor;

pub const STEP: f64 = 1e-5;
pub const TOL: f64 = 1e-3;

/// Max guarded relative error between analytic and central-difference
/// gradients of `f` over every element of every input.
///
/// `f` must be a pure function of its inputs (no external state, no RNG) and
/// must return a scalar. Each input is perturbed elementwise, so keep inputs
/// small — this is O(numel) full forward passes.
pub fn grad_check<F>(inputs: &[Tensor<f64>], f: F) -> f64
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    let eval = |tensors: &[Tensor<f64>]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = tensors.iter().map(|t| tape.leaf_grad(t.clone())).collect();
        let loss = f(&mut tape, &vars);
        tape.value(loss).data()[0]
    };

    // Analytic pass.
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf_grad(t.clone())).collect();
    let loss = f(&mut tape, &vars);
    assert_eq!(tape.value(loss).numel(), 1, "grad_check: loss must be scalar");
    tape.backward(loss);

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (ti, input) in inputs.iter().enumerate() {
        let analytic: Vec<f64> = match tape.grad(vars[ti]) {
            Some(g) => g.to_vec(),
            None => vec![0.0; input.numel()],
        };
        for ei in 0..input.numel() {
            let orig = input.data()[ei];
            work[ti].data_mut()[ei] = orig + STEP;
            let up = eval(&work);
            work[ti].data_mut()[ei] = orig - STEP;
            let down = eval(&work);
            work[ti].data_mut()[ei] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            let denom = analytic[ei].abs().max(numeric.abs()).max(1e-3);
            let rel = (analytic[ei] - numeric).abs() / denom;
            if rel > worst {
                worst = rel;
            }
        }
    }
    worst
}

/// Panics with a readable message if `grad_check` exceeds `TOL`.
pub fn assert_grads<F>(label: &str, inputs: &[Tensor<f64>], f: F)
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    let worst = grad_check(inputs, f);
    assert!(
        worst < TOL,
        "{label}: gradient check failed, max rel err {worst:.3e} >= {TOL:.0e}"
    );
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_passes() {
        let x = Tensor::new(vec![1, 3], vec![0.7, -1.3, 2.1]);
        assert_grads("x^2", &[x], |tape, vars| {
            let sq = tape.mul(vars[0], vars[0]);
            tape.sum_all(sq)
        });
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // scale-by-3 forward with sum loss has gradient 3; a deliberately
        // mismatched forward (scale by 2 in eval, 3 in the analytic graph)
        // is impossible to construct through the tape, so instead verify the
        // checker flags a genuinely kinked function at its kink.
        let x = Tensor::new(vec![1, 1], vec![0.0]);
        let worst = grad_check(&[x], |tape, vars| {
            let r = tape.relu(vars[0]);
            tape.sum_all(r)
        });
        // relu at exactly 0: analytic 0, numeric 0.5 -> large rel err.
        assert!(worst > 0.4, "expected kink to be flagged, got {worst}");
    }

    #[test]
    fn linear_chain_passes() {
        let x = Tensor::new(vec![2, 3], vec![0.4, -0.9, 1.2, 0.05, 0.33, -0.71]);
        let w = Tensor::new(vec![3, 2], vec![0.21, -0.5, 0.9, 0.13, -0.27, 0.61]);
        let b = Tensor::new(vec![2], vec![0.1, -0.2]);
        assert_grads("linear+silu", &[x, w, b], |tape, v| {
            let h = tape.linear(v[0], v[1], Some(v[2]));
            let s = tape.silu(h);
            tape.sum_all(s)
        });
    }
}
