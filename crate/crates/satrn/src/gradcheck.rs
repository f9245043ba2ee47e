//! Central finite-difference gradient verification.
//!
//! The numerical side never touches the graph's backward pass: it re-runs the
//! caller's forward closure at perturbed inputs, so it stays an independent
//! oracle for the analytic gradients. Always run this in `f64`.

use crate::tensor::Tensor;

/// Perturbation step. With f64 forward passes the truncation error of the
/// central difference is ~1e-10, far below the acceptance tolerance.
pub const FD_STEP: f64 = 1e-5;

/// Relative-error tolerance used by the gradient suites.
pub const FD_TOL: f64 = 1e-4;

/// Largest relative error between an analytic gradient and the central
/// difference of `f` over every element of `inputs`.
///
/// `f` maps the current inputs to a scalar loss; `analytic` hands back the
/// gradient slice for input `i` (produced by one backward pass beforehand).
pub fn max_rel_error<F>(inputs: &mut [Tensor<f64>], analytic: &[Vec<f64>], mut f: F) -> f64
where
    F: FnMut(&[Tensor<f64>]) -> f64,
{
    let mut worst = 0.0f64;
    for i in 0..inputs.len() {
        for j in 0..inputs[i].numel() {
            let orig = inputs[i].data()[j];
            inputs[i].data_mut()[j] = orig + FD_STEP;
            let up = f(inputs);
            inputs[i].data_mut()[j] = orig - FD_STEP;
            let down = f(inputs);
            inputs[i].data_mut()[j] = orig;
            let fd = (up - down) / (2.0 * FD_STEP);
            let ad = analytic[i][j];
            let err = (ad - fd).abs() / ad.abs().max(fd.abs()).max(1.0);
            if err > worst {
                worst = err;
            }
        }
    }
    worst
}

/// Convenience wrapper asserting the suite tolerance.
pub fn assert_grads_match<F>(inputs: &mut [Tensor<f64>], analytic: &[Vec<f64>], f: F, what: &str)
where
    F: FnMut(&[Tensor<f64>]) -> f64,
{
    let err = max_rel_error(inputs, analytic, f);
    assert!(
        err < FD_TOL,
        "{what}: finite-difference mismatch, max relative error {err:.3e} (tolerance {FD_TOL:.0e})"
    );
}
