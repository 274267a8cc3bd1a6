//! Finite-difference gradient checking used by the test suite.

use super::Tensor;

/// Worst relative error between analytic and numeric gradients for one input.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Flat coordinate where the worst error occurred.
    pub worst_coord: usize,
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compare the analytic gradient of `f` with central differences at each
/// coordinate of `input`. `f` must build a fresh graph from its argument and
/// return a scalar. The input keeps its values afterwards.
pub fn grad_check(f: impl Fn(&Tensor) -> Tensor, input: &Tensor, eps: f64) -> GradCheckReport {
    grad_check_params(|ps| f(&ps[0]), &[input.clone()], eps)
        .into_iter()
        .next()
        .expect("one input, one report")
}

/// `grad_check` over several leaf tensors at once; returns one report per
/// input, in order. Useful when the loss touches a whole parameter set.
pub fn grad_check_params(
    f: impl Fn(&[Tensor]) -> Tensor,
    inputs: &[Tensor],
    eps: f64,
) -> Vec<GradCheckReport> {
    assert!(!inputs.is_empty(), "grad_check_params: no inputs");
    for t in inputs {
        assert!(t.requires_grad(), "grad_check_params: input does not require grad");
        t.zero_grad();
    }
    let loss = f(inputs);
    assert!(loss.shape().is_empty(), "grad_check_params: loss must be scalar");
    loss.backward();
    let analytic: Vec<Vec<f64>> = inputs
        .iter()
        .map(|t| t.grad().unwrap_or_else(|| vec![0.0; t.len()]))
        .collect();

    inputs
        .iter()
        .enumerate()
        .map(|(which, t)| {
            let base = t.values();
            let mut report = GradCheckReport { max_rel_err: 0.0, worst_coord: 0 };
            for i in 0..base.len() {
                let mut bumped = base.clone();
                bumped[i] = base[i] + eps;
                t.set_values(&bumped);
                let up = f(inputs).item();
                bumped[i] = base[i] - eps;
                t.set_values(&bumped);
                let down = f(inputs).item();
                let numeric = (up - down) / (2.0 * eps);
                let e = rel_err(analytic[which][i], numeric);
                if e > report.max_rel_err {
                    report.max_rel_err = e;
                    report.worst_coord = i;
                }
            }
            t.set_values(&base);
            report
        })
        .collect()
}
