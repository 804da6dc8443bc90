//! Central-difference gradient checking.

use crate::array::Array;
use crate::tensor::{grad, Tensor};

/// Worst mismatch found by [`check`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub worst_input: usize,
    pub worst_index: usize,
}

/// Central differences of scalar `f` with respect to every element of `inputs[which]`.
pub fn numeric_grad(f: &dyn Fn(&[Tensor]) -> Tensor, inputs: &[Array], which: usize, eps: f64) -> Array {
    let mut out = Array::zeros(inputs[which].shape());
    for i in 0..inputs[which].numel() {
        let eval = |delta: f64| {
            let ts: Vec<Tensor> = inputs
                .iter()
                .enumerate()
                .map(|(k, a)| {
                    let mut a = a.clone();
                    if k == which {
                        a.data_mut()[i] += delta;
                    }
                    Tensor::constant(a)
                })
                .collect();
            f(&ts).item()
        };
        out.data_mut()[i] = (eval(eps) - eval(-eps)) / (2.0 * eps);
    }
    out
}

/// Compares analytic gradients of `f` against central differences for all
/// inputs. Relative error is `|a-n| / max(|a|+|n|, floor)`.
pub fn check(f: &dyn Fn(&[Tensor]) -> Tensor, inputs: &[Array], eps: f64, floor: f64) -> GradCheckReport {
    let params: Vec<Tensor> = inputs.iter().map(|a| Tensor::param(a.clone())).collect();
    let out = f(&params);
    let refs: Vec<&Tensor> = params.iter().collect();
    let analytic = grad(&out, &refs, false).expect("scalar output");
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst_input: 0,
        worst_index: 0,
    };
    for (k, a) in analytic.iter().enumerate() {
        let a = a
            .as_ref()
            .map(|t| t.to_array())
            .unwrap_or_else(|| Array::zeros(inputs[k].shape()));
        let n = numeric_grad(f, inputs, k, eps);
        for (i, (x, y)) in a.data().iter().zip(n.data()).enumerate() {
            let abs = (x - y).abs();
            let rel = abs / (x.abs() + y.abs()).max(floor);
            report.max_abs_error = report.max_abs_error.max(abs);
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_input = k;
                report.worst_index = i;
            }
        }
    }
    report
}
