//! Gradient verification via central finite differences.
//!
//! The checker runs the analytic backward pass once, then perturbs every
//! parameter element by ±h in full 64-bit precision and compares the
//! numerical slope against the analytic gradient. The loss closure must be
//! deterministic — this is verified up front by requiring two forward passes
//! to agree bit for bit.

use std::collections::BTreeMap;

use crate::tensor::{backprop, full_precision, Result, Tensor, TensorError};

/// Default central-difference step.
pub const DEFAULT_STEP: f64 = 1e-3;

/// Relative-error denominator floor. Keeps near-zero gradient pairs from
/// blowing up the ratio: below this magnitude the comparison is effectively
/// absolute.
pub const DENOM_FLOOR: f64 = 1e-2;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Max relative error per parameter, keyed by parameter name.
    pub per_param: BTreeMap<String, f64>,
    /// Largest relative error across all parameters.
    pub max_rel_error: f64,
    /// Parameter holding the worst element.
    pub worst_param: String,
    /// Flat element index of the worst element within that parameter.
    pub worst_index: usize,
    /// Analytic and numerical gradient at the worst element.
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(DENOM_FLOOR)
}

/// Compare analytic gradients of `loss_fn` against central differences for
/// every `(name, tensor)` pair. All evaluations run in full precision; the
/// parameters are restored to their original values afterwards.
pub fn grad_check(
    loss_fn: &dyn Fn() -> Result<Tensor>,
    params: &[(String, Tensor)],
    step: f64,
) -> Result<GradCheckReport> {
    full_precision(|| {
        let first = loss_fn()?.scalar();
        let second = loss_fn()?.scalar();
        if first.to_bits() != second.to_bits() {
            return Err(TensorError::NonDeterministicForward { first, second });
        }

        for (_, p) in params {
            p.zero_grad();
        }
        let loss = loss_fn()?;
        backprop(&loss)?;

        let mut report = GradCheckReport {
            per_param: BTreeMap::new(),
            max_rel_error: 0.0,
            worst_param: String::new(),
            worst_index: 0,
            worst_analytic: 0.0,
            worst_numeric: 0.0,
        };

        for (name, p) in params {
            let analytic = p.grad().unwrap_or_else(|| vec![0.0; p.numel()]);
            let mut param_max = 0.0f64;
            for i in 0..p.numel() {
                let orig = p.value_at(i);
                p.set_value(i, orig + step);
                let plus = loss_fn()?.scalar();
                p.set_value(i, orig - step);
                let minus = loss_fn()?.scalar();
                p.set_value(i, orig);
                let numeric = (plus - minus) / (2.0 * step);
                let err = rel_error(analytic[i], numeric);
                if err > param_max {
                    param_max = err;
                }
                if err > report.max_rel_error {
                    report.max_rel_error = err;
                    report.worst_param = name.clone();
                    report.worst_index = i;
                    report.worst_analytic = analytic[i];
                    report.worst_numeric = numeric;
                }
            }
            report.per_param.insert(name.clone(), param_max);
        }
        Ok(report)
    })
}
