//! Central-difference gradient verification.

use alloc::format;
use alloc::vec::Vec;

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Max over coordinates of `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
    pub max_relative_error: f64,
    /// `(parameter index, flat coordinate)` where the maximum occurred.
    pub worst: (usize, usize),
    pub coordinates: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_relative_error < self.tolerance
    }
}

/// Compares reverse-mode gradients of a scalar function with five-point
/// central differences of step `step` over every coordinate of `params`.
///
/// `f` receives a fresh graph and one leaf per parameter and returns the
/// scalar output node.
pub fn grad_check<F>(mut f: F, params: &[Tensor], step: f64, tolerance: f64) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(Error::parameter("finite-difference step must be positive"));
    }
    let mut g = Graph::new();
    let leaves: Vec<Var> = params.iter().map(|p| g.leaf(p.clone())).collect();
    let root = f(&mut g, &leaves)?;
    check_finite(g.scalar(root), usize::MAX, 0)?;
    g.backward(root)?;
    let analytic: Vec<Vec<f64>> = leaves.iter().map(|&v| g.grad(v).to_vec()).collect();

    let mut eval = |perturbed: &[Tensor], p: usize, i: usize| -> Result<f64> {
        let mut g = Graph::new();
        let leaves: Vec<Var> = perturbed.iter().map(|t| g.leaf(t.clone())).collect();
        let out = f(&mut g, &leaves)?;
        let v = g.scalar(out);
        check_finite(v, p, i)?;
        Ok(v)
    };

    let mut work: Vec<Tensor> = params.to_vec();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: (0, 0),
        coordinates: 0,
        tolerance,
    };
    #[allow(clippy::needless_range_loop)] // `p` and `i` also address `work` and the callback
    for p in 0..params.len() {
        for i in 0..params[p].numel() {
            let original = params[p].data()[i];
            let mut at = |offset: f64| -> Result<f64> {
                work[p].data_mut()[i] = original + offset;
                eval(&work, p, i)
            };
            let (p1, m1) = (at(step)?, at(-step)?);
            let (p2, m2) = (at(2.0 * step)?, at(-2.0 * step)?);
            work[p].data_mut()[i] = original;

            // fourth-order stencil: truncation error O(step^4), so steps
            // large enough to keep cancellation noise small stay accurate
            let numeric = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * step);
            let a = analytic[p][i];
            check_finite(a, p, i)?;
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            let err = (a - numeric).abs() / denom;
            if err > report.max_relative_error {
                report.max_relative_error = err;
                report.worst = (p, i);
            }
            report.coordinates += 1;
        }
    }
    Ok(report)
}

fn check_finite(v: f64, param: usize, index: usize) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric {
            what: format!("gradient check (parameter {param})"),
            index,
        })
    }
}
