use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Outcome of comparing reverse-mode gradients against central differences.
#[derive(Debug, Clone)]
pub struct GradCheck {
    /// Largest `|analytic − numeric| / (|analytic| + |numeric| + 1e-12)` over
    /// the checkable coordinates.
    pub max_rel_error: f64,
    /// Coordinates checked.
    pub checked: usize,
    /// `(input index, flat coordinate)` pairs whose perturbation moved a ReLU
    /// input across (or onto) its kink; excluded from the error.
    pub kinked: Vec<(usize, usize)>,
}

impl GradCheck {
    /// True when at least one coordinate could be compared and none was
    /// excluded for sitting on a kink.
    pub fn fully_checkable(&self) -> bool {
        self.kinked.is_empty() && self.checked > 0
    }
}

/// Single-input form of [`finite_diff_check_many`].
pub fn finite_diff_check<F>(f: F, point: &Tensor, step: f64) -> Result<GradCheck>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    finite_diff_check_many(|g, vars| f(g, vars[0]), std::slice::from_ref(point), step)
}

/// Compares the gradient of the scalar `f` at `points` with central
/// differences of step `step` in every coordinate of every input.
pub fn finite_diff_check_many<F>(f: F, points: &[Tensor], step: f64) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(Error::contract(format!("finite-difference step must be positive, got {step}")));
    }
    let eval = |inputs: &[Tensor]| -> Result<(f64, Vec<bool>, bool)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        if g.value(out).numel() != 1 {
            return Err(Error::contract("gradient check needs a scalar-valued function"));
        }
        let (pattern, on_kink) = g.relu_signature();
        Ok((g.value(out).item(), pattern, on_kink))
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = points.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;
    let (base_pattern, base_on_kink) = g.relu_signature();

    let mut report = GradCheck {
        max_rel_error: 0.0,
        checked: 0,
        kinked: Vec::new(),
    };
    let mut inputs = points.to_vec();
    for (which, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(*var).clone();
        for coord in 0..analytic.numel() {
            let original = inputs[which].data()[coord];
            inputs[which].data_mut()[coord] = original + step;
            let (plus, p_plus, k_plus) = eval(&inputs)?;
            inputs[which].data_mut()[coord] = original - step;
            let (minus, p_minus, k_minus) = eval(&inputs)?;
            inputs[which].data_mut()[coord] = original;

            let crosses = base_on_kink
                || k_plus
                || k_minus
                || p_plus != base_pattern
                || p_minus != base_pattern;
            if crosses {
                report.kinked.push((which, coord));
                continue;
            }
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic.data()[coord];
            let err = (a - numeric).abs() / (a.abs() + numeric.abs() + 1e-12);
            report.max_rel_error = report.max_rel_error.max(err);
            report.checked += 1;
        }
    }
    Ok(report)
}
