//! Central finite-difference gradient checking.
//!
//! The numeric side only ever evaluates forward values, so it is an
//! independent oracle for the analytic reverse sweep.

use crate::graph::{Graph, Var};
use crate::tensor::{Tensor, TensorError};

/// Elements whose analytic and numeric gradients are both at most this
/// large are skipped by the relative-error comparison.
pub const GRAD_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Default)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Elements compared by relative error.
    pub checked: usize,
    /// (input, flat index, analytic, numeric) of the worst element.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradCheck {
    pub fn passes(&self, rel_tol: f64) -> bool {
        self.max_rel_error < rel_tol
    }

    pub fn merge(&mut self, other: &GradCheck) {
        if other.max_rel_error > self.max_rel_error {
            self.max_rel_error = other.max_rel_error;
            self.worst = other.worst;
        }
        self.max_abs_error = self.max_abs_error.max(other.max_abs_error);
        self.checked += other.checked;
    }
}

fn eval<E, F>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64, E>
where
    E: From<TensorError>,
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var, E>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let root = f(&mut g, &vars)?;
    Ok(g.value(root).item())
}

/// Compares reverse-mode gradients of the scalar `f(inputs)` against central
/// differences with the given `step`.
pub fn check_gradients<E, F>(inputs: &[Tensor<f64>], step: f64, f: F) -> Result<GradCheck, E>
where
    E: From<TensorError>,
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var, E>,
{
    check_gradients_above(inputs, step, GRAD_FLOOR, f)
}

/// [`check_gradients`] with an explicit floor below which elements are only
/// counted in `max_abs_error`. Central differences carry roundoff of about
/// `eps * |f| / step`, so tiny gradients cannot be resolved in relative terms.
pub fn check_gradients_above<E, F>(inputs: &[Tensor<f64>], step: f64, floor: f64, f: F) -> Result<GradCheck, E>
where
    E: From<TensorError>,
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var, E>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let root = f(&mut g, &vars)?;
    let grads = g.backward(root)?;

    let mut report = GradCheck::default();
    let mut probe = inputs.to_vec();
    for (which, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(*var);
        for k in 0..inputs[which].len() {
            let orig = inputs[which].data()[k];
            probe[which].data_mut()[k] = orig + step;
            let up = eval(&f, &probe)?;
            probe[which].data_mut()[k] = orig - step;
            let down = eval(&f, &probe)?;
            probe[which].data_mut()[k] = orig;

            let numeric = (up - down) / (2.0 * step);
            let a = analytic.data()[k];
            let abs = (a - numeric).abs();
            report.max_abs_error = report.max_abs_error.max(abs);
            let scale = a.abs().max(numeric.abs());
            if scale > floor {
                report.checked += 1;
                let rel = abs / scale;
                if rel > report.max_rel_error {
                    report.max_rel_error = rel;
                    report.worst = Some((which, k, a, numeric));
                }
            }
        }
    }
    Ok(report)
}
