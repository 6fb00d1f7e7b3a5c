//! Central finite-difference validation of hand-written gradients.

use crate::numerics::HasParameters;

#[derive(Debug, Clone, PartialEq)]
pub struct GradFailure {
    pub parameter: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub failures: Vec<GradFailure>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty() && self.checked > 0
    }
}

/// Entries whose analytic and numeric gradients are both below this are
/// compared on an absolute scale instead.
const REL_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares analytic gradients against `(f(x+h) - f(x-h)) / 2h` for every
/// parameter entry.
///
/// `loss(model, with_grad)` must return the scalar loss and, when
/// `with_grad` is set, accumulate the analytic gradient into the
/// parameters' `grad` fields. It has to be deterministic.
pub fn grad_check<M, F>(model: &mut M, mut loss: F, h: f64, tol: f64) -> GradCheckReport
where
    M: HasParameters,
    F: FnMut(&mut M, bool) -> f64,
{
    model.zero_grads();
    loss(model, true);
    let analytic: Vec<(String, Vec<f64>)> = model
        .parameters_mut()
        .into_iter()
        .map(|p| (p.name.clone(), p.grad.data().to_vec()))
        .collect();
    model.zero_grads();

    let mut report = GradCheckReport {
        checked: 0,
        max_rel_error: 0.0,
        failures: Vec::new(),
    };
    for (pi, (name, grads)) in analytic.iter().enumerate() {
        for (i, &a) in grads.iter().enumerate() {
            let original = model.parameters_mut()[pi].value.data()[i];
            model.parameters_mut()[pi].value.data_mut()[i] = original + h;
            let plus = loss(model, false);
            model.parameters_mut()[pi].value.data_mut()[i] = original - h;
            let minus = loss(model, false);
            model.parameters_mut()[pi].value.data_mut()[i] = original;

            let numeric = (plus - minus) / (2.0 * h);
            let rel = relative_error(a, numeric);
            report.checked += 1;
            report.max_rel_error = report.max_rel_error.max(rel);
            if rel > tol || !rel.is_finite() {
                report.failures.push(GradFailure {
                    parameter: name.clone(),
                    index: i,
                    analytic: a,
                    numeric,
                    rel_error: rel,
                });
            }
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{Matrix, Parameter};

    struct Quadratic {
        x: Parameter,
    }

    impl HasParameters for Quadratic {
        fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
            vec![&mut self.x]
        }
    }

    fn quad_loss(q: &mut Quadratic, with_grad: bool) -> f64 {
        // f(x) = Σ (i+1) x_i² + x_0 x_1
        let x = q.x.value.data().to_vec();
        let mut f = x[0] * x[1];
        for (i, v) in x.iter().enumerate() {
            f += (i + 1) as f64 * v * v;
        }
        if with_grad {
            let g = q.x.grad.data_mut();
            for (i, v) in x.iter().enumerate() {
                g[i] += 2.0 * (i + 1) as f64 * v;
            }
            g[0] += x[1];
            g[1] += x[0];
        }
        f
    }

    #[test]
    fn quadratic_passes() {
        let mut q = Quadratic {
            x: Parameter::new("x", Matrix::new(1, 3, vec![0.3, -1.1, 2.0]).unwrap()),
        };
        let report = grad_check(&mut q, quad_loss, 1e-4, 1e-6);
        assert!(report.passed(), "{report:?}");
        assert!(report.max_rel_error <= 1e-6);
        assert_eq!(report.checked, 3);
    }

    #[test]
    fn wrong_gradient_is_reported() {
        let mut q = Quadratic {
            x: Parameter::new("x", Matrix::new(1, 2, vec![1.0, 1.0]).unwrap()),
        };
        let report = grad_check(
            &mut q,
            |q, g| {
                let f = quad_loss(q, g);
                if g {
                    q.x.grad.data_mut()[1] += 1.0;
                }
                f
            },
            1e-4,
            1e-3,
        );
        assert!(!report.passed());
        assert_eq!(report.failures[0].index, 1);
    }
}
