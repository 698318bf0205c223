use crate::error::{Error, Result};
use crate::numerics::Parameters;

/// A scalar loss with an exact gradient with respect to `P`.
pub trait Objective<P> {
    fn value_and_gradient(&self, params: &P) -> Result<(f64, P)>;
}

impl<P, F> Objective<P> for F
where
    F: Fn(&P) -> Result<(f64, P)>,
{
    fn value_and_gradient(&self, params: &P) -> Result<(f64, P)> {
        self(params)
    }
}

/// Evaluate an objective and check that the value and every gradient entry are finite.
pub fn evaluate_with_gradients<P: Parameters, O: Objective<P>>(
    objective: &O,
    params: &P,
) -> Result<(f64, P)> {
    let (value, grad) = objective.value_and_gradient(params)?;
    if !value.is_finite() {
        return Err(Error::numeric("loss"));
    }
    if let Some(name) = grad.first_non_finite() {
        return Err(Error::numeric(format!("gradient of {name}")));
    }
    Ok((value, grad))
}

/// Denominator floor for the relative error, so entries whose true gradient is ~0 are judged
/// on absolute error instead of dividing rounding noise by nothing.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub relative_error: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn max_relative_error(&self) -> f64 {
        self.entries
            .iter()
            .map(|e| e.relative_error)
            .fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.relative_error <= self.tolerance)
    }

    pub fn worst(&self) -> Option<&GradCheckEntry> {
        self.entries
            .iter()
            .max_by(|a, b| a.relative_error.total_cmp(&b.relative_error))
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Compare analytic gradients against central differences `(f(w+h) - f(w-h)) / 2h` entry by entry.
pub fn finite_difference_check<P: Parameters, O: Objective<P>>(
    objective: &O,
    params: &P,
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport> {
    if !(step > 0.0) {
        return Err(Error::config(format!("finite-difference step must be > 0, got {step}")));
    }
    let (_, analytic) = objective.value_and_gradient(params)?;
    let names: Vec<String> = params.tensors().iter().map(|(n, _)| n.to_string()).collect();
    let analytic_values: Vec<Vec<f64>> = analytic
        .tensors()
        .iter()
        .map(|(_, t)| t.as_slice().to_vec())
        .collect();

    let mut probe = params.clone();
    let mut entries = Vec::with_capacity(params.parameter_count());
    for (ti, name) in names.iter().enumerate() {
        for index in 0..analytic_values[ti].len() {
            let original = probe.tensors_mut()[ti].as_slice()[index];
            probe.tensors_mut()[ti].as_mut_slice()[index] = original + step;
            let (plus, _) = objective.value_and_gradient(&probe)?;
            probe.tensors_mut()[ti].as_mut_slice()[index] = original - step;
            let (minus, _) = objective.value_and_gradient(&probe)?;
            probe.tensors_mut()[ti].as_mut_slice()[index] = original;

            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic_values[ti][index];
            entries.push(GradCheckEntry {
                tensor: name.clone(),
                index,
                analytic: a,
                numeric,
                relative_error: relative_error(a, numeric),
            });
        }
    }
    Ok(GradCheckReport { tolerance, entries })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{Matrix, NamedTensors};

    fn half_squared_norm(p: &NamedTensors) -> Result<(f64, NamedTensors)> {
        let value = 0.5 * p.tensors().iter().map(|(_, t)| t.squared_norm()).sum::<f64>();
        Ok((value, p.clone()))
    }

    fn sample_params() -> NamedTensors {
        NamedTensors(vec![
            ("w".into(), Matrix::from_rows(&[vec![0.3, -1.2], vec![2.0, 0.7]]).unwrap()),
            ("b".into(), Matrix::row_vector(vec![-0.4, 0.05])),
        ])
    }

    #[test]
    fn half_norm_gradient_is_params() {
        let p = sample_params();
        let (v, g) = evaluate_with_gradients(&half_squared_norm, &p).unwrap();
        assert!((v - 0.5 * (0.09 + 1.44 + 4.0 + 0.49 + 0.16 + 0.0025)).abs() < 1e-12);
        assert_eq!(g, p);
    }

    #[test]
    fn constant_loss_zero_gradient() {
        let constant = |p: &NamedTensors| Ok((3.5, p.zeros_like()));
        let (v, g) = evaluate_with_gradients(&constant, &sample_params()).unwrap();
        assert_eq!(v, 3.5);
        assert!(g.tensors().iter().all(|(_, t)| t.as_slice().iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn non_finite_loss_names_node() {
        let bad = |p: &NamedTensors| Ok((f64::INFINITY, p.clone()));
        let err = evaluate_with_gradients(&bad, &sample_params()).unwrap_err();
        assert!(matches!(err, Error::NumericOverflow { ref node } if node == "loss"));

        let bad_grad = |p: &NamedTensors| {
            let mut g = p.clone();
            g.0[1].1.set(0, 1, f64::NAN);
            Ok((1.0, g))
        };
        let err = evaluate_with_gradients(&bad_grad, &sample_params()).unwrap_err();
        assert!(err.to_string().contains("gradient of b"));
    }

    #[test]
    fn quadratic_passes_tightly() {
        let report =
            finite_difference_check(&half_squared_norm, &sample_params(), 1e-5, 1e-8).unwrap();
        assert_eq!(report.entries.len(), 6);
        assert!(report.passed(), "max error {}", report.max_relative_error());
    }

    #[test]
    fn corrupted_gradient_is_flagged() {
        let corrupted = |p: &NamedTensors| {
            let (v, mut g) = half_squared_norm(p)?;
            g.0[0].1.set(1, 0, 2.5);
            Ok((v, g))
        };
        let report = finite_difference_check(&corrupted, &sample_params(), 1e-5, 1e-4).unwrap();
        assert!(!report.passed());
        let worst = report.worst().unwrap();
        assert_eq!((worst.tensor.as_str(), worst.index), ("w", 2));
    }

    #[test]
    fn non_positive_step_rejected() {
        assert!(finite_difference_check(&half_squared_norm, &sample_params(), 0.0, 1e-4).is_err());
    }
}
