//! Central finite-difference checks of analytic gradients.

use crate::error::{DiffError, Result};
use crate::tensor::{Graph, Tensor};

/// Denominator floor of the relative error, so that gradients that are
/// zero on both sides compare as equal.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckFailure {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub failures: Vec<GradCheckFailure>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    fn merge(&mut self, other: GradCheckReport) {
        self.checked += other.checked;
        self.max_rel_error = self.max_rel_error.max(other.max_rel_error);
        self.failures.extend(other.failures);
    }
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Checks the gradient of a scalar function of one tensor at every element.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&Tensor<f64>) -> Result<Tensor<f64>>,
{
    let all: Vec<usize> = (0..x.numel()).collect();
    grad_check_many(
        |xs: &[Tensor<f64>]| f(&xs[0]),
        std::slice::from_ref(x),
        &[all],
        step,
        tol,
    )
}

/// Checks the gradient of a scalar function of several tensors.
///
/// `indices[i]` lists the elements of input `i` to perturb; inputs without
/// an entry are checked at every element.
pub fn grad_check_many<F>(
    f: F,
    xs: &[Tensor<f64>],
    indices: &[Vec<usize>],
    step: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    if step <= 0.0 {
        return Err(DiffError::arg("grad_check", "step must be positive"));
    }
    let graph = Graph::new();
    let leaves = xs
        .iter()
        .map(|x| graph.leaf(x.shape(), x.to_vec()))
        .collect::<Result<Vec<_>>>()?;
    let loss = f(&leaves)?;
    if loss.numel() != 1 {
        return Err(DiffError::NonScalarLoss(loss.shape().to_vec()));
    }
    graph.backward(&loss)?;

    let mut report = GradCheckReport::default();
    for (i, x) in xs.iter().enumerate() {
        let analytic = leaves[i].grad().unwrap_or_else(|| vec![0.0; x.numel()]);
        let idx: Vec<usize> = match indices.get(i) {
            Some(v) => v.clone(),
            None => (0..x.numel()).collect(),
        };
        let mut part = GradCheckReport::default();
        for j in idx {
            if j >= x.numel() {
                return Err(DiffError::arg("grad_check", format!("index {j} out of range")));
            }
            let eval = |delta: f64| -> Result<f64> {
                let mut inputs: Vec<Tensor<f64>> = xs.iter().map(Tensor::detach).collect();
                let mut v = x.to_vec();
                v[j] += delta;
                inputs[i] = Tensor::constant(x.shape(), v)?;
                Ok(f(&inputs)?.item())
            };
            let numeric = (eval(step)? - eval(-step)?) / (2.0 * step);
            let a = analytic[j];
            let e = rel_error(a, numeric);
            part.checked += 1;
            part.max_rel_error = part.max_rel_error.max(e);
            if !(e < tol) {
                part.failures.push(GradCheckFailure {
                    input: i,
                    index: j,
                    analytic: a,
                    numeric,
                    rel_error: e,
                });
            }
        }
        report.merge(part);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_has_zero_error() {
        let x = Tensor::from_f64(&[5], &[0.3, -1.0, 2.0, 7.0, 0.0]).unwrap();
        let r = grad_check(|x| x.sum_all(), &x, 1e-4, 1e-4).unwrap();
        assert_eq!(r.checked, 5);
        assert!(r.max_rel_error < 1e-9);
        assert!(r.passed());
    }

    #[test]
    fn sigmoid_at_zero_is_quarter() {
        let x = Tensor::from_f64(&[3], &[0.0; 3]).unwrap();
        let g = Graph::new();
        let leaf = g.leaf(&[3], vec![0.0; 3]).unwrap();
        g.backward(&leaf.sigmoid().unwrap().sum_all().unwrap()).unwrap();
        assert_eq!(leaf.grad().unwrap(), vec![0.25; 3]);
        let r = grad_check(|x| x.sigmoid()?.sum_all(), &x, 1e-4, 1e-4).unwrap();
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn wrong_gradient_is_reported() {
        // relu at exactly 0: analytic 0, numeric 0.5
        let x = Tensor::from_f64(&[2], &[0.0, 1.0]).unwrap();
        let r = grad_check(|x| x.relu()?.sum_all(), &x, 1e-4, 1e-4).unwrap();
        assert_eq!(r.failures.len(), 1);
        assert_eq!(r.failures[0].index, 0);
    }
}
