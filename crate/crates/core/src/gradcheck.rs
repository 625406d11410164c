//! Central finite-difference gradient checking.
//!
//! The numerical side only ever evaluates forward values, so it is an
//! independent oracle for the reverse-mode gradients it is compared with.

use crate::autodiff::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::{Tensor, TensorResult};

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Per input: `‖analytic − numeric‖ / max(‖analytic‖ + ‖numeric‖, tiny)`.
    pub rel_errors: Vec<f64>,
    pub analytic: Vec<Vec<f64>>,
    pub numeric: Vec<Vec<f64>>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.rel_errors.iter().copied().fold(0.0, f64::max)
    }
}

/// Relative error between two gradient vectors. Two all-zero vectors agree.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let denom = na + nb;
    if denom < 1e-300 {
        0.0
    } else {
        diff / denom
    }
}

/// Compares backward gradients of `f` at `inputs` against central
/// differences with step `h`. `f` must build a single-element loss.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], h: f64, f: F) -> TensorResult<GradCheckReport>
where
    F: for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> TensorResult<Var<'g, f64>>,
{
    let eval = |xs: &[Tensor<f64>]| -> TensorResult<f64> {
        let g = Graph::new();
        let vars: Vec<_> = xs.iter().map(|x| g.constant(x.clone())).collect();
        Ok(f(&g, &vars)?.item())
    };

    let g = Graph::new();
    let vars: Vec<_> = inputs.iter().map(|x| g.param(x.clone())).collect();
    let loss = f(&g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|v| {
            v.grad()
                .map(|t| t.into_data())
                .unwrap_or_else(|| vec![0.0; v.value().numel()])
        })
        .collect();

    let mut numeric = Vec::with_capacity(inputs.len());
    for (i, x) in inputs.iter().enumerate() {
        let mut grad = vec![0.0; x.numel()];
        for (j, slot) in grad.iter_mut().enumerate() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= h;
            *slot = (eval(&plus)? - eval(&minus)?) / (2.0 * h);
        }
        numeric.push(grad);
    }

    let rel_errors = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| relative_error(a, n))
        .collect();
    Ok(GradCheckReport {
        rel_errors,
        analytic,
        numeric,
    })
}

/// True when any value lies within `margin` of a non-differentiable point at 0.
pub fn near_kink<S: Scalar>(values: &[S], margin: f64) -> bool {
    values.iter().any(|v| v.as_f64().abs() < margin)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_matches_exactly() {
        let x = Tensor::from_f64(vec![3], &[0.5, -1.0, 2.0]).unwrap();
        let r = check_gradients(&[x], 1e-4, |_, v| Ok(v[0].square().sum())).unwrap();
        assert!(r.max_rel_error() < 1e-9);
        assert_eq!(r.analytic[0], vec![1.0, -2.0, 4.0]);
    }

    #[test]
    fn relative_error_zero_vectors() {
        assert_eq!(relative_error(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
        assert!((relative_error(&[1.0], &[0.0]) - 1.0).abs() < 1e-15);
    }
}
