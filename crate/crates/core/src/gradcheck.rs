//! Central finite-difference verification for recorded functions.

use crate::error::{Result, SteerError};
use crate::tape::{Tape, TensorId};
use crate::tensor::Tensor;

/// Relative error between an analytic and a numerical derivative, with a
/// floor so that a pair of exact zeros compares as zero.
pub fn relative_error(analytic: f64, numerical: f64) -> f64 {
    let denom = analytic.abs().max(numerical.abs()).max(1e-12);
    (analytic - numerical).abs() / denom
}

/// A scalar function recorded on a fresh tape each evaluation.
///
/// The closure receives the tape and the leaf id of `x` and must return the
/// scalar root id.
pub trait RecordedFn {
    fn record(&self, tape: &mut Tape, x: TensorId) -> Result<TensorId>;
}

impl<F> RecordedFn for F
where
    F: Fn(&mut Tape, TensorId) -> Result<TensorId>,
{
    fn record(&self, tape: &mut Tape, x: TensorId) -> Result<TensorId> {
        self(tape, x)
    }
}

fn eval(f: &impl RecordedFn, x: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let leaf = tape.leaf(x.clone(), false)?;
    let root = f.record(&mut tape, leaf)?;
    let value = tape.value(root);
    if !value.is_scalar() {
        return Err(SteerError::RootNotScalar {
            rows: value.rows(),
            cols: value.cols(),
        });
    }
    Ok(value.item())
}

/// Analytic gradient of `f` at `x` via one taped forward/backward.
pub fn analytic_gradient(f: &impl RecordedFn, x: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let leaf = tape.leaf(x.clone(), true)?;
    let root = f.record(&mut tape, leaf)?;
    let grads = tape.backward(root)?;
    Ok(grads.get(leaf))
}

/// Central-difference gradient of `f` at `x` for the given coordinates
/// (all coordinates when `coords` is `None`).
pub fn numerical_gradient(
    f: &impl RecordedFn,
    x: &Tensor,
    eps: f64,
    coords: Option<&[usize]>,
) -> Result<Vec<(usize, f64)>> {
    if eps <= 0.0 {
        return Err(SteerError::invalid("grad_check", "eps must be positive"));
    }
    let all: Vec<usize>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = (0..x.len()).collect();
            &all
        }
    };
    let mut out = Vec::with_capacity(coords.len());
    let mut probe = x.clone();
    for &i in coords {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = eval(f, &probe)?;
        probe.data_mut()[i] = orig - eps;
        let minus = eval(f, &probe)?;
        probe.data_mut()[i] = orig;
        let cd = (plus - minus) / (2.0 * eps);
        if !cd.is_finite() {
            return Err(SteerError::NonFinite { op: "grad_check" });
        }
        out.push((i, cd));
    }
    Ok(out)
}

/// Max relative error between the analytic gradient and central differences
/// over every coordinate of `x`.
pub fn grad_check(f: &impl RecordedFn, x: &Tensor, eps: f64) -> Result<f64> {
    grad_check_coords(f, x, eps, None)
}

/// Like [`grad_check`] but restricted to chosen coordinates. Large inputs
/// (the decoder's full latent variable) are checked on the coordinates that
/// carry the most gradient instead of all of them.
pub fn grad_check_coords(
    f: &impl RecordedFn,
    x: &Tensor,
    eps: f64,
    coords: Option<&[usize]>,
) -> Result<f64> {
    let analytic = analytic_gradient(f, x)?;
    if !analytic.all_finite() {
        return Err(SteerError::NonFinite { op: "grad_check" });
    }
    let numerical = numerical_gradient(f, x, eps, coords)?;
    let mut max_err = 0.0f64;
    for (i, cd) in numerical {
        max_err = max_err.max(relative_error(analytic.data()[i], cd));
    }
    Ok(max_err)
}

/// Indices of the `k` largest-magnitude entries of the analytic gradient.
pub fn top_gradient_coords(gradient: &Tensor, k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..gradient.len()).collect();
    idx.sort_by(|&a, &b| {
        gradient.data()[b]
            .abs()
            .partial_cmp(&gradient.data()[a].abs())
            .unwrap()
    });
    idx.truncate(k);
    idx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact_under_central_differences() {
        // f(x) = x^2 at x = 3
        let f = |tape: &mut Tape, x: TensorId| tape.square(x);
        let err = grad_check(&f, &Tensor::scalar(3.0), 1e-6).unwrap();
        assert!(err < 1e-8, "error {err}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let f = |tape: &mut Tape, x: TensorId| {
            let zero = tape.scale(x, 0.0)?;
            tape.mean(zero)
        };
        let err = grad_check(&f, &Tensor::row(&[1.0, -2.0]), 1e-6).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn rejects_non_positive_eps() {
        let f = |tape: &mut Tape, x: TensorId| tape.square(x);
        assert!(grad_check(&f, &Tensor::scalar(1.0), 0.0).is_err());
    }

    #[test]
    fn softmax_composition_checks_out() {
        let f = |tape: &mut Tape, x: TensorId| {
            let s = tape.row_softmax(x)?;
            let c = tape.constant(Tensor::column(&[0.3, -1.0, 2.0, 0.1]))?;
            let y = tape.matmul(s, c)?;
            tape.square(y)
        };
        let x = Tensor::row(&[0.2, -0.4, 1.3, 0.9]);
        let err = grad_check(&f, &x, 1e-6).unwrap();
        assert!(err < 1e-8, "error {err}");
    }
}
