use super::{Result, Tensor, TensorError};

/// Central-difference gradient check in f64.
///
/// Evaluates `f` at `x ± h·eᵢ` per coordinate and compares against the
/// provided analytic gradient. Returns the maximum over coordinates of
/// `|a - n| / max(|a|, |n|, 1e-12)`.
///
/// `f` must be deterministic; it is evaluated twice at `x` and a bitwise
/// difference is an error.
pub fn finite_diff_grad_check<F>(
    f: F,
    x: &Tensor<f64>,
    analytic: &[f64],
    h: f64,
) -> Result<f64>
where
    F: Fn(&Tensor<f64>) -> Result<f64>,
{
    if h <= 0.0 {
        return Err(TensorError::InvalidArgument {
            op: "finite_diff_grad_check",
            message: format!("step size must be positive, got {h}"),
        });
    }
    if analytic.len() != x.len() {
        return Err(TensorError::ShapeMismatch {
            op: "finite_diff_grad_check",
            left: x.shape().to_vec(),
            right: vec![analytic.len()],
        });
    }

    let base1 = f(x)?;
    let base2 = f(x)?;
    if base1.to_bits() != base2.to_bits() {
        return Err(TensorError::NonDeterministic);
    }

    let mut probe = x.clone();
    let mut max_rel = 0.0f64;
    for i in 0..x.len() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        let a = analytic[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-12);
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::SeededRng;

    #[test]
    fn quadratic_gradient_is_exact() {
        // f = ½‖x‖² has gradient x.
        let mut rng = SeededRng::new(9);
        let data: Vec<f64> = (0..12).map(|_| rng.next_normal()).collect();
        let x = Tensor::new(vec![12], data.clone()).unwrap();
        let f = |t: &Tensor<f64>| Ok(0.5 * t.data().iter().map(|v| v * v).sum::<f64>());
        // The difference quotient of a quadratic is exact for any h, so a
        // larger step only reduces rounding cancellation.
        let err = finite_diff_grad_check(f, &x, &data, 1e-3).unwrap();
        assert!(err < 1e-9, "err = {err}");
    }

    #[test]
    fn corrupted_gradient_is_detected() {
        let x = Tensor::new(vec![3], vec![0.4, -0.2, 0.9]).unwrap();
        let mut wrong = x.data().to_vec();
        wrong[1] += 0.5;
        let f = |t: &Tensor<f64>| Ok(0.5 * t.data().iter().map(|v| v * v).sum::<f64>());
        let err = finite_diff_grad_check(f, &x, &wrong, 1e-5).unwrap();
        assert!(err > 1e-2, "err = {err}");
    }

    #[test]
    fn nondeterministic_function_rejected() {
        use std::cell::Cell;
        let calls = Cell::new(0u64);
        let f = |_: &Tensor<f64>| {
            calls.set(calls.get() + 1);
            Ok(calls.get() as f64)
        };
        let x = Tensor::new(vec![1], vec![0.0]).unwrap();
        let err = finite_diff_grad_check(f, &x, &[0.0], 1e-5).unwrap_err();
        assert_eq!(err, TensorError::NonDeterministic);
    }
}
