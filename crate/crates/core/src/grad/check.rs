use super::{GradError, Tape, Var};

/// Default central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Compares reverse-mode gradients against central differences.
///
/// `build` must register exactly `params` (in order, via
/// [`Tape::params_from_flat`] or equivalent) and return a scalar node.
/// Returns `max_i |analytic_i - fd_i| / (|analytic_i| + 1e-12)`.
pub fn grad_check<F>(build: F, params: &[f64], h: f64) -> Result<f64, GradError>
where
    F: Fn(&mut Tape, &[f64]) -> Var,
{
    Ok(grad_compare(build, params, h)?
        .iter()
        .map(|&(a, fd)| relative_error(a, fd))
        .fold(0.0, f64::max))
}

pub fn relative_error(analytic: f64, fd: f64) -> f64 {
    (analytic - fd).abs() / (analytic.abs() + 1e-12)
}

/// Per-coordinate `(analytic, central difference)` pairs.
pub fn grad_compare<F>(build: F, params: &[f64], h: f64) -> Result<Vec<(f64, f64)>, GradError>
where
    F: Fn(&mut Tape, &[f64]) -> Var,
{
    let eval = |p: &[f64]| -> Result<f64, GradError> {
        let mut tape = Tape::new();
        let out = build(&mut tape, p);
        let v = tape.scalar(out);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(GradError::NonFinite {
                node: out.index(),
                op: "output",
            })
        }
    };

    let mut tape = Tape::new();
    let out = build(&mut tape, params);
    if tape.num_params() != params.len() {
        return Err(GradError::ShapeMismatch {
            expected: params.len(),
            found: tape.num_params(),
        });
    }
    let analytic = tape.backward(out)?.flat();

    let mut p = params.to_vec();
    let mut pairs = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        p[i] = params[i] + h;
        let up = eval(&p)?;
        p[i] = params[i] - h;
        let down = eval(&p)?;
        p[i] = params[i];
        pairs.push((analytic[i], (up - down) / (2.0 * h)));
    }
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    #[test]
    fn linear_function_is_exact() {
        let params = [0.7, -1.3, 2.0];
        let err = grad_check(
            |t, p| {
                let w = t.params_from_flat(p, &[(1, 3)])[0];
                let x = t.constant(Array2::from_shape_vec((1, 3), vec![1.5, -0.5, 0.25]).unwrap());
                let y = t.mul(w, x);
                t.sum(y)
            },
            &params,
            FD_STEP,
        )
        .unwrap();
        assert!(err <= 1e-10, "{err}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let err = grad_check(
            |t, p| {
                let _ = t.params_from_flat(p, &[(1, 2)]);
                t.scalar_constant(3.0)
            },
            &[1.0, 2.0],
            FD_STEP,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn wrong_param_count_is_an_error() {
        let res = grad_check(
            |t, p| {
                let v = t.params_from_flat(&p[..1], &[(1, 1)])[0];
                t.sum(v)
            },
            &[1.0, 2.0],
            FD_STEP,
        );
        assert!(matches!(res, Err(GradError::ShapeMismatch { .. })));
    }
}
