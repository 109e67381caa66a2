//! Central-difference gradient checking.

use crate::error::{Error, TensorError};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Compares the tape gradient of `f` at `params` against central
/// differences with step `h`.
///
/// Returns the maximum over all parameter components of
/// `|analytic - numeric| / max(1, |numeric|)`.
pub fn finite_diff_check<F, E>(f: F, params: &[Tensor], h: f64) -> Result<f64, Error>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>, E>,
    E: Into<Error>,
{
    if !(h > 0.0) {
        return Err(TensorError::Contract(format!("finite difference step must be > 0, got {h}")).into());
    }
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = params.iter().map(|p| tape.param(p.clone())).collect();
    let out = f(&tape, &vars).map_err(Into::into)?;
    check_finite(out.value().item())?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|v| grads.wrt(*v).clone()).collect();

    let eval = |ps: &[Tensor]| -> Result<f64, Error> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = ps.iter().map(|p| tape.param(p.clone())).collect();
        let v = f(&tape, &vars).map_err(Into::into)?.value().item();
        Ok(check_finite(v)?)
    };

    let mut worst: f64 = 0.0;
    let mut work = params.to_vec();
    for (pi, g) in analytic.iter().enumerate() {
        for k in 0..params[pi].len() {
            let x0 = params[pi].data()[k];
            work[pi].data_mut()[k] = x0 + h;
            let up = eval(&work)?;
            work[pi].data_mut()[k] = x0 - h;
            let down = eval(&work)?;
            work[pi].data_mut()[k] = x0;
            let numeric = (up - down) / (2.0 * h);
            let err = (g.data()[k] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

fn check_finite(v: f64) -> Result<f64, TensorError> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(TensorError::domain("finite_diff_check", format!("function value {v} is not finite")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let p = Tensor::vector(vec![0.3, -1.2, 2.0]);
        let err = finite_diff_check(|_, v| v[0].square()?.sum()?.scale(1.5), &[p], 1e-5).unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn relu_away_from_kink() {
        let p = Tensor::vector(vec![0.7, -0.4, 1.3]);
        let err = finite_diff_check(|_, v| v[0].relu()?.square()?.sum(), &[p], 1e-5).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn rejects_non_finite_values() {
        let p = Tensor::vector(vec![1.0]);
        let r = finite_diff_check(|t, v| v[0].div(t.scalar(0.0).add_scalar(1e-320)?)?.exp()?.sum(), &[p], 1e-5);
        assert!(matches!(r, Err(Error::Tensor(TensorError::Domain { .. }))));
    }

    #[test]
    fn rejects_bad_step() {
        let p = Tensor::vector(vec![1.0]);
        assert!(finite_diff_check(|_, v| v[0].sum(), &[p], 0.0).is_err());
    }
}
