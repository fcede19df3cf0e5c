use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Max relative error between tape gradients of the scalar `f(x)` and
/// central differences with step `eps`.
///
/// The error per element is `|analytic - numeric| / max(1, |analytic|)`.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    grad_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), eps)
}

/// [`grad_check`] over several inputs at once; every input is perturbed.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor<f64>], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>], track: bool| -> Result<(Tape<f64>, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> =
            values.iter().map(|t| tape.leaf(&t.clone().with_requires_grad(track))).collect();
        let out = f(&mut tape, &vars)?;
        if tape.value(out).len() != 1 {
            return Err(Error::dim(format!("grad_check needs a scalar function, got {:?}", tape.shape(out))));
        }
        Ok((tape, vars, out))
    };

    let (mut tape, vars, out) = eval(inputs, true)?;
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> =
        vars.iter().map(|&v| tape.grad(v).expect("tracked input has a gradient").to_vec()).collect();

    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for (which, grads) in analytic.iter().enumerate() {
        for (i, &a) in grads.iter().enumerate() {
            let orig = probe[which].data()[i];
            probe[which].data_mut()[i] = orig + eps;
            let (t, _, o) = eval(&probe, false)?;
            let plus = t.value(o)[0];
            probe[which].data_mut()[i] = orig - eps;
            let (t, _, o) = eval(&probe, false)?;
            let minus = t.value(o)[0];
            probe[which].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact() {
        let x = Tensor::<f64>::from_fn(&[3, 2], |i| i as f64 * 0.3 - 0.5);
        let err = grad_check(
            |t, x| {
                let s = t.scale(x, 2.5)?;
                t.sum(s)
            },
            &x,
            1e-4,
        )
        .unwrap();
        assert!(err <= 1e-10, "{err}");
    }

    #[test]
    fn rejects_non_scalar_output() {
        let x = Tensor::<f64>::ones(&[2]);
        let err = grad_check(|t, x| t.relu(x), &x, 1e-4).unwrap_err();
        assert!(matches!(err, Error::Dimension(_)));
    }
}
