//! Central-difference oracle for the tape's analytic gradients.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{DmmError, Result};

/// Max over coordinates of `|analytic - central| / max(1, |central|)` for a
/// scalar function of one tensor.
pub fn check_gradient<F>(f: F, x: &Tensor, epsilon: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let errs = check_gradients(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), epsilon)?;
    Ok(errs[0])
}

/// Per-input version of [`check_gradient`] for functions of several tensors.
/// Returns one max relative error per input tensor.
pub fn check_gradients<F>(f: F, xs: &[Tensor], epsilon: f64) -> Result<Vec<f64>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&epsilon) {
        return Err(DmmError::invalid(
            "check_gradient",
            format!("epsilon {epsilon} outside [1e-7, 1e-3]"),
        ));
    }

    let mut tape = Tape::new();
    let vars: Vec<Var> = xs.iter().map(|x| tape.param(x)).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| tape.constant(x.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let v = tape.value(out).item();
        if v.is_finite() {
            Ok(v)
        } else {
            Err(DmmError::NonFinite { op: "check_gradient" })
        }
    };

    let mut probe: Vec<Tensor> = xs.to_vec();
    let mut errors = Vec::with_capacity(xs.len());
    for (which, var) in vars.iter().enumerate() {
        let zeros = vec![0.0; xs[which].numel()];
        let analytic = grads.get(*var).unwrap_or(&zeros).to_vec();
        let mut worst: f64 = 0.0;
        for (i, &orig) in xs[which].data().iter().enumerate() {
            probe[which].data_mut()[i] = orig + epsilon;
            let up = eval(&probe)?;
            probe[which].data_mut()[i] = orig - epsilon;
            let down = eval(&probe)?;
            probe[which].data_mut()[i] = orig;
            let central = (up - down) / (2.0 * epsilon);
            worst = worst.max((analytic[i] - central).abs() / central.abs().max(1.0));
        }
        errors.push(worst);
    }
    Ok(errors)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let x = Tensor::new(&[2], vec![1.0, 2.0]).unwrap();
        let err = check_gradient(
            |t, x| {
                let sq = t.mul(x, x)?;
                Ok(t.sum(sq))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn rejects_bad_epsilon() {
        let x = Tensor::scalar(1.0);
        assert!(check_gradient(|t, x| Ok(t.sum(x)), &x, 1e-1).is_err());
        assert!(check_gradient(|t, x| Ok(t.sum(x)), &x, 1e-9).is_err());
    }

    #[test]
    fn detects_wrong_gradient() {
        // exp overflows under probing -> non-finite error path
        let x = Tensor::scalar(800.0);
        assert!(check_gradient(|t, x| Ok(t.exp(x)), &x, 1e-5).is_err());
    }
}
