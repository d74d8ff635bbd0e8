//! Central finite-difference gradient checks in 64-bit precision.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Denominator floor for relative errors, so that gradients that are
/// zero up to rounding do not produce huge ratios.
pub const REL_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = libm::fmax(
        libm::fmax(libm::fabs(analytic), libm::fabs(numeric)),
        REL_FLOOR,
    );
    libm::fabs(analytic - numeric) / denom
}

fn eval<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    Ok(tape.value(out).item())
}

/// Max relative error between backward gradients and central differences,
/// reported per input tensor.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor<f64>], eps: f64) -> Result<Vec<f64>>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let first = eval(&f, inputs)?;
    let second = eval(&f, inputs)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic(first, second));
    }

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut errors = Vec::with_capacity(inputs.len());
    for (k, grad) in analytic.iter().enumerate() {
        let mut worst = 0.0f64;
        for i in 0..inputs[k].len() {
            let orig = inputs[k].data()[i];
            work[k].data_mut()[i] = orig + eps;
            let plus = eval(&f, &work)?;
            work[k].data_mut()[i] = orig - eps;
            let minus = eval(&f, &work)?;
            work[k].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            worst = libm::fmax(worst, relative_error(grad.data()[i], numeric));
        }
        errors.push(worst);
    }
    Ok(errors)
}

/// Single-input form of [`grad_check_many`].
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let errs = grad_check_many(|t, v| f(t, v[0]), core::slice::from_ref(x), eps)?;
    Ok(errs[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use core::cell::Cell;

    #[test]
    fn sum_is_exact_on_dyadic_inputs() {
        let x = Tensor::from_f64(&[2, 3], &[1.0, -2.0, 0.5, 4.0, 8.0, -0.25]).unwrap();
        let err = grad_check(|t, v| Ok(t.sum(v)), &x, 1.0 / 131072.0).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn softmax_pick_matches_analytic_jacobian() {
        // d softmax_j / d x_i = s_j (delta_ij - s_i), checked against backward
        // and against finite differences.
        let mut rng = Rng::new(5);
        let x: Tensor<f64> = Tensor::uniform(&[6], -2.0, 2.0, &mut rng);
        let j = 2;
        let pick = |t: &mut Tape<f64>, v: Var| {
            let s = t.softmax_lastdim(v)?;
            let p = t.narrow(s, 0, j, 1)?;
            Ok(t.sum(p))
        };
        let err = grad_check(pick, &x, 1e-5).unwrap();
        assert!(err < 1e-6, "err {err}");

        let xs = x.data();
        let z: f64 = xs.iter().map(|v| v.exp()).sum();
        let s: Vec<f64> = xs.iter().map(|v| v.exp() / z).collect();
        let mut tape = Tape::new();
        let v = tape.leaf(x.clone(), true);
        let out = pick(&mut tape, v).unwrap();
        tape.backward(out).unwrap();
        let g = tape.grad(v).unwrap();
        for i in 0..6 {
            let want = s[j] * (if i == j { 1.0 } else { 0.0 } - s[i]);
            assert!((g.data()[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_non_deterministic_function() {
        let calls = Cell::new(0u32);
        let x = Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap();
        let res = grad_check(
            |t, v| {
                calls.set(calls.get() + 1);
                let s = t.sum(v);
                Ok(t.scale(s, calls.get() as f64))
            },
            &x,
            1e-5,
        );
        assert!(matches!(res, Err(Error::NonDeterministic(..))));
    }
}
