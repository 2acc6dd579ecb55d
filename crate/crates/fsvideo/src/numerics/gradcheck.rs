//! Finite-difference gradient checking.
//!
//! Central differences with step 1e-5 are the canonical oracle for every
//! differentiable operation in the crate: O(eps^2) truncation error is ample
//! at f64 precision, and the check is independent of the tape's own VJPs.

use crate::error::{Error, Result};
use crate::numerics::tape::{Tape, Value};
use crate::numerics::tensor::Tensor;

/// A differentiable scalar function of several tensors, expressed as a graph
/// builder. The builder must be deterministic in its inputs.
pub trait ScalarFn {
    fn build(&self, tape: &mut Tape, inputs: &[Value]) -> Result<Value>;
}

impl<F> ScalarFn for F
where
    F: Fn(&mut Tape, &[Value]) -> Result<Value>,
{
    fn build(&self, tape: &mut Tape, inputs: &[Value]) -> Result<Value> {
        self(tape, inputs)
    }
}

fn eval<F: ScalarFn + ?Sized>(f: &F, points: &[Tensor]) -> Result<f64> {
    let mut tape = Tape::new();
    let vals: Vec<Value> = points.iter().map(|p| tape.leaf(p.clone())).collect();
    let root = f.build(&mut tape, &vals)?;
    if tape.value(root).numel() != 1 {
        return Err(Error::NonScalarRoot {
            shape: tape.shape(root).to_vec(),
        });
    }
    Ok(tape.value(root).item())
}

/// Max relative error between tape gradients and central finite differences,
/// over every coordinate of every input:
/// |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
pub fn grad_check<F: ScalarFn + ?Sized>(f: &F, points: &[Tensor], eps: f64) -> Result<f64> {
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(Error::invalid_arg("grad_check", format!("eps {eps} outside (0, 1e-2]")));
    }

    // analytic gradients
    let mut tape = Tape::new();
    let vals: Vec<Value> = points.iter().map(|p| tape.param(p.clone())).collect();
    let root = f.build(&mut tape, &vals)?;
    let (_, grads) = tape.forward_backward(root, &vals)?;

    let mut max_rel = 0.0f64;
    for (i, point) in points.iter().enumerate() {
        for j in 0..point.numel() {
            let mut plus = points.to_vec();
            plus[i].data_mut()[j] += eps;
            let mut minus = points.to_vec();
            minus[i].data_mut()[j] -= eps;
            let numeric = (eval(f, &plus)? - eval(f, &minus)?) / (2.0 * eps);
            let analytic = grads[i].data()[j];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}

/// Default finite-difference step used across the test suites.
pub const GRAD_CHECK_EPS: f64 = 1e-5;

/// Threshold every differentiable operation must meet.
pub const GRAD_CHECK_TOL: f64 = 1e-5;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        // f(x) = x * x at x = 3: value 9, gradient 6
        let f = |tape: &mut Tape, inputs: &[Value]| -> Result<Value> {
            let y = tape.mul(inputs[0], inputs[0])?;
            tape.sum_all(y)
        };
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.0));
        let y = tape.mul(x, x).unwrap();
        let root = tape.sum_all(y).unwrap();
        let (value, grads) = tape.forward_backward(root, &[x]).unwrap();
        assert_eq!(value, 9.0);
        assert_eq!(grads[0].item(), 6.0);

        let err = grad_check(&f, &[Tensor::scalar(3.0)], 1e-5).unwrap();
        assert!(err < 1e-8, "x^2 grad check error {err}");
    }

    #[test]
    fn eps_out_of_range_rejected() {
        let f = |tape: &mut Tape, inputs: &[Value]| tape.sum_all(inputs[0]);
        assert!(grad_check(&f, &[Tensor::scalar(1.0)], 0.0).is_err());
        assert!(grad_check(&f, &[Tensor::scalar(1.0)], 0.5).is_err());
    }
}
