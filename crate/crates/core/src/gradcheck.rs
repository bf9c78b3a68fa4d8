//! Central finite-difference verification of tape gradients.

use crate::autodiff::{BackwardFault, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic - numeric| / max(1, |analytic|)` over every coordinate.
    pub max_rel_error: f64,
    /// `(input index, flat coordinate)` where the maximum occurred.
    pub worst: (usize, usize),
    pub coordinates: usize,
}

/// Checks a scalar function of one tensor. Returns the maximum relative error.
pub fn grad_check<F>(f: F, point: &Tensor, epsilon: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let report = grad_check_many(
        |tape, vars| f(tape, vars[0]),
        std::slice::from_ref(point),
        epsilon,
        BackwardFault::None,
    )?;
    Ok(report.max_rel_error)
}

/// Checks a scalar function of several tensors against central differences
/// in every coordinate of every input.
pub fn grad_check_many<F>(f: F, points: &[Tensor], epsilon: f64, fault: BackwardFault) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if epsilon.is_nan() || epsilon <= 0.0 {
        return Err(Error::Config(format!("epsilon must be positive, got {epsilon}")));
    }

    let mut tape = Tape::with_fault(fault);
    let vars: Vec<Var> = points.iter().map(|p| tape.param(p)).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(points)
        .map(|(&v, p)| tape.grad(v).map_or_else(|| vec![0.0; p.len()], <[f64]>::to_vec))
        .collect();
    drop(tape);

    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|p| tape.constant(p)).collect();
        let out = f(&mut tape, &vars)?;
        tape.check_finite()?;
        Ok(tape.scalar(out))
    };

    let mut work = points.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        coordinates: 0,
    };
    for (ti, grads) in analytic.iter().enumerate() {
        for (ci, &a) in grads.iter().enumerate() {
            let orig = work[ti].data()[ci];
            work[ti].data_mut()[ci] = orig + epsilon;
            let plus = eval(&work).map_err(|e| at_coordinate(ti, ci, e))?;
            work[ti].data_mut()[ci] = orig - epsilon;
            let minus = eval(&work).map_err(|e| at_coordinate(ti, ci, e))?;
            work[ti].data_mut()[ci] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite(format!("loss at input {ti} coordinate {ci}")));
            }

            let numeric = (plus - minus) / (2.0 * epsilon);
            let rel = (a - numeric).abs() / a.abs().max(1.0);
            if rel > report.max_rel_error || rel.is_nan() {
                report.max_rel_error = rel;
                report.worst = (ti, ci);
            }
            report.coordinates += 1;
        }
    }
    Ok(report)
}

fn at_coordinate(tensor: usize, coord: usize, e: Error) -> Error {
    match e {
        Error::NonFinite(msg) => Error::NonFinite(format!("{msg} (perturbing input {tensor} coordinate {coord})")),
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    #[test]
    fn sum_of_squares_is_exact() {
        let p = Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let err = grad_check(
            |t, x| {
                let sq = t.mul(x, x)?;
                Ok(t.sum(sq))
            },
            &p,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn corrupted_matmul_rule_is_detected() {
        let mut rng = Rng::new(11);
        let a = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let b = Tensor::randn(&[4, 2], 1.0, &mut rng);
        let f = |t: &mut Tape, v: &[Var]| {
            let y = t.matmul(v[0], v[1])?;
            let s = t.softmax_rows(y)?;
            let w = t.mul(s, y)?;
            Ok(t.sum(w))
        };
        let clean = grad_check_many(f, &[a.clone(), b.clone()], 1e-5, BackwardFault::None).unwrap();
        assert!(clean.max_rel_error < 1e-6);
        let bad = grad_check_many(f, &[a, b], 1e-5, BackwardFault::MatMulRhs).unwrap();
        assert!(bad.max_rel_error > 1e-2, "{}", bad.max_rel_error);
        assert_eq!(bad.worst.0, 1);
    }

    #[test]
    fn non_finite_names_the_coordinate() {
        // finite at the point itself, overflows once nudged upward
        let p = Tensor::new(&[1], vec![1.0]).unwrap();
        let err = grad_check(
            |t, x| {
                let y = t.scale(x, f64::MAX);
                Ok(t.sum(y))
            },
            &p,
            1e-5,
        )
        .unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::NonFinite(_)));
        assert!(msg.contains("coordinate"), "{msg}");
    }
}
