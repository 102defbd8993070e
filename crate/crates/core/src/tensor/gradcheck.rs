//! Central-difference gradient oracle for anything built on a [`Tape`].

use std::fmt::Display;

use thiserror::Error;

use super::{Tape, Tensor, Var};

pub const DEFAULT_FD_STEP: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum GradCheckError {
    #[error("step must be positive, got {0}")]
    BadStep(f64),
    #[error("objective is not finite ({0})")]
    NonFinite(f64),
    #[error("objective failed: {0}")]
    Objective(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// max over entries of |a - n| / max(|a|, |n|, 1e-8)
    pub max_rel_error: f64,
    pub entries: usize,
    /// `(input, entry, analytic, numeric)` at the maximum.
    pub worst: Option<(usize, usize, f64, f64)>,
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

fn eval<E: Display>(
    f: &impl Fn(&mut Tape, &[Var]) -> Result<Var, E>,
    inputs: &[Tensor],
) -> Result<(Tape, Vec<Var>, Var, f64), GradCheckError> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars).map_err(|e| GradCheckError::Objective(e.to_string()))?;
    let v = tape.value(out);
    if v.len() != 1 {
        return Err(GradCheckError::Objective(format!("objective must be scalar, got shape {:?}", v.shape())));
    }
    let y = v.data()[0];
    if !y.is_finite() {
        return Err(GradCheckError::NonFinite(y));
    }
    Ok((tape, vars, out, y))
}

/// Compare tape gradients of the scalar `f(inputs)` against
/// `(f(θ+h) - f(θ-h)) / 2h` for every entry of every input.
pub fn finite_diff_check<E: Display>(
    inputs: &[Tensor],
    h: f64,
    f: impl Fn(&mut Tape, &[Var]) -> Result<Var, E>,
) -> Result<GradCheckReport, GradCheckError> {
    if h.is_nan() || h <= 0.0 {
        return Err(GradCheckError::BadStep(h));
    }
    let (mut tape, vars, out, _) = eval(&f, inputs)?;
    tape.backward(out).map_err(|e| GradCheckError::Objective(e.to_string()))?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec))
        .collect();
    drop(tape);

    let mut probe = inputs.to_vec();
    let mut report = GradCheckReport { max_rel_error: 0.0, entries: 0, worst: None };
    for (i, grads) in analytic.iter().enumerate() {
        for (j, &a) in grads.iter().enumerate() {
            let orig = probe[i].data()[j];
            probe[i].data_mut()[j] = orig + h;
            let (.., up) = eval(&f, &probe)?;
            probe[i].data_mut()[j] = orig - h;
            let (.., down) = eval(&f, &probe)?;
            probe[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let err = relative_error(a, numeric);
            report.entries += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((i, j, a, numeric));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::TensorError;

    #[test]
    fn quadratic_is_exact() {
        let theta = Tensor::new(&[3], vec![0.7, -1.3, 2.1]).unwrap();
        let r = finite_diff_check(&[theta], DEFAULT_FD_STEP, |t, v| {
            let sq = t.mul(v[0], v[0])?;
            Ok::<_, TensorError>(t.sum(sq))
        })
        .unwrap();
        assert_eq!(r.entries, 3);
        assert!(r.max_rel_error < 1e-8, "{r:?}");
    }

    #[test]
    fn constant_objective_has_zero_error() {
        let theta = Tensor::new(&[2], vec![1.0, 2.0]).unwrap();
        let r = finite_diff_check(&[theta], DEFAULT_FD_STEP, |t, _| Ok::<_, TensorError>(t.leaf(Tensor::scalar(4.0))))
            .unwrap();
        assert_eq!(r.max_rel_error, 0.0);
    }

    #[test]
    fn rejects_non_finite_and_bad_step() {
        let theta = Tensor::new(&[1], vec![1.0]).unwrap();
        let inf = |t: &mut Tape, _: &[Var]| Ok::<_, TensorError>(t.leaf(Tensor::scalar(f64::INFINITY)));
        assert!(matches!(finite_diff_check(&[theta.clone()], 1e-5, inf), Err(GradCheckError::NonFinite(_))));
        let id = |t: &mut Tape, v: &[Var]| Ok::<_, TensorError>(t.sum(v[0]));
        assert!(matches!(finite_diff_check(&[theta], 0.0, id), Err(GradCheckError::BadStep(_))));
    }
}
