//! Central-difference verification of recorded gradients.

use crate::error::{Error, Result};

use super::{Scalar, Tape, Tensor, Var};

/// A gradient check that could not be evaluated (as opposed to one that
/// evaluated to a large error).
#[derive(Debug)]
pub struct GradCheckFailure {
    /// Flat index of the coordinate being perturbed when evaluation failed,
    /// if the failure happened during a perturbed evaluation.
    pub coordinate: Option<usize>,
    pub message: String,
}

impl std::fmt::Display for GradCheckFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.coordinate {
            Some(i) => write!(f, "grad check failed at coordinate {}: {}", i, self.message),
            None => write!(f, "grad check failed: {}", self.message),
        }
    }
}

impl std::error::Error for GradCheckFailure {}

fn build_err(e: Error) -> GradCheckFailure {
    GradCheckFailure {
        coordinate: None,
        message: e.to_string(),
    }
}

fn eval_scalar<T: Scalar, F>(f: &mut F, points: &[Tensor<T>]) -> Result<T>
where
    F: FnMut(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = points
        .iter()
        .map(|p| tape.constant(p.clone()))
        .collect();
    let out = f(&mut tape, &vars)?;
    tape.value(out).item()
}

/// Verify the recorded gradients of a scalar-valued function of several
/// tensors against central finite differences. Returns the maximum relative
/// error over every coordinate of every input, where relative error uses a
/// `max(|a|, |b|, 1e-12)` denominator.
pub fn grad_check_against<T: Scalar, F>(
    mut f: F,
    points: &[Tensor<T>],
    step: T,
) -> std::result::Result<T, GradCheckFailure>
where
    F: FnMut(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    if step <= T::zero() {
        return Err(GradCheckFailure {
            coordinate: None,
            message: "step must be positive".into(),
        });
    }

    // Analytic gradients from one recorded pass.
    let mut tape = Tape::new();
    let vars: Vec<Var> = points.iter().map(|p| tape.leaf(p.clone(), true)).collect();
    let out = f(&mut tape, &vars).map_err(build_err)?;
    let base = tape.value(out).item().map_err(build_err)?;
    if !base.is_finite() {
        return Err(GradCheckFailure {
            coordinate: None,
            message: format!("function value is non-finite at the base point: {base}"),
        });
    }
    tape.backward(out).map_err(build_err)?;
    let analytic: Vec<Tensor<T>> = vars
        .iter()
        .zip(points)
        .map(|(&v, p)| {
            tape.grad(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(p.shape().to_vec()))
        })
        .collect();
    drop(tape);

    let floor = T::from_f64(1e-12);
    let two = T::from_f64(2.0);
    let mut worst = T::zero();
    let mut perturbed = points.to_vec();
    for (j, point) in points.iter().enumerate() {
        for i in 0..point.numel() {
            let orig = point.data()[i];
            perturbed[j].data_mut()[i] = orig + step;
            let plus = eval_scalar(&mut f, &perturbed).map_err(|e| GradCheckFailure {
                coordinate: Some(i),
                message: e.to_string(),
            })?;
            perturbed[j].data_mut()[i] = orig - step;
            let minus = eval_scalar(&mut f, &perturbed).map_err(|e| GradCheckFailure {
                coordinate: Some(i),
                message: e.to_string(),
            })?;
            perturbed[j].data_mut()[i] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(GradCheckFailure {
                    coordinate: Some(i),
                    message: "function value is non-finite at a perturbed point".into(),
                });
            }
            let fd = (plus - minus) / (two * step);
            let a = analytic[j].data()[i];
            let denom = a.abs().max(fd.abs()).max(floor);
            let rel = (a - fd).abs() / denom;
            if rel > worst {
                worst = rel;
            }
        }
    }
    Ok(worst)
}

/// Single-input form: check a scalar-valued function at `point`.
pub fn grad_check<T: Scalar, F>(
    mut f: F,
    point: &Tensor<T>,
    step: T,
) -> std::result::Result<T, GradCheckFailure>
where
    F: FnMut(&mut Tape<T>, Var) -> Result<Var>,
{
    grad_check_against(|tape, vars| f(tape, vars[0]), &[point.clone()], step)
}
