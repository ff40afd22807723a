//! Central finite-difference validation of tape gradients.

use super::tape::{NodeId, Tape};
use super::{Matrix, NumericError, SeededRng};

/// Analytic entries smaller than this are compared by absolute error.
const ABS_FLOOR: f64 = 1e-8;

/// Maps the tape output value to a scalar objective and its gradient
/// with respect to that output.
pub type Head<'a> = dyn Fn(&Matrix) -> Result<(f64, Matrix), NumericError> + 'a;

fn scalar_head(m: &Matrix) -> Result<(f64, Matrix), NumericError> {
    let v = m.scalar().ok_or(NumericError::NonScalarOutput(m.shape()))?;
    Ok((v, Matrix::filled(1, 1, 1.0)))
}

/// Worst relative error between `grad()` and central differences over up to
/// `samples` coordinates of `leaf`, for a tape with a scalar output.
pub fn finite_diff_check(tape: &Tape, leaf: NodeId, samples: usize, step: f64, seed: u64) -> Result<f64, NumericError> {
    finite_diff_check_with_head(tape, leaf, samples, step, seed, &scalar_head)
}

/// As [`finite_diff_check`], but the objective is `head(output value)`.
pub fn finite_diff_check_with_head(
    tape: &Tape,
    leaf: NodeId,
    samples: usize,
    step: f64,
    seed: u64,
    head: &Head<'_>,
) -> Result<f64, NumericError> {
    if samples == 0 {
        return Err(NumericError::Precondition("samples must be at least 1"));
    }
    if !(step > 0.0 && step.is_finite()) {
        return Err(NumericError::Precondition("step must be positive"));
    }
    if !tape.is_leaf(leaf) {
        return Err(NumericError::NotALeaf(leaf.0));
    }
    let output = tape.output().ok_or(NumericError::NoOutput)?;
    let (_, seed_grad) = head(tape.value(output))?;
    let analytic = tape.backward(output, &seed_grad)?.get(leaf);

    let base = tape.value(leaf).clone();
    let coords = if samples >= base.len() {
        (0..base.len()).collect()
    } else {
        SeededRng::new(seed).sample_indices(base.len(), samples)
    };

    let objective = |x: &Matrix| -> Result<f64, NumericError> {
        let values = tape.replay(&[(leaf, x)])?;
        Ok(head(&values[output.0])?.0)
    };

    let mut worst: f64 = 0.0;
    for i in coords {
        let mut plus = base.clone();
        plus.data_mut()[i] += step;
        let mut minus = base.clone();
        minus.data_mut()[i] -= step;
        let numeric = (objective(&plus)? - objective(&minus)?) / (2.0 * step);
        let a = analytic.data()[i];
        let err = if a.abs() < ABS_FLOOR {
            (a - numeric).abs()
        } else {
            (a - numeric).abs() / a.abs()
        };
        worst = worst.max(err);
    }
    Ok(worst)
}
