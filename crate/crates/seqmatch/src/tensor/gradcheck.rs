//! Finite-difference gradient checker.
//!
//! The checker is the independent oracle for every differentiable op: it
//! rebuilds the computation from scratch per coordinate, so it never shares
//! the analytic backward path it verifies.

use super::{Tape, Tensor, TensorId};
use crate::error::{Error, Result};

/// Compares the tape's backward pass against central finite differences for
/// a scalar-valued function of the given points.
///
/// Returns the worst relative error over all coordinates using the
/// denominator `max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<F>(f: F, points: &[Tensor], epsilon: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[TensorId]) -> TensorId,
{
    assert!(epsilon > 0.0, "grad_check: epsilon must be positive");

    let eval = |perturb: Option<(usize, usize, f64)>| -> Result<(f64, Option<Vec<Vec<f64>>>)> {
        let mut tape = Tape::new();
        let ids: Vec<TensorId> = points
            .iter()
            .enumerate()
            .map(|(pi, p)| {
                let mut data = p.data.clone();
                if let Some((tpi, ci, delta)) = perturb {
                    if tpi == pi {
                        data[ci] += delta;
                    }
                }
                tape.leaf(data, p.shape.clone(), true)
            })
            .collect();
        let loss = f(&mut tape, &ids);
        let value = tape.scalar(loss);
        if !value.is_finite() {
            return Err(Error::Numeric(format!("grad_check: non-finite loss {value}")));
        }
        if perturb.is_some() {
            return Ok((value, None));
        }
        tape.backward(loss);
        let grads = ids
            .iter()
            .zip(points)
            .map(|(&id, p)| tape.grad(id).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; p.numel()]))
            .collect();
        Ok((value, Some(grads)))
    };

    let (_, analytic) = eval(None)?;
    let analytic = analytic.expect("base evaluation returns gradients");

    let mut worst = 0.0f64;
    #[allow(clippy::needless_range_loop)]
    for (pi, point) in points.iter().enumerate() {
        for ci in 0..point.numel() {
            let (plus, _) = eval(Some((pi, ci, epsilon)))?;
            let (minus, _) = eval(Some((pi, ci, -epsilon)))?;
            let numeric = (plus - minus) / (2.0 * epsilon);
            if !numeric.is_finite() {
                return Err(Error::Numeric(format!(
                    "grad_check: non-finite finite difference at point {pi} coordinate {ci}"
                )));
            }
            let ana = analytic[pi][ci];
            let denom = ana.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((ana - numeric).abs() / denom);
        }
    }
    Ok(worst)
}
