//! Analytic-vs-numeric gradient verification.

use super::{DiffTensor, Tape, TensorId};
use crate::error::{KbError, Result};

/// Compare tape gradients of a deterministic scalar function against central
/// finite differences. Returns the max over all parameter elements of
/// `|analytic - cd| / max(|analytic|, |cd|, 1e-12)`.
pub fn grad_check<F>(f: F, params: &[DiffTensor], step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[TensorId]) -> Result<TensorId>,
{
    if step <= 0.0 {
        return Err(KbError::InvalidArgument("step must be positive".into()));
    }

    let eval = |values: &[Vec<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let ids: Vec<TensorId> = params
            .iter()
            .zip(values)
            .map(|(p, v)| tape.param(p.shape().to_vec(), v.clone()))
            .collect::<Result<_>>()?;
        let loss = f(&mut tape, &ids)?;
        if !tape.shape(loss).is_empty() {
            return Err(KbError::ShapeMismatch {
                op: "grad_check",
                detail: format!("f must be scalar, got shape {:?}", tape.shape(loss)),
            });
        }
        let out = tape.values(loss)[0];
        if !out.is_finite() {
            return Err(KbError::NonFinite { op: "grad_check" });
        }
        Ok(out)
    };

    // Analytic pass.
    let base_values: Vec<Vec<f64>> = params.iter().map(|p| p.values().to_vec()).collect();
    let mut tape = Tape::new();
    let ids: Vec<TensorId> = params
        .iter()
        .map(|p| tape.param(p.shape().to_vec(), p.values().to_vec()))
        .collect::<Result<_>>()?;
    let loss = f(&mut tape, &ids)?;
    if !tape.values(loss)[0].is_finite() {
        return Err(KbError::NonFinite { op: "grad_check" });
    }
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = ids.iter().map(|&id| tape.grad(id).to_vec()).collect();

    let mut max_err: f64 = 0.0;
    for (pi, values) in base_values.iter().enumerate() {
        for j in 0..values.len() {
            let mut plus = base_values.clone();
            plus[pi][j] += step;
            let mut minus = base_values.clone();
            minus[pi][j] -= step;
            let cd = (eval(&plus)? - eval(&minus)?) / (2.0 * step);
            let a = analytic[pi][j];
            let err = (a - cd).abs() / a.abs().max(cd.abs()).max(1e-12);
            if err > max_err {
                max_err = err;
            }
        }
    }
    Ok(max_err)
}
