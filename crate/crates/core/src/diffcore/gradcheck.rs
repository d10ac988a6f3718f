//! Central finite-difference oracle for gradient verification.

use crate::diffcore::{DiffError, NodeId, Tape, Tensor};

/// Compare the analytic gradient of a scalar function against central
/// differences, returning the worst relative error
/// `|analytic - numeric| / max(1, |analytic|)` over all coordinates.
pub fn grad_check<F>(f: F, point: &Tensor, eps: f64) -> Result<f64, DiffError>
where
    F: Fn(&mut Tape, NodeId) -> Result<NodeId, DiffError>,
{
    assert!(eps > 0.0, "eps must be positive");

    let mut tape = Tape::new();
    let x = tape.var(point.clone());
    let y = f(&mut tape, x)?;
    if tape.value(y).numel() != 1 {
        return Err(DiffError::RootNotScalar(tape.value(y).shape().to_vec()));
    }
    let grads = tape.backward(y)?;
    let analytic = grads.tensor_or_zeros(&tape, x);

    let eval = |coord: usize, v: f64| -> Result<f64, DiffError> {
        let mut shifted = point.clone();
        shifted.data_mut()[coord] = v;
        let mut t = Tape::new();
        let xs = t.var(shifted);
        let ys = f(&mut t, xs)?;
        Ok(t.scalar_value(ys))
    };

    let mut max_err: f64 = 0.0;
    for i in 0..point.numel() {
        let base = point.data()[i];
        let fp = eval(i, base + eps)?;
        let fm = eval(i, base - eps)?;
        let numeric = (fp - fm) / (2.0 * eps);
        let a = analytic.data()[i];
        let err = (a - numeric).abs() / a.abs().max(1.0);
        max_err = max_err.max(err);
    }
    Ok(max_err)
}
