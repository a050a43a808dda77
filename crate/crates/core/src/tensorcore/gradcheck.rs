use super::tape::{NodeId, Tape};
use super::tensor::Tensor;
use crate::error::Result;

/// Maximum over all parameter entries of
/// `|analytic - central_difference| / max(1, |analytic|)`.
///
/// `f` builds the scalar loss on a fresh tape from leaves holding `params`.
/// Non-finite differences count as an infinite error.
pub fn finite_diff_check<F>(f: F, params: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    Ok(finite_diff_errors(f, params, h)?
        .into_iter()
        .fold(0.0, f64::max))
}

/// Per-parameter version of [`finite_diff_check`].
pub fn finite_diff_errors<F>(f: F, params: &[Tensor], h: f64) -> Result<Vec<f64>>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    assert!(h > 0.0, "step size must be positive");
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let leaves: Vec<NodeId> = values.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&mut tape, &leaves)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let leaves: Vec<NodeId> = params.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&mut tape, &leaves)?;
    let grads = tape.backward(loss)?;

    let mut work: Vec<Tensor> = params.to_vec();
    let mut errors = Vec::with_capacity(params.len());
    for (pi, leaf) in leaves.iter().enumerate() {
        let analytic = grads.get(*leaf);
        let mut worst: f64 = 0.0;
        for i in 0..params[pi].numel() {
            let orig = params[pi].data()[i];
            work[pi].data_mut()[i] = orig + h;
            let plus = eval(&work)?;
            work[pi].data_mut()[i] = orig - h;
            let minus = eval(&work)?;
            work[pi].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.data()[i];
            let err = if numeric.is_finite() && a.is_finite() {
                (a - numeric).abs() / a.abs().max(1.0)
            } else {
                f64::INFINITY
            };
            worst = worst.max(err);
        }
        errors.push(worst);
    }
    Ok(errors)
}
