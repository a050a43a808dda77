//! Cosine-distance disentanglement between the two expert outputs.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensorcore::{NodeId, ScalarFunction, Tape, Tensor};

/// Frames whose vector norm falls below this are treated as degenerate.
pub const ZERO_NORM: f64 = 1e-12;

/// `1 - cos(a, b)`, or `None` when either vector has (near) zero norm.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> Option<f64> {
    let na2 = a.iter().map(|v| v * v).sum::<f64>();
    let nb2 = b.iter().map(|v| v * v).sum::<f64>();
    if na2.sqrt() < ZERO_NORM || nb2.sqrt() < ZERO_NORM {
        return None;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Some(1.0 - cosine(dot, na2, nb2))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DisentangleValue {
    /// `-(1/N) sum_i (1/|S_i|) sum_j CD_ij`, in `[-2, 0]`.
    pub loss: f64,
    /// Frames skipped because one of the two vectors had zero norm.
    pub zero_frames: usize,
}

/// `sqrt(x * x)` rounds back to `|x|`, so identical vectors give exactly 1.
fn cosine(dot: f64, na2: f64, nb2: f64) -> f64 {
    (dot / (na2 * nb2).sqrt()).clamp(-1.0, 1.0)
}

/// Per-utterance term `-(1/|S|) sum_j CD_j` with its gradient.
fn utterance_term(h_a: &Tensor, h_b: &Tensor, with_grad: bool) -> (f64, usize, Option<[Tensor; 2]>) {
    let frames = h_a.rows();
    let d = h_a.last_dim();
    let mut total = 0.0;
    let mut zero = 0;
    let mut ga = vec![0.0; h_a.numel()];
    let mut gb = vec![0.0; h_b.numel()];
    for j in 0..frames {
        let (a, b) = (h_a.row(j), h_b.row(j));
        let na2 = a.iter().map(|v| v * v).sum::<f64>();
        let nb2 = b.iter().map(|v| v * v).sum::<f64>();
        let (na, nb) = (na2.sqrt(), nb2.sqrt());
        if na < ZERO_NORM || nb < ZERO_NORM {
            zero += 1;
            continue;
        }
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let cos = cosine(dot, na2, nb2);
        total += 1.0 - cos;
        if with_grad {
            // d(-CD/|S|)/da = (1/|S|) dcos/da, dcos/da = b/(|a||b|) - cos a/|a|^2
            let s = 1.0 / frames as f64;
            for k in 0..d {
                ga[j * d + k] = s * (b[k] / (na * nb) - cos * a[k] / (na * na));
                gb[j * d + k] = s * (a[k] / (na * nb) - cos * b[k] / (nb * nb));
            }
        }
    }
    let grads = with_grad.then(|| {
        [
            Tensor::new(h_a.shape().to_vec(), ga).expect("matching shape"),
            Tensor::new(h_b.shape().to_vec(), gb).expect("matching shape"),
        ]
    });
    (-total / frames as f64, zero, grads)
}

fn check_pair(h_a: &Tensor, h_b: &Tensor) -> Result<()> {
    if h_a.rank() != 2 || h_a.shape() != h_b.shape() {
        return Err(Error::shape(
            "disentangle_loss",
            format!("{:?} vs {:?}", h_a.shape(), h_b.shape()),
        ));
    }
    Ok(())
}

/// Batch disentanglement loss over `(H^A, H^B)` pairs, one pair per utterance.
pub fn disentangle_loss(batch: &[(Tensor, Tensor)]) -> Result<DisentangleValue> {
    if batch.is_empty() {
        return Ok(DisentangleValue {
            loss: 0.0,
            zero_frames: 0,
        });
    }
    let mut sum = 0.0;
    let mut zero_frames = 0;
    for (a, b) in batch {
        check_pair(a, b)?;
        let (term, zero, _) = utterance_term(a, b, false);
        sum += term;
        zero_frames += zero;
    }
    Ok(DisentangleValue {
        loss: sum / batch.len() as f64,
        zero_frames,
    })
}

struct CosineTerm;

impl ScalarFunction for CosineTerm {
    fn name(&self) -> &'static str {
        "cosine_disentangle"
    }

    fn eval(&self, inputs: &[&Tensor]) -> (f64, Vec<Tensor>) {
        let (value, _, grads) = utterance_term(inputs[0], inputs[1], true);
        (value, grads.expect("requested").into())
    }
}

/// Records one utterance's term `-(1/|S|) sum_j CD_j`; the caller applies the
/// `1/N` batch weight. Also returns the number of degenerate frames.
pub fn disentangle_node(tape: &mut Tape, h_a: NodeId, h_b: NodeId) -> Result<(NodeId, usize)> {
    check_pair(tape.value(h_a), tape.value(h_b))?;
    let (_, zero, _) = utterance_term(tape.value(h_a), tape.value(h_b), false);
    let node = tape.fused(Arc::new(CosineTerm), &[h_a, h_b])?;
    Ok((node, zero))
}
