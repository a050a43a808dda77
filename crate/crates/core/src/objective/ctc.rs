//! CTC negative log-likelihood via the log-space forward-backward recursion,
//! plus an exhaustive path-enumeration oracle for small instances.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensorcore::{log_sum_exp, NodeId, ScalarFunction, Tape, Tensor};

const BLANK: usize = 0;

#[derive(Clone, Debug)]
pub struct CtcOutput {
    /// `-ln P(y | x)`; `+inf` when the target cannot be aligned.
    pub loss: f64,
    /// Gradient of `loss` with respect to the `L x V` log-probabilities.
    pub grad: Tensor,
    /// False when `L` is shorter than the minimum alignment length.
    pub feasible: bool,
}

fn check_inputs(log_probs: &Tensor, target: &[usize]) -> Result<(usize, usize)> {
    if log_probs.rank() != 2 {
        return Err(Error::shape("ctc_loss", format!("log_probs {:?}", log_probs.shape())));
    }
    let (frames, vocab) = (log_probs.shape()[0], log_probs.shape()[1]);
    if let Some(&t) = target.iter().find(|&&t| t == BLANK || t >= vocab) {
        return Err(Error::UnknownToken(t));
    }
    Ok((frames, vocab))
}

/// Frames needed to emit `target`: one per label plus a separating blank for
/// each adjacent repeat.
pub fn min_alignment_frames(target: &[usize]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

#[inline]
fn lse2(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

pub fn ctc_loss(log_probs: &Tensor, target: &[usize]) -> Result<CtcOutput> {
    let (frames, vocab) = check_inputs(log_probs, target)?;
    if frames < min_alignment_frames(target) {
        return Ok(CtcOutput {
            loss: f64::INFINITY,
            grad: Tensor::zeros(log_probs.shape()),
            feasible: false,
        });
    }

    // blank-augmented target: blank, y1, blank, y2, ..., yS, blank
    let mut ext = Vec::with_capacity(2 * target.len() + 1);
    ext.push(BLANK);
    for &t in target {
        ext.push(t);
        ext.push(BLANK);
    }
    let n = ext.len();
    let lp = |t: usize, k: usize| log_probs.data()[t * vocab + k];
    let can_skip = |s: usize| s >= 2 && ext[s] != BLANK && ext[s] != ext[s - 2];

    let neg = f64::NEG_INFINITY;
    let mut alpha = vec![neg; frames * n];
    alpha[0] = lp(0, ext[0]);
    if n > 1 {
        alpha[1] = lp(0, ext[1]);
    }
    for t in 1..frames {
        let (prev, cur) = alpha.split_at_mut(t * n);
        let prev = &prev[(t - 1) * n..];
        for s in 0..n {
            let mut acc = prev[s];
            if s >= 1 {
                acc = lse2(acc, prev[s - 1]);
            }
            if can_skip(s) {
                acc = lse2(acc, prev[s - 2]);
            }
            cur[s] = if acc == neg { neg } else { acc + lp(t, ext[s]) };
        }
    }
    let last = &alpha[(frames - 1) * n..];
    let log_p = if n > 1 { lse2(last[n - 1], last[n - 2]) } else { last[0] };
    if log_p == neg {
        return Ok(CtcOutput {
            loss: f64::INFINITY,
            grad: Tensor::zeros(log_probs.shape()),
            feasible: true,
        });
    }

    // beta excludes the emission at its own frame
    let mut beta = vec![neg; frames * n];
    beta[(frames - 1) * n + n - 1] = 0.0;
    if n > 1 {
        beta[(frames - 1) * n + n - 2] = 0.0;
    }
    for t in (0..frames - 1).rev() {
        for s in 0..n {
            let next = |s2: usize| beta[(t + 1) * n + s2] + lp(t + 1, ext[s2]);
            let mut acc = next(s);
            if s + 1 < n {
                acc = lse2(acc, next(s + 1));
            }
            if s + 2 < n && can_skip(s + 2) {
                acc = lse2(acc, next(s + 2));
            }
            beta[t * n + s] = acc;
        }
    }

    let mut grad = vec![0.0; frames * vocab];
    for t in 0..frames {
        for s in 0..n {
            let occ = alpha[t * n + s] + beta[t * n + s] - log_p;
            if occ > neg {
                grad[t * vocab + ext[s]] -= occ.exp();
            }
        }
    }
    Ok(CtcOutput {
        loss: -log_p,
        grad: Tensor::new(log_probs.shape().to_vec(), grad)?,
        feasible: true,
    })
}

/// Reference value by summing the probability of every length-`L` path whose
/// collapse equals `target`. Exponential; limited to `L <= 8`, `V <= 5`.
pub fn ctc_oracle(log_probs: &Tensor, target: &[usize]) -> Result<f64> {
    let (frames, vocab) = check_inputs(log_probs, target)?;
    if frames > 8 || vocab > 5 {
        return Err(Error::TooLarge(format!("{frames} frames x {vocab} symbols")));
    }
    let total = vocab.pow(frames as u32);
    let mut path = vec![0usize; frames];
    let mut matching: Vec<f64> = Vec::new();
    for code in 0..total {
        let mut c = code;
        for slot in path.iter_mut() {
            *slot = c % vocab;
            c /= vocab;
        }
        let mut collapsed = Vec::new();
        let mut prev = None;
        for &k in &path {
            if Some(k) != prev && k != BLANK {
                collapsed.push(k);
            }
            prev = Some(k);
        }
        if collapsed == target {
            matching.push((0..frames).map(|t| log_probs.at(t, path[t])).sum());
        }
    }
    Ok(-log_sum_exp(&matching))
}

struct CtcFunction {
    target: Vec<usize>,
}

impl ScalarFunction for CtcFunction {
    fn name(&self) -> &'static str {
        "ctc_loss"
    }

    fn eval(&self, inputs: &[&Tensor]) -> (f64, Vec<Tensor>) {
        match ctc_loss(inputs[0], &self.target) {
            Ok(out) => (out.loss, vec![out.grad]),
            Err(_) => (f64::INFINITY, vec![Tensor::zeros(inputs[0].shape())]),
        }
    }
}

/// Records the CTC loss of `target` under the `L x V` log-probability node.
/// Returns `None` for infeasible targets so callers can drop the utterance.
pub fn ctc_loss_node(tape: &mut Tape, log_probs: NodeId, target: &[usize]) -> Result<Option<NodeId>> {
    let (frames, _) = check_inputs(tape.value(log_probs), target)?;
    if frames < min_alignment_frames(target) {
        return Ok(None);
    }
    let f = Arc::new(CtcFunction {
        target: target.to_vec(),
    });
    tape.fused(f, &[log_probs]).map(Some)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tensorcore::finite_diff_check;

    fn uniform(frames: usize, vocab: usize) -> Tensor {
        Tensor::filled(&[frames, vocab], -(vocab as f64).ln())
    }

    pub(crate) fn random_log_probs(rng: &mut ChaCha8Rng, frames: usize, vocab: usize) -> Tensor {
        let mut data: Vec<f64> = (0..frames * vocab).map(|_| rng.random_range(-3.0..3.0)).collect();
        for row in data.chunks_exact_mut(vocab) {
            let lse = log_sum_exp(row);
            row.iter_mut().for_each(|v| *v -= lse);
        }
        Tensor::new(vec![frames, vocab], data).unwrap()
    }

    #[test]
    fn two_uniform_frames_single_label() {
        // valid paths: (a,a), (a,-), (-,a) each with mass 1/9
        let lp = uniform(2, 3);
        let expected = -(3.0f64 * (1.0 / 9.0)).ln();
        let out = ctc_loss(&lp, &[1]).unwrap();
        assert!((out.loss - expected).abs() < 1e-12);
        assert!((out.loss - 1.0986122886681098).abs() < 1e-12);
        assert!((ctc_oracle(&lp, &[1]).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn one_frame_single_label() {
        let lp = uniform(1, 3);
        let out = ctc_loss(&lp, &[1]).unwrap();
        assert!((out.loss - 3.0f64.ln()).abs() < 1e-12);
        assert!((ctc_oracle(&lp, &[1]).unwrap() - 3.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn repeat_needs_separator() {
        let out = ctc_loss(&uniform(2, 3), &[1, 1]).unwrap();
        assert!(!out.feasible);
        assert_eq!(out.loss, f64::INFINITY);
        assert!(out.grad.data().iter().all(|&g| g == 0.0));
        assert!(ctc_loss(&uniform(3, 3), &[1, 1]).unwrap().feasible);
    }

    #[test]
    fn empty_target() {
        let mut certain = vec![f64::NEG_INFINITY; 9];
        for t in 0..3 {
            certain[t * 3] = 0.0;
        }
        let lp = Tensor::new(vec![3, 3], certain).unwrap();
        assert_eq!(ctc_oracle(&lp, &[]).unwrap(), 0.0);
        assert_eq!(ctc_loss(&lp, &[]).unwrap().loss, 0.0);

        let mut no_blank = vec![0.0f64.ln(); 6];
        no_blank[1] = 0.0;
        no_blank[3] = 0.0;
        let lp = Tensor::new(vec![2, 3], no_blank).unwrap();
        assert_eq!(ctc_oracle(&lp, &[]).unwrap(), f64::INFINITY);
        assert_eq!(ctc_loss(&lp, &[]).unwrap().loss, f64::INFINITY);
    }

    #[test]
    fn oracle_rejects_large_instances() {
        assert!(matches!(ctc_oracle(&uniform(9, 3), &[1]), Err(Error::TooLarge(_))));
        assert!(matches!(ctc_oracle(&uniform(3, 6), &[1]), Err(Error::TooLarge(_))));
        assert!(matches!(ctc_loss(&uniform(3, 3), &[0]), Err(Error::UnknownToken(0))));
    }

    #[test]
    fn matches_oracle_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for _ in 0..200 {
            let frames = rng.random_range(1..=6);
            let vocab = rng.random_range(2..=4);
            let s = rng.random_range(0..=3);
            let target: Vec<usize> = (0..s).map(|_| rng.random_range(1..vocab)).collect();
            let lp = random_log_probs(&mut rng, frames, vocab);
            let fast = ctc_loss(&lp, &target).unwrap().loss;
            let slow = ctc_oracle(&lp, &target).unwrap();
            if slow.is_infinite() {
                assert_eq!(fast, slow);
            } else {
                assert!((fast - slow).abs() < 1e-9, "{fast} vs {slow}");
                assert!(fast >= 0.0);
            }
        }
    }

    proptest! {
        #[test]
        fn gradient_matches_finite_differences(seed in 0u64..100_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let frames = rng.random_range(1..=6);
            let vocab = rng.random_range(2..=5);
            let s = rng.random_range(0..=3);
            let target: Vec<usize> = (0..s).map(|_| rng.random_range(1..vocab)).collect();
            prop_assume!(frames >= min_alignment_frames(&target));
            let lp = random_log_probs(&mut rng, frames, vocab);
            let err = finite_diff_check(
                |tape, p| Ok(ctc_loss_node(tape, p[0], &target)?.expect("feasible")),
                &[lp],
                1e-5,
            ).unwrap();
            prop_assert!(err < 1e-6, "err {}", err);
        }
    }
}
