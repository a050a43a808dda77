//! CTC decoding: collapse, best path and prefix beam search.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use crate::objective::{TokenSequence, Vocabulary};
use crate::tensorcore::Tensor;

const BLANK: usize = 0;

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub tokens: TokenSequence,
    /// Path log-probability for greedy decoding, prefix log-mass for beam search.
    pub score: f64,
}

impl Hypothesis {
    /// Drops mask symbols, which the mixture head should never emit.
    pub fn without_masks(&self, vocab: &Vocabulary) -> TokenSequence {
        self.tokens.without_masks(vocab)
    }
}

/// Merges adjacent repeats, then removes blanks.
pub fn collapse(path: &[usize]) -> TokenSequence {
    let mut out = Vec::new();
    let mut prev = None;
    for &k in path {
        if Some(k) != prev && k != BLANK {
            out.push(k);
        }
        prev = Some(k);
    }
    TokenSequence(out)
}

fn argmax(row: &[f64]) -> usize {
    // first maximum wins
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn greedy_decode(log_probs: &Tensor) -> Hypothesis {
    let mut path = Vec::with_capacity(log_probs.rows());
    let mut score = 0.0;
    for t in 0..log_probs.rows() {
        let row = log_probs.row(t);
        let k = argmax(row);
        score += row[k];
        path.push(k);
    }
    Hypothesis {
        tokens: collapse(&path),
        score,
    }
}

fn lse(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

#[derive(Clone, Copy)]
struct Mass {
    blank: f64,
    non_blank: f64,
}

impl Mass {
    const ZERO: Mass = Mass {
        blank: f64::NEG_INFINITY,
        non_blank: f64::NEG_INFINITY,
    };

    fn total(self) -> f64 {
        lse(self.blank, self.non_blank)
    }
}

/// Higher mass first; equal masses fall back to lexicographic token order.
fn rank(a: &(Vec<usize>, Mass), b: &(Vec<usize>, Mass)) -> Ordering {
    b.1.total()
        .partial_cmp(&a.1.total())
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.0.cmp(&b.0))
}

/// Prefix beam search keeping `width` prefixes, each with separate log-mass
/// for paths ending in blank and in the prefix's last symbol.
pub fn prefix_beam_decode(log_probs: &Tensor, width: usize) -> Hypothesis {
    let width = width.max(1);
    let mut beam: Vec<(Vec<usize>, Mass)> = vec![(
        Vec::new(),
        Mass {
            blank: 0.0,
            non_blank: f64::NEG_INFINITY,
        },
    )];
    for t in 0..log_probs.rows() {
        let row = log_probs.row(t);
        let mut next: BTreeMap<Vec<usize>, Mass> = BTreeMap::new();
        for (prefix, mass) in &beam {
            let stay = next.entry(prefix.clone()).or_insert(Mass::ZERO);
            stay.blank = lse(stay.blank, mass.total() + row[BLANK]);
            let last = prefix.last().copied();
            for (c, &lp) in row.iter().enumerate().skip(1) {
                if lp == f64::NEG_INFINITY {
                    continue;
                }
                if Some(c) == last {
                    // repeat without a blank stays on the same prefix
                    let stay = next.get_mut(prefix).expect("inserted above");
                    stay.non_blank = lse(stay.non_blank, mass.non_blank + lp);
                    let mut ext = prefix.clone();
                    ext.push(c);
                    let e = next.entry(ext).or_insert(Mass::ZERO);
                    e.non_blank = lse(e.non_blank, mass.blank + lp);
                } else {
                    let mut ext = prefix.clone();
                    ext.push(c);
                    let e = next.entry(ext).or_insert(Mass::ZERO);
                    e.non_blank = lse(e.non_blank, mass.total() + lp);
                }
            }
        }
        let mut cands: Vec<(Vec<usize>, Mass)> = next
            .into_iter()
            .filter(|(_, m)| m.total() > f64::NEG_INFINITY)
            .collect();
        cands.sort_by(rank);
        cands.truncate(width);
        if cands.is_empty() {
            break;
        }
        beam = cands;
    }
    beam.sort_by(rank);
    let (tokens, mass) = beam.swap_remove(0);
    Hypothesis {
        tokens: TokenSequence(tokens),
        score: mass.total(),
    }
}
