use crate::error::{Error, Result};
use crate::objective::{Lang, TokenSequence, Vocabulary};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EditOp {
    Match { r: usize },
    Sub { r: usize },
    /// Hypothesis token inserted before reference position `r`.
    Ins { r: usize },
    Del { r: usize },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ErrorCounts {
    pub subs: usize,
    pub ins: usize,
    pub dels: usize,
    pub ref_len: usize,
}

impl ErrorCounts {
    pub fn errors(&self) -> usize {
        self.subs + self.ins + self.dels
    }

    /// `(S + I + D) / N`. A zero-length reference scores 0 when error-free
    /// and `+inf` otherwise.
    pub fn rate(&self) -> f64 {
        match (self.errors(), self.ref_len) {
            (0, _) => 0.0,
            (_, 0) => f64::INFINITY,
            (e, n) => e as f64 / n as f64,
        }
    }

    fn add(&mut self, o: &ErrorCounts) {
        self.subs += o.subs;
        self.ins += o.ins;
        self.dels += o.dels;
        self.ref_len += o.ref_len;
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Alignment {
    pub distance: usize,
    pub counts: ErrorCounts,
    pub ops: Vec<EditOp>,
}

/// Unit-cost Levenshtein alignment. Among optimal alignments the backtrace
/// prefers match/substitution, then insertion, then deletion.
pub fn edit_distance(reference: &[usize], hyp: &[usize]) -> Alignment {
    let (n, m) = (reference.len(), hyp.len());
    let w = m + 1;
    let mut dp = vec![0usize; (n + 1) * w];
    for i in 0..=n {
        dp[i * w] = i;
    }
    for j in 0..=m {
        dp[j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let diag = dp[(i - 1) * w + j - 1] + usize::from(reference[i - 1] != hyp[j - 1]);
            let ins = dp[i * w + j - 1] + 1;
            let del = dp[(i - 1) * w + j] + 1;
            dp[i * w + j] = diag.min(ins).min(del);
        }
    }
    let mut ops = Vec::with_capacity(n.max(m));
    let mut counts = ErrorCounts {
        ref_len: n,
        ..ErrorCounts::default()
    };
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = dp[i * w + j];
        if i > 0 && j > 0 {
            let same = reference[i - 1] == hyp[j - 1];
            if dp[(i - 1) * w + j - 1] + usize::from(!same) == here {
                i -= 1;
                j -= 1;
                if same {
                    ops.push(EditOp::Match { r: i });
                } else {
                    counts.subs += 1;
                    ops.push(EditOp::Sub { r: i });
                }
                continue;
            }
        }
        if j > 0 && dp[i * w + j - 1] + 1 == here {
            j -= 1;
            counts.ins += 1;
            ops.push(EditOp::Ins { r: i });
            continue;
        }
        i -= 1;
        counts.dels += 1;
        ops.push(EditOp::Del { r: i });
    }
    ops.reverse();
    Alignment {
        distance: dp[n * w + m],
        counts,
        ops,
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScoreReport {
    pub mixed: ErrorCounts,
    pub lang_a: ErrorCounts,
    pub lang_b: ErrorCounts,
    pub utterances: usize,
}

impl ScoreReport {
    pub fn mer(&self) -> f64 {
        self.mixed.rate()
    }

    pub fn lang(&self, lang: Lang) -> &ErrorCounts {
        match lang {
            Lang::A => &self.lang_a,
            Lang::B => &self.lang_b,
        }
    }

    fn lang_mut(&mut self, lang: Lang) -> &mut ErrorCounts {
        match lang {
            Lang::A => &mut self.lang_a,
            Lang::B => &mut self.lang_b,
        }
    }
}

fn lang_of(t: usize, vocab: &Vocabulary) -> Result<Lang> {
    vocab.tag(t).and_then(|g| g.lang()).ok_or(Error::UnknownToken(t))
}

/// Mixed and per-language error counts. Substitutions and deletions belong
/// to the reference token's language. An insertion belongs to the language
/// of the preceding reference token, or the following one at the start; with
/// an empty reference it falls back to the inserted token's own language.
pub fn compute_mer(refs: &[TokenSequence], hyps: &[TokenSequence], vocab: &Vocabulary) -> Result<ScoreReport> {
    if refs.len() != hyps.len() {
        return Err(Error::LengthMismatch(refs.len(), hyps.len()));
    }
    let mut report = ScoreReport {
        utterances: refs.len(),
        ..ScoreReport::default()
    };
    for (r, h) in refs.iter().zip(hyps) {
        let (r, h) = (r.tokens(), h.tokens());
        let ref_langs = r.iter().map(|&t| lang_of(t, vocab)).collect::<Result<Vec<_>>>()?;
        let al = edit_distance(r, h);
        report.mixed.add(&al.counts);
        for &l in &ref_langs {
            report.lang_mut(l).ref_len += 1;
        }
        let mut hyp_pos = 0;
        for op in &al.ops {
            match *op {
                EditOp::Match { .. } => hyp_pos += 1,
                EditOp::Sub { r: i } => {
                    report.lang_mut(ref_langs[i]).subs += 1;
                    hyp_pos += 1;
                }
                EditOp::Del { r: i } => report.lang_mut(ref_langs[i]).dels += 1,
                EditOp::Ins { r: i } => {
                    let lang = if i > 0 {
                        ref_langs[i - 1]
                    } else if let Some(&l) = ref_langs.first() {
                        l
                    } else {
                        lang_of(h[hyp_pos], vocab)?
                    };
                    report.lang_mut(lang).ins += 1;
                    hyp_pos += 1;
                }
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    // vocab: 0 blank, 1-2 a, 3-4 b
    fn vocab() -> Vocabulary {
        Vocabulary::bilingual(2, 2)
    }

    fn seq(v: &[usize]) -> TokenSequence {
        TokenSequence::new(v.to_vec())
    }

    #[test]
    fn anchors() {
        assert_eq!(edit_distance(&[1, 2, 3], &[1, 2, 3]).distance, 0);
        let empty = edit_distance(&[1, 2, 3], &[]);
        assert_eq!((empty.distance, empty.counts.dels), (3, 3));
        let one = edit_distance(&[1, 2, 3], &[1, 3]);
        assert_eq!(one.distance, 1);
        assert_eq!(one.ops[1], EditOp::Del { r: 1 });
    }

    #[test]
    fn mer_anchors() {
        let v = vocab();
        let refs = vec![seq(&[1, 2, 3])];
        let perfect = compute_mer(&refs, &refs, &v).unwrap();
        assert_eq!((perfect.mer(), perfect.lang_a.rate(), perfect.lang_b.rate()), (0.0, 0.0, 0.0));
        let empty = compute_mer(&refs, &[seq(&[])], &v).unwrap();
        assert_eq!(empty.mer(), 1.0);
        let del = compute_mer(&refs, &[seq(&[1, 3])], &v).unwrap();
        assert_eq!(del.mer(), 1.0 / 3.0);
        assert_eq!(del.lang_a.rate(), 0.5);
        assert_eq!(del.lang_b.rate(), 0.0);
    }

    #[test]
    fn insertion_attribution() {
        let v = vocab();
        // leading insertion goes to the first reference token (B)
        let r = compute_mer(&[seq(&[3, 1])], &[seq(&[2, 3, 1])], &v).unwrap();
        assert_eq!((r.lang_a.ins, r.lang_b.ins), (0, 1));
        // trailing insertion goes to the preceding reference token (A)
        let r = compute_mer(&[seq(&[3, 1])], &[seq(&[3, 1, 4])], &v).unwrap();
        assert_eq!((r.lang_a.ins, r.lang_b.ins), (1, 0));
        // empty reference: the inserted token's own language
        let r = compute_mer(&[seq(&[])], &[seq(&[4])], &v).unwrap();
        assert_eq!((r.lang_b.ins, r.mixed.rate()), (1, f64::INFINITY));
    }

    #[test]
    fn mismatched_lists_are_rejected() {
        assert!(matches!(
            compute_mer(&[seq(&[1])], &[], &vocab()),
            Err(Error::LengthMismatch(1, 0))
        ));
    }

    fn tokens() -> impl Strategy<Value = Vec<usize>> {
        prop::collection::vec(1usize..5, 0..8)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(500))]

        #[test]
        fn metric_properties(a in tokens(), b in tokens(), c in tokens()) {
            let d = |x: &[usize], y: &[usize]| edit_distance(x, y).distance;
            prop_assert_eq!(d(&a, &b), d(&b, &a));
            prop_assert_eq!(d(&a, &b) == 0, a == b);
            prop_assert!(d(&a, &c) <= d(&a, &b) + d(&b, &c));
            let al = edit_distance(&a, &b);
            prop_assert_eq!(al.counts.errors(), al.distance);
        }

        #[test]
        fn language_counts_partition_mixed(pairs in prop::collection::vec((tokens(), tokens()), 1..5)) {
            let v = vocab();
            let refs: Vec<_> = pairs.iter().map(|(r, _)| seq(r)).collect();
            let hyps: Vec<_> = pairs.iter().map(|(_, h)| seq(h)).collect();
            let rep = compute_mer(&refs, &hyps, &v).unwrap();
            prop_assert_eq!(rep.lang_a.subs + rep.lang_b.subs, rep.mixed.subs);
            prop_assert_eq!(rep.lang_a.ins + rep.lang_b.ins, rep.mixed.ins);
            prop_assert_eq!(rep.lang_a.dels + rep.lang_b.dels, rep.mixed.dels);
            prop_assert_eq!(rep.lang_a.ref_len + rep.lang_b.ref_len, rep.mixed.ref_len);
        }
    }
}
