use super::vocab::{Lang, TokenSequence, Vocabulary};
use crate::error::{Error, Result};

/// Language-aware target: keeps the tokens of `keep` and replaces every
/// maximal run of other-language symbols by one mask of that language.
///
/// Mask symbols count as members of the language they stand for, which makes
/// the operation idempotent.
pub fn lat_mask(y: &TokenSequence, keep: Lang, vocab: &Vocabulary) -> Result<TokenSequence> {
    let mask = vocab.mask(keep.other());
    let mut out = Vec::with_capacity(y.len());
    let mut in_other_run = false;
    for &t in y.tokens() {
        let lang = vocab
            .tag(t)
            .and_then(|tag| tag.lang())
            .ok_or(Error::UnknownToken(t))?;
        if lang == keep {
            out.push(t);
            in_other_run = false;
        } else if !in_other_run {
            out.push(mask);
            in_other_run = true;
        }
    }
    Ok(TokenSequence(out))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    // vocab: 0 blank, 1-2 a, 3-4 b, 5 <A>, 6 <B>
    fn vocab() -> Vocabulary {
        Vocabulary::bilingual(2, 2)
    }

    #[test]
    fn collapses_runs() {
        let v = vocab();
        let y = TokenSequence::new(vec![1, 3, 4, 2]);
        assert_eq!(lat_mask(&y, Lang::A, &v).unwrap().0, vec![1, 6, 2]);
        assert_eq!(lat_mask(&y, Lang::B, &v).unwrap().0, vec![5, 3, 4, 5]);
    }

    #[test]
    fn monolingual_cases() {
        let v = vocab();
        let a = TokenSequence::new(vec![1, 2, 2, 1]);
        assert_eq!(lat_mask(&a, Lang::A, &v).unwrap(), a);
        let b = TokenSequence::new(vec![3, 4]);
        assert_eq!(lat_mask(&b, Lang::A, &v).unwrap().0, vec![6]);
        assert_eq!(lat_mask(&b, Lang::B, &v).unwrap(), b);
        assert!(lat_mask(&TokenSequence::default(), Lang::A, &v).unwrap().is_empty());
    }

    #[test]
    fn rejects_blank() {
        let v = vocab();
        assert!(matches!(
            lat_mask(&TokenSequence::new(vec![1, 0]), Lang::A, &v),
            Err(Error::UnknownToken(0))
        ));
    }

    proptest! {
        #[test]
        fn keeps_language_subsequence_and_is_idempotent(tokens in prop::collection::vec(1usize..5, 0..12)) {
            let v = vocab();
            let y = TokenSequence::new(tokens.clone());
            for keep in [Lang::A, Lang::B] {
                let masked = lat_mask(&y, keep, &v).unwrap();
                let stripped: Vec<usize> = masked.0.iter().copied().filter(|&t| !v.is_mask(t)).collect();
                let expected: Vec<usize> = tokens.iter().copied()
                    .filter(|&t| v.tag(t).unwrap().lang() == Some(keep)).collect();
                prop_assert_eq!(stripped, expected);
                prop_assert_eq!(lat_mask(&masked, keep, &v).unwrap(), masked.clone());
                prop_assert!(masked.min_frames() <= y.min_frames());
            }
        }
    }
}
