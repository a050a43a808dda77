use std::fmt;

use crate::error::{Error, Result};

/// One of the two languages of a code-switched corpus.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Lang {
    A,
    B,
}

impl Lang {
    pub fn other(self) -> Lang {
        match self {
            Lang::A => Lang::B,
            Lang::B => Lang::A,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Lang::A => "A",
            Lang::B => "B",
        }
    }

    pub fn parse(s: &str) -> Option<Lang> {
        match s {
            "A" => Some(Lang::A),
            "B" => Some(Lang::B),
            _ => None,
        }
    }
}

impl fmt::Display for Lang {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Tag {
    Blank,
    Token(Lang),
    Mask(Lang),
}

impl Tag {
    /// Language a symbol belongs to; masks belong to the language they stand for.
    pub fn lang(self) -> Option<Lang> {
        match self {
            Tag::Blank => None,
            Tag::Token(l) | Tag::Mask(l) => Some(l),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Tag::Blank => "blank",
            Tag::Token(Lang::A) => "A",
            Tag::Token(Lang::B) => "B",
            Tag::Mask(Lang::A) => "mask_A",
            Tag::Mask(Lang::B) => "mask_B",
        }
    }

    pub fn parse(s: &str) -> Option<Tag> {
        Some(match s {
            "blank" => Tag::Blank,
            "A" => Tag::Token(Lang::A),
            "B" => Tag::Token(Lang::B),
            "mask_A" => Tag::Mask(Lang::A),
            "mask_B" => Tag::Mask(Lang::B),
            _ => return None,
        })
    }
}

/// Ordered symbol inventory. Index 0 is the CTC blank; each language has
/// exactly one mask symbol.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    symbols: Vec<String>,
    tags: Vec<Tag>,
    mask_a: usize,
    mask_b: usize,
}

impl Vocabulary {
    pub fn new(symbols: Vec<String>, tags: Vec<Tag>) -> Result<Self> {
        if symbols.len() != tags.len() {
            return Err(Error::Config("symbol and tag lists differ in length".into()));
        }
        if tags.first() != Some(&Tag::Blank) {
            return Err(Error::Config("index 0 must be the blank".into()));
        }
        if tags.iter().filter(|t| **t == Tag::Blank).count() != 1 {
            return Err(Error::Config("vocabulary needs exactly one blank".into()));
        }
        let find_mask = |lang| {
            let hits: Vec<usize> = tags
                .iter()
                .enumerate()
                .filter(|(_, t)| **t == Tag::Mask(lang))
                .map(|(i, _)| i)
                .collect();
            match hits.as_slice() {
                [i] => Ok(*i),
                _ => Err(Error::Config(format!("need exactly one mask for language {lang}"))),
            }
        };
        let mask_a = find_mask(Lang::A)?;
        let mask_b = find_mask(Lang::B)?;
        let mut seen = std::collections::HashSet::new();
        if !symbols.iter().all(|s| seen.insert(s.as_str())) {
            return Err(Error::Config("duplicate symbol".into()));
        }
        Ok(Self {
            symbols,
            tags,
            mask_a,
            mask_b,
        })
    }

    /// `[blank, a0.., b0.., <A>, <B>]`.
    pub fn bilingual(n_a: usize, n_b: usize) -> Self {
        let mut symbols = vec!["<blank>".to_string()];
        let mut tags = vec![Tag::Blank];
        for i in 0..n_a {
            symbols.push(format!("a{i}"));
            tags.push(Tag::Token(Lang::A));
        }
        for i in 0..n_b {
            symbols.push(format!("b{i}"));
            tags.push(Tag::Token(Lang::B));
        }
        symbols.extend(["<A>".to_string(), "<B>".to_string()]);
        tags.extend([Tag::Mask(Lang::A), Tag::Mask(Lang::B)]);
        Self::new(symbols, tags).expect("bilingual layout is valid")
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub const fn blank(&self) -> usize {
        0
    }

    pub fn tag(&self, index: usize) -> Option<Tag> {
        self.tags.get(index).copied()
    }

    pub fn symbol(&self, index: usize) -> Option<&str> {
        self.symbols.get(index).map(String::as_str)
    }

    pub fn mask(&self, lang: Lang) -> usize {
        match lang {
            Lang::A => self.mask_a,
            Lang::B => self.mask_b,
        }
    }

    pub fn is_mask(&self, index: usize) -> bool {
        matches!(self.tag(index), Some(Tag::Mask(_)))
    }

    /// Indices of the ordinary tokens of `lang`.
    pub fn tokens_of(&self, lang: Lang) -> Vec<usize> {
        self.tags
            .iter()
            .enumerate()
            .filter(|(_, t)| **t == Tag::Token(lang))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    pub fn tags(&self) -> &[Tag] {
        &self.tags
    }
}

/// Label sequence without blanks.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct TokenSequence(pub Vec<usize>);

impl TokenSequence {
    pub fn new(tokens: Vec<usize>) -> Self {
        Self(tokens)
    }

    pub fn tokens(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn validate(&self, vocab: &Vocabulary) -> Result<()> {
        match self.0.iter().find(|&&t| t == vocab.blank() || t >= vocab.len()) {
            Some(&t) => Err(Error::UnknownToken(t)),
            None => Ok(()),
        }
    }

    /// Drops mask symbols (used on hypotheses before scoring).
    pub fn without_masks(&self, vocab: &Vocabulary) -> TokenSequence {
        TokenSequence(self.0.iter().copied().filter(|&t| !vocab.is_mask(t)).collect())
    }

    /// Minimum number of frames a CTC alignment of this sequence needs.
    pub fn min_frames(&self) -> usize {
        let repeats = self.0.windows(2).filter(|w| w[0] == w[1]).count();
        self.0.len() + repeats
    }
}

impl From<Vec<usize>> for TokenSequence {
    fn from(v: Vec<usize>) -> Self {
        Self(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bilingual_layout() {
        let v = Vocabulary::bilingual(1, 1);
        assert_eq!(v.len(), 5);
        assert_eq!(v.tag(0), Some(Tag::Blank));
        assert_eq!(v.tag(1), Some(Tag::Token(Lang::A)));
        assert_eq!(v.tag(2), Some(Tag::Token(Lang::B)));
        assert_eq!(v.mask(Lang::A), 3);
        assert_eq!(v.mask(Lang::B), 4);

        let v = Vocabulary::bilingual(3, 4);
        assert_eq!(v.len(), 3 + 4 + 3);
        let mut counts = std::collections::HashMap::new();
        for i in 0..v.len() {
            *counts.entry(v.tag(i).unwrap()).or_insert(0) += 1;
        }
        assert_eq!(counts[&Tag::Blank], 1);
        assert_eq!(counts[&Tag::Token(Lang::A)], 3);
        assert_eq!(counts[&Tag::Token(Lang::B)], 4);
        assert_eq!(counts[&Tag::Mask(Lang::A)], 1);
        assert_eq!(counts[&Tag::Mask(Lang::B)], 1);
    }

    #[test]
    fn rejects_bad_layouts() {
        let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
        assert!(Vocabulary::new(s(&["a", "<blank>"]), vec![Tag::Token(Lang::A), Tag::Blank]).is_err());
        assert!(Vocabulary::new(
            s(&["<blank>", "<A>"]),
            vec![Tag::Blank, Tag::Mask(Lang::A)]
        )
        .is_err());
    }

    #[test]
    fn token_sequence_validation() {
        let v = Vocabulary::bilingual(2, 2);
        assert!(TokenSequence::new(vec![1, 3]).validate(&v).is_ok());
        assert!(matches!(TokenSequence::new(vec![0]).validate(&v), Err(Error::UnknownToken(0))));
        assert!(TokenSequence::new(vec![9]).validate(&v).is_err());
        assert_eq!(TokenSequence::new(vec![1, 1, 2]).min_frames(), 4);
    }
}
