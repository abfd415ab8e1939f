//! Character vocabulary with CTC blank at index 0.

use std::collections::BTreeSet;

use crate::error::{Error, Result};

pub const BLANK_ID: u32 = 0;

/// Ordered symbol list; token ids start at 1, id 0 is the CTC blank and
/// never appears in transcripts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    chars: Vec<char>,
}

impl Vocabulary {
    pub fn new(chars: Vec<char>) -> Result<Self> {
        let unique: BTreeSet<char> = chars.iter().copied().collect();
        if unique.len() != chars.len() {
            return Err(Error::Config("vocabulary symbols must be unique".into()));
        }
        Ok(Vocabulary { chars })
    }

    /// Collect the sorted set of characters appearing in `texts`.
    pub fn from_corpus<'a>(texts: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        let mut set = BTreeSet::new();
        for t in texts {
            set.extend(t.chars());
        }
        if set.is_empty() {
            return Err(Error::Data("cannot build a vocabulary from empty corpus".into()));
        }
        Vocabulary::new(set.into_iter().collect())
    }

    /// Token count including the blank.
    pub fn size(&self) -> usize {
        self.chars.len() + 1
    }

    pub fn id_of(&self, c: char) -> Option<u32> {
        self.chars.iter().position(|&v| v == c).map(|i| i as u32 + 1)
    }

    pub fn char_of(&self, id: u32) -> Option<char> {
        if id == BLANK_ID {
            return None;
        }
        self.chars.get(id as usize - 1).copied()
    }

    pub fn tokenize(&self, text: &str) -> Result<Vec<u32>> {
        text.chars()
            .map(|c| {
                self.id_of(c).ok_or_else(|| {
                    Error::Data(format!("character {c:?} is not in the vocabulary"))
                })
            })
            .collect()
    }

    pub fn detokenize(&self, ids: &[u32]) -> Result<String> {
        ids.iter()
            .map(|&id| {
                self.char_of(id).ok_or_else(|| {
                    Error::Data(format!("token id {id} is blank or out of range"))
                })
            })
            .collect()
    }

    /// Symbols as a single string (id order), for checkpoint metadata.
    pub fn symbols_string(&self) -> String {
        self.chars.iter().collect()
    }

    pub fn from_symbols_string(s: &str) -> Result<Self> {
        Vocabulary::new(s.chars().collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_text_tokenizes_to_empty() {
        let v = Vocabulary::new(vec!['a', 'b']).unwrap();
        assert_eq!(v.tokenize("").unwrap(), Vec::<u32>::new());
    }

    #[test]
    fn ids_follow_symbol_order() {
        let v = Vocabulary::new(vec!['a', 'b']).unwrap();
        assert_eq!(v.tokenize("ab").unwrap(), vec![1, 2]);
        assert_eq!(v.size(), 3);
    }

    #[test]
    fn out_of_vocabulary_names_the_character() {
        let v = Vocabulary::new(vec!['a']).unwrap();
        let err = v.tokenize("ax").unwrap_err();
        assert!(err.to_string().contains('x'), "{err}");
    }

    #[test]
    fn blank_never_detokenizes() {
        let v = Vocabulary::new(vec!['a']).unwrap();
        assert!(v.detokenize(&[BLANK_ID]).is_err());
    }

    #[test]
    fn duplicate_symbols_rejected() {
        assert!(Vocabulary::new(vec!['a', 'a']).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_identity(text in "[abcdef]{0,64}") {
            let v = Vocabulary::new(vec!['a','b','c','d','e','f']).unwrap();
            let ids = v.tokenize(&text).unwrap();
            prop_assert_eq!(v.detokenize(&ids).unwrap(), text);
        }
    }
}
