//! Token vocabulary and token sequences.

use crate::error::{LabError, Result};
use std::collections::HashSet;
use std::sync::Arc;

pub type TokenId = u32;

/// An ordered token alphabet with four distinguished ids: begin-of-sequence,
/// end-of-sequence, the answer marker, and padding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    bos_id: TokenId,
    eos_id: TokenId,
    ans_id: TokenId,
    pad_id: TokenId,
}

impl Vocab {
    pub fn new(
        tokens: Vec<String>,
        bos_id: TokenId,
        eos_id: TokenId,
        ans_id: TokenId,
        pad_id: TokenId,
    ) -> Result<Self> {
        let v = tokens.len();
        if v < 4 {
            return Err(LabError::InvalidVocab(format!("need at least 4 tokens, got {}", v)));
        }
        let specials = [bos_id, eos_id, ans_id, pad_id];
        let distinct: HashSet<_> = specials.iter().collect();
        if distinct.len() != 4 {
            return Err(LabError::InvalidVocab("special token ids must be distinct".into()));
        }
        for &id in &specials {
            if id as usize >= v {
                return Err(LabError::VocabError { id, vocab_size: v });
            }
        }
        let unique: HashSet<_> = tokens.iter().collect();
        if unique.len() != v {
            return Err(LabError::InvalidVocab("token symbols must be unique".into()));
        }
        Ok(Vocab { tokens, bos_id, eos_id, ans_id, pad_id })
    }

    /// The alphabet used by the synthetic task suite: the four specials,
    /// digits, arithmetic operators, the goal separator `=`, and the
    /// copy/reverse/parity task markers.
    pub fn lab_default() -> Arc<Vocab> {
        let mut tokens: Vec<String> =
            ["<bos>", "<eos>", "<ans>", "<pad>"].iter().map(|s| s.to_string()).collect();
        for d in 0..10 {
            tokens.push(d.to_string());
        }
        for s in ["+", "-", "*", "=", "C", "R", "P"] {
            tokens.push(s.to_string());
        }
        Arc::new(Vocab::new(tokens, 0, 1, 2, 3).expect("lab vocab is valid"))
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn bos(&self) -> TokenId {
        self.bos_id
    }

    pub fn eos(&self) -> TokenId {
        self.eos_id
    }

    pub fn ans(&self) -> TokenId {
        self.ans_id
    }

    pub fn pad(&self) -> TokenId {
        self.pad_id
    }

    pub fn symbol(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(|s| s.as_str())
    }

    pub fn lookup(&self, symbol: &str) -> Option<TokenId> {
        self.tokens.iter().position(|t| t == symbol).map(|i| i as TokenId)
    }

    /// Id of a decimal digit token, panicking if the vocabulary lacks it.
    pub fn digit(&self, d: u8) -> TokenId {
        self.lookup(&d.to_string()).expect("digit token present")
    }

    /// Decode a digit token back to its value, if it is one.
    pub fn as_digit(&self, id: TokenId) -> Option<u8> {
        let s = self.symbol(id)?;
        if s.len() == 1 {
            s.chars().next().unwrap().to_digit(10).map(|d| d as u8)
        } else {
            None
        }
    }

    pub fn check_id(&self, id: TokenId) -> Result<()> {
        if (id as usize) < self.size() {
            Ok(())
        } else {
            Err(LabError::VocabError { id, vocab_size: self.size() })
        }
    }
}

/// A sequence of token ids. A sequence is *terminal* when its last token is
/// the vocabulary's EOS.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct TokenSeq {
    pub ids: Vec<TokenId>,
}

impl TokenSeq {
    pub fn new(ids: Vec<TokenId>) -> Self {
        TokenSeq { ids }
    }

    pub fn empty() -> Self {
        TokenSeq { ids: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn is_terminal(&self, vocab: &Vocab) -> bool {
        self.ids.last() == Some(&vocab.eos())
    }

    /// Check well-formedness against a vocabulary: ids in range and no pad
    /// token before EOS.
    pub fn validate(&self, vocab: &Vocab) -> Result<()> {
        let mut seen_eos = false;
        for &id in &self.ids {
            vocab.check_id(id)?;
            if id == vocab.pad() && !seen_eos {
                return Err(LabError::MalformedSequence("pad token before eos".into()));
            }
            if id == vocab.eos() {
                seen_eos = true;
            }
        }
        Ok(())
    }

    /// Render as space-separated symbols, for debugging and text dumps.
    pub fn render(&self, vocab: &Vocab) -> String {
        self.ids
            .iter()
            .map(|&id| vocab.symbol(id).unwrap_or("?"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Space-separated decimal ids, the on-disk representation.
    pub fn to_id_string(&self) -> String {
        self.ids.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(" ")
    }

    pub fn from_id_string(s: &str) -> Result<Self> {
        if s.trim().is_empty() {
            return Ok(TokenSeq::empty());
        }
        let ids = s
            .split_whitespace()
            .map(|t| t.parse::<TokenId>().map_err(|e| LabError::BadFormat(format!("bad token id {t:?}: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        Ok(TokenSeq::new(ids))
    }
}

impl From<Vec<TokenId>> for TokenSeq {
    fn from(ids: Vec<TokenId>) -> Self {
        TokenSeq::new(ids)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_small_or_degenerate_vocab() {
        assert!(Vocab::new(vec!["a".into(), "b".into(), "c".into()], 0, 1, 2, 2).is_err());
        let four = || vec!["a".into(), "b".into(), "c".into(), "d".into()];
        assert!(Vocab::new(four(), 0, 1, 2, 2).is_err(), "specials must be distinct");
        assert!(Vocab::new(four(), 0, 1, 2, 9).is_err(), "specials must be in range");
        let dup = vec!["a".into(), "a".into(), "c".into(), "d".into()];
        assert!(Vocab::new(dup, 0, 1, 2, 3).is_err(), "symbols must be unique");
        assert!(Vocab::new(four(), 0, 1, 2, 3).is_ok());
    }

    #[test]
    fn lab_vocab_layout() {
        let v = Vocab::lab_default();
        assert_eq!(v.size(), 21);
        assert_eq!(v.digit(0), 4);
        assert_eq!(v.digit(9), 13);
        assert_eq!(v.lookup("*"), Some(16));
        assert_eq!(v.as_digit(v.digit(7)), Some(7));
        assert_eq!(v.as_digit(v.lookup("+").unwrap()), None);
    }

    #[test]
    fn terminal_and_validation() {
        let v = Vocab::lab_default();
        let s = TokenSeq::new(vec![v.digit(1), v.eos()]);
        assert!(s.is_terminal(&v));
        s.validate(&v).unwrap();

        let bad = TokenSeq::new(vec![v.pad(), v.eos()]);
        assert!(bad.validate(&v).is_err());

        let out_of_range = TokenSeq::new(vec![99]);
        assert!(out_of_range.validate(&v).is_err());
    }

    #[test]
    fn id_string_round_trip() {
        let s = TokenSeq::new(vec![4, 16, 5, 1]);
        assert_eq!(TokenSeq::from_id_string(&s.to_id_string()).unwrap(), s);
        assert_eq!(TokenSeq::from_id_string("").unwrap(), TokenSeq::empty());
    }
}
