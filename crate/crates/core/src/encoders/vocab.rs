//! Whitespace tokenizer over a frozen template vocabulary.

use std::collections::HashMap;

use crate::error::{Error, Result};

pub const UNK_TOKEN: &str = "<unk>";

/// Tokenized language command.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Instruction {
    pub raw: String,
    pub ids: Vec<usize>,
    /// Set when the input exceeded the maximum length and was cut.
    pub truncated: bool,
}

/// Fixed word list with id 0 reserved for unknown words.
#[derive(Debug, Clone)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Builds a vocabulary from words, deduplicating and prepending the
    /// unknown token.
    pub fn new<I: IntoIterator<Item = S>, S: Into<String>>(words: I) -> Self {
        let mut out = Vocab {
            words: vec![UNK_TOKEN.to_string()],
            index: HashMap::from([(UNK_TOKEN.to_string(), 0)]),
        };
        for w in words {
            let w = w.into().to_lowercase();
            if !out.index.contains_key(&w) {
                out.index.insert(w.clone(), out.words.len());
                out.words.push(w);
            }
        }
        out
    }

    /// Restores a vocabulary from an exact word list (e.g. a dataset
    /// manifest). The first entry must be the unknown token.
    pub fn from_word_list(words: &[String]) -> Result<Self> {
        if words.first().map(String::as_str) != Some(UNK_TOKEN) {
            return Err(Error::format(format!(
                "vocabulary list must start with {UNK_TOKEN:?}"
            )));
        }
        let mut index = HashMap::new();
        for (i, w) in words.iter().enumerate() {
            if index.insert(w.clone(), i).is_some() {
                return Err(Error::format(format!("duplicate vocabulary word {w:?}")));
            }
        }
        Ok(Vocab {
            words: words.to_vec(),
            index,
        })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        false // always contains the unknown token
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn id_of(&self, word: &str) -> Option<usize> {
        self.index.get(&word.to_lowercase()).copied()
    }

    /// Lowercased whitespace tokenization; unknown words map to id 0.
    /// Inputs longer than `max_len` are truncated and flagged.
    pub fn tokenize(&self, text: &str, max_len: usize) -> Result<Instruction> {
        let words: Vec<&str> = text.split_whitespace().collect();
        if words.is_empty() {
            return Err(Error::contract("tokenize: empty instruction"));
        }
        let truncated = words.len() > max_len;
        let ids = words
            .iter()
            .take(max_len)
            .map(|w| self.index.get(&w.to_lowercase()).copied().unwrap_or(0))
            .collect();
        Ok(Instruction {
            raw: text.to_string(),
            ids,
            truncated,
        })
    }

    pub fn detokenize(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&i| self.words.get(i).map(String::as_str).unwrap_or(UNK_TOKEN))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocab {
        Vocab::new(["fold", "the", "left", "edge", "to", "center"])
    }

    #[test]
    fn template_words_all_known() {
        let v = Vocab::new([
            "fold", "the", "left", "edge", "to", "the", "center",
        ]);
        let instr = v.tokenize("fold the left edge to the center", 12).unwrap();
        assert_eq!(instr.ids.len(), 7);
        assert!(instr.ids.iter().all(|&i| i != 0));
        assert!(!instr.truncated);
    }

    #[test]
    fn empty_string_rejected() {
        assert!(matches!(
            vocab().tokenize("", 12),
            Err(Error::Contract(_))
        ));
        assert!(vocab().tokenize("   ", 12).is_err());
    }

    #[test]
    fn unknown_word_maps_to_unk() {
        let instr = vocab().tokenize("fold the zzz", 12).unwrap();
        assert_eq!(instr.ids[2], 0);
        assert!(instr.ids[..2].iter().all(|&i| i != 0));
    }

    #[test]
    fn round_trip_up_to_whitespace() {
        let v = vocab();
        let instr = v.tokenize("Fold  the LEFT edge", 12).unwrap();
        assert_eq!(v.detokenize(&instr.ids), "fold the left edge");
    }

    #[test]
    fn over_length_is_truncated_with_flag() {
        let v = vocab();
        let instr = v.tokenize("fold the left edge", 2).unwrap();
        assert!(instr.truncated);
        assert_eq!(instr.ids.len(), 2);
    }

    #[test]
    fn word_list_round_trip() {
        let v = vocab();
        let v2 = Vocab::from_word_list(v.words()).unwrap();
        assert_eq!(v.words(), v2.words());
        assert!(Vocab::from_word_list(&["fold".to_string()]).is_err());
    }
}
