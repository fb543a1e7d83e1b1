//! Vocabulary, tokenization, corpus loading and the seeded PRNG shared by
//! every other module.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub type TokenId = u32;

/// An ordered token sequence over a fixed vocabulary.
pub type TokenSeq = Vec<TokenId>;

/// The single PRNG type used across the crate.
pub type Rng = ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum VocabMode {
    /// One token per byte; always 256 ids.
    Byte,
    /// One token per distinct whitespace-delimited word plus a reserved
    /// unknown id.
    Word,
}

impl FromStr for VocabMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "byte" => Ok(VocabMode::Byte),
            "word" => Ok(VocabMode::Word),
            other => Err(Error::invalid(format!(
                "unknown vocab mode {other:?} (expected byte or word)"
            ))),
        }
    }
}

impl fmt::Display for VocabMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            VocabMode::Byte => "byte",
            VocabMode::Word => "word",
        })
    }
}

/// Token table. Ids are contiguous in `[0, size)`.
///
/// In word mode, words get ids in order of first appearance in the corpus and
/// the unknown id is `size - 1`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    mode: VocabMode,
    words: Vec<String>,
    index: HashMap<String, TokenId>,
}

pub const BYTE_VOCAB_SIZE: usize = 256;
pub const UNKNOWN_WORD: &str = "<unk>";

impl Vocab {
    pub fn build(corpus_text: &str, mode: VocabMode) -> Result<Self> {
        if corpus_text.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        match mode {
            VocabMode::Byte => Ok(Vocab {
                mode,
                words: Vec::new(),
                index: HashMap::new(),
            }),
            VocabMode::Word => {
                let mut words = Vec::new();
                let mut index = HashMap::new();
                for w in corpus_text.split_whitespace() {
                    if !index.contains_key(w) {
                        index.insert(w.to_owned(), words.len() as TokenId);
                        words.push(w.to_owned());
                    }
                }
                if words.is_empty() {
                    return Err(Error::EmptyCorpus);
                }
                Ok(Vocab { mode, words, index })
            }
        }
    }

    pub fn mode(&self) -> VocabMode {
        self.mode
    }

    pub fn size(&self) -> usize {
        match self.mode {
            VocabMode::Byte => BYTE_VOCAB_SIZE,
            VocabMode::Word => self.words.len() + 1,
        }
    }

    /// The reserved unknown id (word mode only).
    pub fn unknown_id(&self) -> Option<TokenId> {
        match self.mode {
            VocabMode::Byte => None,
            VocabMode::Word => Some(self.words.len() as TokenId),
        }
    }

    /// Id of a single word (word mode) or of a single-byte string (byte mode).
    pub fn id_of(&self, word: &str) -> Option<TokenId> {
        match self.mode {
            VocabMode::Byte => match word.as_bytes() {
                [b] => Some(*b as TokenId),
                _ => None,
            },
            VocabMode::Word => self.index.get(word).copied(),
        }
    }

    pub fn tokenize(&self, text: &str) -> TokenSeq {
        match self.mode {
            VocabMode::Byte => tokenize_bytes(text.as_bytes()),
            VocabMode::Word => {
                let unk = self.words.len() as TokenId;
                text.split_whitespace()
                    .map(|w| self.index.get(w).copied().unwrap_or(unk))
                    .collect()
            }
        }
    }

    /// Inverse of [`Vocab::tokenize`]. Word mode joins with single spaces, so
    /// it is exact only for single-space separated in-vocabulary text.
    pub fn detokenize(&self, tokens: &[TokenId]) -> String {
        match self.mode {
            VocabMode::Byte => String::from_utf8_lossy(&detokenize_bytes(tokens)).into_owned(),
            VocabMode::Word => tokens
                .iter()
                .map(|&t| {
                    self.words
                        .get(t as usize)
                        .map(String::as_str)
                        .unwrap_or(UNKNOWN_WORD)
                })
                .collect::<Vec<_>>()
                .join(" "),
        }
    }

    pub fn validate(&self, tokens: &[TokenId]) -> Result<()> {
        let size = self.size();
        match tokens.iter().find(|&&t| t as usize >= size) {
            Some(&id) => Err(Error::TokenOutOfRange { id, size }),
            None => Ok(()),
        }
    }
}

pub fn tokenize_bytes(bytes: &[u8]) -> TokenSeq {
    bytes.iter().map(|&b| b as TokenId).collect()
}

/// Ids above 255 are not bytes and are dropped.
pub fn detokenize_bytes(tokens: &[TokenId]) -> Vec<u8> {
    tokens
        .iter()
        .filter_map(|&t| u8::try_from(t).ok())
        .collect()
}

/// How a corpus file is split into documents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DocSplit {
    #[default]
    File,
    Line,
}

pub fn load_documents(path: impl AsRef<Path>, split: DocSplit) -> Result<Vec<String>> {
    let text = fs::read_to_string(path.as_ref())?;
    Ok(match split {
        DocSplit::File => vec![text],
        DocSplit::Line => text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(str::to_owned)
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn word_vocab_counts_distinct_words_plus_unknown() {
        let v = Vocab::build("ab ab cd", VocabMode::Word).unwrap();
        assert_eq!(v.size(), 3);
        assert_eq!(v.unknown_id(), Some(2));
        assert_eq!(v.id_of("ab"), Some(0));
        assert_eq!(v.id_of("cd"), Some(1));
    }

    #[test]
    fn byte_vocab_is_fixed() {
        for text in ["a", "hello world", "\u{1F600}"] {
            assert_eq!(Vocab::build(text, VocabMode::Byte).unwrap().size(), 256);
        }
    }

    #[test]
    fn empty_corpus_is_rejected() {
        let err = Vocab::build("", VocabMode::Word).unwrap_err();
        assert_eq!(err.to_string(), "empty corpus");
        assert!(matches!(
            Vocab::build("   \n", VocabMode::Word),
            Err(Error::EmptyCorpus)
        ));
    }

    #[test]
    fn tokenize_examples() {
        let b = Vocab::build("x", VocabMode::Byte).unwrap();
        assert_eq!(b.tokenize("ab"), vec![97, 98]);

        let w = Vocab::build("ab ab cd", VocabMode::Word).unwrap();
        assert_eq!(w.tokenize("ab cd"), vec![0, 1]);

        let w2 = Vocab::build("ab cd", VocabMode::Word).unwrap();
        assert_eq!(w2.tokenize("xy"), vec![w2.unknown_id().unwrap()]);
    }

    #[test]
    fn word_round_trip_on_normalized_text() {
        let text = "the cat sat on the mat";
        let v = Vocab::build(text, VocabMode::Word).unwrap();
        assert_eq!(v.detokenize(&v.tokenize(text)), text);
    }

    #[test]
    fn validate_flags_out_of_range() {
        let v = Vocab::build("a b", VocabMode::Word).unwrap();
        assert!(v.validate(&[0, 1, 2]).is_ok());
        assert!(matches!(
            v.validate(&[3]),
            Err(Error::TokenOutOfRange { id: 3, size: 3 })
        ));
    }

    #[test]
    fn load_documents_by_line() {
        let dir = std::env::temp_dir().join(format!("ngdraft-vocab-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("c.txt");
        fs::write(&path, "one two\n\nthree\n").unwrap();
        assert_eq!(
            load_documents(&path, DocSplit::Line).unwrap(),
            vec!["one two".to_owned(), "three".to_owned()]
        );
        assert_eq!(load_documents(&path, DocSplit::File).unwrap().len(), 1);
        fs::remove_dir_all(&dir).ok();
    }

    proptest! {
        #[test]
        fn byte_round_trip(bytes in proptest::collection::vec(any::<u8>(), 0..256)) {
            prop_assert_eq!(detokenize_bytes(&tokenize_bytes(&bytes)), bytes);
        }

        #[test]
        fn byte_round_trip_on_strings(s in ".*") {
            let v = Vocab::build("seed", VocabMode::Byte).unwrap();
            prop_assert_eq!(v.detokenize(&v.tokenize(&s)), s);
        }

        #[test]
        fn word_vocab_is_deterministic(words in proptest::collection::vec("[a-d]{1,3}", 1..40)) {
            let text = words.join(" ");
            let a = Vocab::build(&text, VocabMode::Word).unwrap();
            let b = Vocab::build(&text, VocabMode::Word).unwrap();
            prop_assert_eq!(&a, &b);
            let toks = a.tokenize(&text);
            prop_assert!(a.validate(&toks).is_ok());
            prop_assert_eq!(a.detokenize(&toks), text);
        }
    }
}
