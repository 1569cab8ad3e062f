use std::collections::HashMap;
use std::path::Path;

use super::{Result, SceneError};
use crate::model::{TokenSequence, DEC, ENC, EOS, CLS, PAD, SPECIAL_TOKENS};

const WORDS: [&str; 35] = [
    "a", "small", "large", "red", "green", "blue", "yellow", "circle", "square", "triangle", "above", "below", "left",
    "right", "of", "how", "many", "shapes", "what", "color", "is", "the", "shape", "object", "where", "top", "bottom",
    "larger", "than", "yes", "no", "zero", "one", "two", "three",
];

/// Largest vocabulary the corpus format allows, specials included.
pub const MAX_VOCAB: usize = 64;

/// Closed word-level vocabulary; special tokens occupy the first ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn standard() -> Self {
        let words = SPECIAL_TOKENS.iter().chain(WORDS.iter()).map(|w| w.to_string()).collect();
        Self::from_words(words).expect("built-in vocabulary is well formed")
    }

    pub fn from_words(words: Vec<String>) -> Result<Self> {
        if words.len() > MAX_VOCAB {
            return Err(SceneError::Malformed(format!("vocabulary has {} tokens, limit {MAX_VOCAB}", words.len())));
        }
        if words.len() < SPECIAL_TOKENS.len() || words.iter().zip(SPECIAL_TOKENS).any(|(w, s)| w != s) {
            return Err(SceneError::Malformed("vocabulary must start with the special tokens".into()));
        }
        let mut index = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            if w.is_empty() || w.contains(char::is_whitespace) {
                return Err(SceneError::Malformed(format!("bad vocabulary entry {w:?} at line {}", i + 1)));
            }
            if index.insert(w.clone(), i).is_some() {
                return Err(SceneError::Malformed(format!("duplicate vocabulary entry {w:?}")));
            }
        }
        Ok(Self { words, index })
    }

    /// One token per line; line number (from 0) is the id.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| SceneError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_words(text.lines().map(str::to_string).collect())
    }

    pub fn to_file_contents(&self) -> String {
        let mut s = self.words.join("\n");
        s.push('\n');
        s
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.words.iter().map(String::as_str)
    }

    /// Word ids of `text`. Special tokens written verbatim (`[SEP]`) map to
    /// themselves; other words are lowercased and stripped of punctuation,
    /// and anything outside the vocabulary becomes `[UNK]`.
    pub fn tokenize(&self, text: &str, max_len: usize) -> Result<TokenSequence> {
        let mut ids = Vec::new();
        for raw in text.split_whitespace() {
            if let Some(id) = SPECIAL_TOKENS.iter().position(|s| *s == raw) {
                ids.push(id);
                continue;
            }
            let cleaned: String = raw
                .to_lowercase()
                .chars()
                .map(|c| if c.is_alphanumeric() { c } else { ' ' })
                .collect();
            for w in cleaned.split_whitespace() {
                ids.push(self.id(w).unwrap_or(crate::model::UNK));
            }
        }
        if ids.len() > max_len {
            return Err(SceneError::TooLong { len: ids.len(), max: max_len });
        }
        Ok(TokenSequence::new(ids))
    }

    /// Joins words, skipping padding and role markers and stopping at
    /// `[EOS]`. Ids outside the vocabulary render as `[UNK]`.
    pub fn detokenize(&self, ids: &[usize]) -> String {
        let mut out: Vec<&str> = Vec::new();
        for &id in ids {
            match id {
                EOS => break,
                PAD | CLS | ENC | DEC => {}
                _ => out.push(self.word(id).unwrap_or(SPECIAL_TOKENS[crate::model::UNK])),
            }
        }
        out.join(" ")
    }
}
