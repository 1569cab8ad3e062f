use serde::{Deserialize, Serialize};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
pub const ENC: usize = 3;
pub const DEC: usize = 4;
pub const EOS: usize = 5;
pub const SEP: usize = 6;

pub const SPECIAL_TOKENS: [&str; 7] = ["[PAD]", "[UNK]", "[CLS]", "[ENC]", "[DEC]", "[EOS]", "[SEP]"];

/// Which MED functionality a sequence drives, selected by its first token.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    /// Unimodal text encoder.
    Cls,
    /// Image-grounded text encoder.
    Encode,
    /// Image-grounded text decoder.
    Decode,
}

impl Role {
    pub fn token(self) -> usize {
        match self {
            Role::Cls => CLS,
            Role::Encode => ENC,
            Role::Decode => DEC,
        }
    }
}

pub fn is_role_token(id: usize) -> bool {
    matches!(id, CLS | ENC | DEC)
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
}

impl TokenSequence {
    pub fn new(ids: Vec<usize>) -> Self {
        Self { ids }
    }

    /// `role` followed by `body`.
    pub fn with_role(role: Role, body: &[usize]) -> Self {
        let mut ids = Vec::with_capacity(body.len() + 1);
        ids.push(role.token());
        ids.extend_from_slice(body);
        Self { ids }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Position of the first [SEP], if any.
    pub fn sep_position(&self) -> Option<usize> {
        self.ids.iter().position(|&t| t == SEP)
    }
}

/// Right-padded batch of sequences, `batch × len` ids.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenBatch {
    pub ids: Vec<usize>,
    pub lens: Vec<usize>,
    pub len: usize,
}

impl TokenBatch {
    pub fn from_sequences(seqs: &[&TokenSequence]) -> Self {
        let len = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
        let mut ids = Vec::with_capacity(seqs.len() * len);
        for s in seqs {
            ids.extend_from_slice(&s.ids);
            ids.extend(std::iter::repeat_n(PAD, len - s.len()));
        }
        Self {
            ids,
            lens: seqs.iter().map(|s| s.len()).collect(),
            len,
        }
    }

    pub fn batch(&self) -> usize {
        self.lens.len()
    }

    pub fn row(&self, b: usize) -> &[usize] {
        &self.ids[b * self.len..(b + 1) * self.len]
    }
}
