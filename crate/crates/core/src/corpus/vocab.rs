use std::collections::HashMap;

use serde::{Deserialize, Serialize};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const SEQ: usize = 2;
pub const ALIGN: usize = 3;
pub const NUM_RESERVED: usize = 4;

const RESERVED: [&str; NUM_RESERVED] = ["[PAD]", "[UNK]", "[SEQ]", "[ALIGN]"];

/// Bidirectional token ↔ id map. Ids below [`NUM_RESERVED`] are special tokens.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "VocabRepr", into = "VocabRepr")]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
    frozen: bool,
}

#[derive(Serialize, Deserialize)]
struct VocabRepr {
    tokens: Vec<String>,
    frozen: bool,
}

impl From<VocabRepr> for Vocabulary {
    fn from(r: VocabRepr) -> Self {
        let ids = r
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Self {
            tokens: r.tokens,
            ids,
            frozen: r.frozen,
        }
    }
}

impl From<Vocabulary> for VocabRepr {
    fn from(v: Vocabulary) -> Self {
        Self {
            tokens: v.tokens,
            frozen: v.frozen,
        }
    }
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocabulary {
    pub fn new() -> Self {
        let tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let ids = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self {
            tokens,
            ids,
            frozen: false,
        }
    }

    /// Stops growth; later unknown tokens map to [`UNK`].
    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Id of `token`, adding it while the vocabulary is still growing.
    pub fn intern(&mut self, token: &str) -> usize {
        if let Some(&id) = self.ids.get(token) {
            return id;
        }
        if self.frozen {
            return UNK;
        }
        let id = self.tokens.len();
        self.tokens.push(token.to_string());
        self.ids.insert(token.to_string(), id);
        id
    }

    pub fn lookup(&self, token: &str) -> usize {
        self.ids.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn encode(&mut self, text: &str) -> Vec<usize> {
        tokenize(text).iter().map(|t| self.intern(t)).collect()
    }

    pub fn is_special(id: usize) -> bool {
        id < NUM_RESERVED
    }
}

/// Lowercased whitespace tokenization.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reserved_ids_and_growth() {
        let mut v = Vocabulary::new();
        assert_eq!(v.lookup("[SEQ]"), SEQ);
        assert_eq!(v.lookup("[ALIGN]"), ALIGN);
        let a = v.intern("mug");
        assert_eq!(a, NUM_RESERVED);
        assert_eq!(v.intern("mug"), a);
        v.freeze();
        assert_eq!(v.intern("kettle"), UNK);
        assert_eq!(v.token(a), Some("mug"));
    }

    #[test]
    fn tokenization_lowercases() {
        assert_eq!(tokenize("  Red MUG\tacme "), vec!["red", "mug", "acme"]);
    }

    #[test]
    fn serde_round_trip() {
        let mut v = Vocabulary::new();
        v.encode("a b c");
        let back: Vocabulary = serde_json::from_str(&serde_json::to_string(&v).unwrap()).unwrap();
        assert_eq!(back, v);
    }
}
