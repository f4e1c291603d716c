use serde::{Deserialize, Serialize};

use super::vocab::{tokenize, Vocabulary};
use crate::{Error, Result};

pub const DEFAULT_MAX_ITEM_TOKENS: usize = 30;

/// One catalog entry: dense index plus ordered `(key, value)` token lists.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemRecord {
    pub item_id: usize,
    pub attributes: Vec<(Vec<String>, Vec<String>)>,
}

impl ItemRecord {
    pub fn from_text_pairs<'a>(
        item_id: usize,
        pairs: impl IntoIterator<Item = (&'a str, &'a str)>,
    ) -> Self {
        Self {
            item_id,
            attributes: pairs
                .into_iter()
                .map(|(k, v)| (tokenize(k), tokenize(v)))
                .filter(|(k, v)| !k.is_empty() || !v.is_empty())
                .collect(),
        }
    }
}

/// Flattened `k1 v1 … kg vg` token ids of one item.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemSentence {
    pub token_ids: Vec<usize>,
}

impl ItemSentence {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }
}

pub fn flatten_item(record: &ItemRecord, vocab: &mut Vocabulary, max_tokens: usize) -> Result<ItemSentence> {
    if max_tokens == 0 {
        return Err(Error::Invalid("max item tokens must be at least 1".into()));
    }
    if record.attributes.is_empty() {
        return Err(Error::RejectedRecord {
            id: record.item_id.to_string(),
            reason: "empty attribute list".into(),
        });
    }
    let token_ids: Vec<usize> = record
        .attributes
        .iter()
        .flat_map(|(k, v)| k.iter().chain(v))
        .take(max_tokens)
        .map(|t| vocab.intern(t))
        .collect();
    if token_ids.is_empty() {
        return Err(Error::RejectedRecord {
            id: record.item_id.to_string(),
            reason: "no tokens".into(),
        });
    }
    Ok(ItemSentence { token_ids })
}
