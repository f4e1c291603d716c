use serde::{Deserialize, Serialize};

use super::item::ItemSentence;
use super::vocab::{ALIGN, SEQ};
use crate::attention::SegmentMap;
use crate::{Error, Result};

pub const DEFAULT_ALIGN_PROMPT: &str = "Give the ID of the item described by:";

/// Token stream fed to the model, with segment ordinals and the positions
/// of its `[SEQ]` or `[ALIGN]` markers (0-based).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelInput {
    pub tokens: Vec<usize>,
    pub segments: SegmentMap,
    pub markers: Vec<usize>,
}

impl ModelInput {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Drops whole items from the front until at most `max_tokens` remain.
    /// Returns the number of dropped items.
    pub fn truncate_oldest(&mut self, max_tokens: usize) -> usize {
        if self.tokens.len() <= max_tokens {
            return 0;
        }
        let excess = self.tokens.len() - max_tokens;
        // the cut must land right after a marker
        let (dropped, cut) = self
            .markers
            .iter()
            .enumerate()
            .map(|(i, &p)| (i + 1, p + 1))
            .find(|&(_, cut)| cut >= excess)
            .unwrap_or((self.markers.len(), self.tokens.len()));
        self.tokens.drain(..cut);
        let segs = self.segments.segments()[cut..].to_vec();
        self.segments = SegmentMap::new(segs, self.segments.collab_count());
        self.markers = self.markers[dropped..].iter().map(|&p| p - cut).collect();
        dropped
    }
}

/// `T_1 [SEQ] … T_n [SEQ]`; item `j` (1-based) and its `[SEQ]` form segment `j`.
pub fn build_sequence_input(items: &[usize], sentences: &[ItemSentence]) -> Result<ModelInput> {
    let mut tokens = Vec::new();
    let mut segments = Vec::new();
    let mut markers = Vec::with_capacity(items.len());
    for (ordinal, &item) in items.iter().enumerate() {
        let sentence = sentences
            .get(item)
            .ok_or_else(|| Error::DataIntegrity(format!("no item sentence for item {item}")))?;
        tokens.extend_from_slice(&sentence.token_ids);
        tokens.push(SEQ);
        segments.extend(std::iter::repeat_n(ordinal + 1, sentence.len() + 1));
        markers.push(tokens.len() - 1);
    }
    Ok(ModelInput {
        tokens,
        segments: SegmentMap::new(segments, 0),
        markers,
    })
}

/// `prompt ⧺ T_i ⧺ [ALIGN]`; the prompt is segment 0, the item and marker segment 1.
pub fn build_alignment_input(item: &ItemSentence, prompt: &[usize], vocab_len: usize) -> Result<ModelInput> {
    if item.is_empty() {
        return Err(Error::Invalid("empty item sentence".into()));
    }
    if let Some(&bad) = prompt.iter().chain(&item.token_ids).find(|&&t| t >= vocab_len) {
        return Err(Error::OutOfRange {
            index: bad,
            len: vocab_len,
        });
    }
    let mut tokens = Vec::with_capacity(prompt.len() + item.len() + 1);
    tokens.extend_from_slice(prompt);
    tokens.extend_from_slice(&item.token_ids);
    tokens.push(ALIGN);
    let mut segments = vec![0; prompt.len()];
    segments.extend(std::iter::repeat_n(1, item.len() + 1));
    Ok(ModelInput {
        markers: vec![tokens.len() - 1],
        tokens,
        segments: SegmentMap::new(segments, 0),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::vocab::{tokenize, Vocabulary};

    fn sentences() -> Vec<ItemSentence> {
        vec![
            ItemSentence { token_ids: vec![10, 11] },
            ItemSentence { token_ids: vec![12] },
            ItemSentence { token_ids: vec![13, 14, 15] },
        ]
    }

    #[test]
    fn sequence_layout() {
        let input = build_sequence_input(&[0, 1], &sentences()).unwrap();
        assert_eq!(input.tokens, vec![10, 11, SEQ, 12, SEQ]);
        // 1-based positions {3, 5}
        assert_eq!(input.markers, vec![2, 4]);
        assert_eq!(input.segments.segments(), &[1, 1, 1, 2, 2]);

        let single = build_sequence_input(&[2], &sentences()).unwrap();
        assert_eq!(single.segments.segments(), &[1, 1, 1, 1]);

        let many = build_sequence_input(&[0, 1, 2, 1, 0], &sentences()).unwrap();
        assert_eq!(many.tokens.iter().filter(|&&t| t == SEQ).count(), 5);
        assert!(many.segments.segments().windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn missing_sentence_is_integrity_error() {
        assert!(matches!(
            build_sequence_input(&[0, 9], &sentences()),
            Err(Error::DataIntegrity(_))
        ));
    }

    #[test]
    fn alignment_layout() {
        let item = ItemSentence { token_ids: vec![5, 6, 7] };
        let input = build_alignment_input(&item, &[4, 4, 4, 4], 20).unwrap();
        assert_eq!(input.len(), 8);
        assert_eq!(input.markers, vec![7]);
        assert_eq!(input.tokens[7], ALIGN);
        assert_eq!(input.segments.segments(), &[0, 0, 0, 0, 1, 1, 1, 1]);

        let bare = build_alignment_input(&item, &[], 20).unwrap();
        assert_eq!(bare.len(), 4);
        assert!(build_alignment_input(&item, &[99], 20).is_err());
    }

    #[test]
    fn default_prompt_tokens() {
        let mut v = Vocabulary::new();
        assert_eq!(tokenize(DEFAULT_ALIGN_PROMPT).len(), 8);
        assert_eq!(v.encode(DEFAULT_ALIGN_PROMPT).len(), 8);
    }

    #[test]
    fn truncation_drops_whole_items() {
        let mut input = build_sequence_input(&[0, 1, 2], &sentences()).unwrap();
        assert_eq!(input.len(), 9);
        assert_eq!(input.truncate_oldest(7), 1);
        assert_eq!(input.tokens, vec![12, SEQ, 13, 14, 15, SEQ]);
        assert_eq!(input.markers, vec![1, 5]);
        assert_eq!(input.segments.segments(), &[2, 2, 3, 3, 3, 3]);
        assert_eq!(input.truncate_oldest(100), 0);
    }
}
