use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::hard::HardSampleIndex;
use super::item::{flatten_item, ItemRecord, ItemSentence};
use super::split::InteractionSequence;
use super::vocab::Vocabulary;
use crate::{Error, Result};

pub const MIN_SEQUENCE_LEN: usize = 4;

/// A line of `items.jsonl`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawItem {
    pub item_id: String,
    pub attributes: BTreeMap<String, String>,
}

/// A line of `interactions.jsonl`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawInteraction {
    pub user_id: String,
    pub items: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestStats {
    pub rejected_items: usize,
    pub unknown_item_refs: usize,
    pub short_sequences: usize,
}

/// Ingested catalog and interaction data with dense indices.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Corpus {
    pub vocab: Vocabulary,
    pub item_keys: Vec<String>,
    pub sentences: Vec<ItemSentence>,
    pub user_keys: Vec<String>,
    pub sequences: Vec<InteractionSequence>,
    pub prompt: Vec<usize>,
    pub stats: IngestStats,
}

impl Corpus {
    pub fn n_items(&self) -> usize {
        self.sentences.len()
    }

    pub fn n_users(&self) -> usize {
        self.user_keys.len()
    }

    pub fn item_index(&self) -> HashMap<&str, usize> {
        self.item_keys.iter().enumerate().map(|(i, k)| (k.as_str(), i)).collect()
    }
}

pub fn ingest(
    items: &[RawItem],
    interactions: &[RawInteraction],
    max_item_tokens: usize,
    prompt: &str,
) -> Result<Corpus> {
    let mut vocab = Vocabulary::new();
    let prompt = vocab.encode(prompt);
    let mut stats = IngestStats::default();
    let mut item_keys = Vec::new();
    let mut sentences = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    for raw in items {
        if index.contains_key(&raw.item_id) {
            return Err(Error::DataIntegrity(format!("duplicate item id {}", raw.item_id)));
        }
        let record = ItemRecord::from_text_pairs(
            sentences.len(),
            raw.attributes.iter().map(|(k, v)| (k.as_str(), v.as_str())),
        );
        match flatten_item(&record, &mut vocab, max_item_tokens) {
            Ok(s) => {
                index.insert(raw.item_id.clone(), sentences.len());
                item_keys.push(raw.item_id.clone());
                sentences.push(s);
            }
            Err(Error::RejectedRecord { reason, .. }) => {
                log::warn!("rejected item {}: {reason}", raw.item_id);
                stats.rejected_items += 1;
            }
            Err(e) => return Err(e),
        }
    }
    vocab.freeze();

    let mut user_keys = Vec::new();
    let mut sequences = Vec::new();
    let mut seen_users = HashMap::new();
    for raw in interactions {
        if seen_users.insert(raw.user_id.clone(), ()).is_some() {
            return Err(Error::DataIntegrity(format!("duplicate user id {}", raw.user_id)));
        }
        let mut ids = Vec::with_capacity(raw.items.len());
        for key in &raw.items {
            match index.get(key) {
                Some(&i) => ids.push(i),
                None => stats.unknown_item_refs += 1,
            }
        }
        if ids.len() < MIN_SEQUENCE_LEN {
            stats.short_sequences += 1;
            continue;
        }
        sequences.push(InteractionSequence {
            user_id: user_keys.len(),
            item_ids: ids,
        });
        user_keys.push(raw.user_id.clone());
    }
    Ok(Corpus {
        vocab,
        item_keys,
        sentences,
        user_keys,
        sequences,
        prompt,
        stats,
    })
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    for r in rows {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

/// `{"item_id": [item_id, …]}` keyed by external ids.
pub fn hard_samples_to_json(index: &HardSampleIndex, item_keys: &[String]) -> BTreeMap<String, Vec<String>> {
    index
        .sets
        .iter()
        .enumerate()
        .map(|(j, s)| (item_keys[j].clone(), s.iter().map(|&o| item_keys[o].clone()).collect()))
        .collect()
}

pub fn hard_samples_from_json(
    map: &BTreeMap<String, Vec<String>>,
    item_keys: &[String],
) -> Result<HardSampleIndex> {
    let index: HashMap<&str, usize> = item_keys.iter().enumerate().map(|(i, k)| (k.as_str(), i)).collect();
    let lookup = |k: &str| {
        index
            .get(k)
            .copied()
            .ok_or_else(|| Error::DataIntegrity(format!("hard samples reference unknown item {k}")))
    };
    let mut sets = vec![Vec::new(); item_keys.len()];
    for (k, v) in map {
        let j = lookup(k)?;
        let mut s = v.iter().map(|o| lookup(o)).collect::<Result<Vec<_>>>()?;
        s.sort_unstable();
        sets[j] = s;
    }
    Ok(HardSampleIndex { sets })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn raw_item(id: &str, attrs: &[(&str, &str)]) -> RawItem {
        RawItem {
            item_id: id.into(),
            attributes: attrs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        }
    }

    fn raw_seq(user: &str, items: &[&str]) -> RawInteraction {
        RawInteraction {
            user_id: user.into(),
            items: items.iter().map(|s| s.to_string()).collect(),
        }
    }

    #[test]
    fn ingestion_filters_and_is_deterministic() {
        let items = vec![
            raw_item("a", &[("title", "Red Mug"), ("brand", "acme")]),
            raw_item("b", &[]),
            raw_item("c", &[("title", "kettle")]),
            raw_item("d", &[("title", "spoon")]),
        ];
        let inter = vec![
            raw_seq("u1", &["a", "c", "d", "a"]),
            raw_seq("u2", &["a", "b", "c", "d"]),
            raw_seq("u3", &["a", "zz", "c", "d", "c"]),
        ];
        let c = ingest(&items, &inter, 30, "give the id").unwrap();
        assert_eq!(c.item_keys, vec!["a", "c", "d"]);
        assert_eq!(c.stats.rejected_items, 1);
        // u2 loses "b" and drops below four items
        assert_eq!(c.stats.short_sequences, 1);
        assert_eq!(c.user_keys, vec!["u1", "u3"]);
        assert_eq!(c.sequences[1].item_ids, vec![0, 1, 2, 1]);
        // attributes follow key order: brand before title
        let first = c.vocab.token(c.sentences[0].token_ids[0]).unwrap();
        assert_eq!(first, "brand");
        assert_eq!(c, ingest(&items, &inter, 30, "give the id").unwrap());
        assert!(c.vocab.is_frozen());
    }

    #[test]
    fn hard_sample_json_round_trip() {
        let keys: Vec<String> = ["x", "y", "z"].iter().map(|s| s.to_string()).collect();
        let idx = HardSampleIndex {
            sets: vec![vec![1, 2], vec![], vec![0]],
        };
        let json = hard_samples_to_json(&idx, &keys);
        assert_eq!(json["x"], vec!["y", "z"]);
        assert_eq!(hard_samples_from_json(&json, &keys).unwrap(), idx);
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.jsonl");
        let rows = vec![raw_seq("u", &["a", "b"]), raw_seq("v", &[])];
        write_jsonl(&p, &rows).unwrap();
        assert_eq!(read_jsonl::<RawInteraction>(&p).unwrap(), rows);
    }
}
