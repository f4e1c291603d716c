//! Seeded synthetic catalog with planted Markov successors.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use mixrec_core::corpus::io::write_jsonl;
use mixrec_core::corpus::{RawInteraction, RawItem};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{CliError, CliResult};

pub const SUCCESSOR_MASS: f64 = 0.6;
pub const MIN_ITEMS: usize = 20;
const MIN_LEN: usize = 5;
const MAX_LEN: usize = 9;

const NOUNS: &[&str] = &["brush", "canvas", "easel", "marker", "palette", "pencil", "ribbon", "spool", "stencil", "yarn"];
const BRANDS: &[&str] = &["acme", "birch", "cobalt", "delta", "ember", "fable"];
const CATEGORIES: &[&str] = &["painting", "drawing", "sewing", "knitting", "crafts"];
const COLORS: &[&str] = &["red", "blue", "green", "black", "white", "ochre"];
const MATERIALS: &[&str] = &["cotton", "wood", "steel", "nylon", "paper"];

pub struct SyntheticCorpus {
    pub items: Vec<RawItem>,
    pub interactions: Vec<RawInteraction>,
    /// `successor[i]` is the planted next item of item `i`.
    pub successor: Vec<usize>,
}

impl SyntheticCorpus {
    /// Writes `items.jsonl` and `interactions.jsonl` under `dir`.
    pub fn write(&self, dir: &Path) -> CliResult<(PathBuf, PathBuf)> {
        std::fs::create_dir_all(dir)?;
        let items = dir.join("items.jsonl");
        let interactions = dir.join("interactions.jsonl");
        let io = |e: mixrec_core::Error| std::io::Error::other(e.to_string());
        write_jsonl(&items, &self.items).map_err(io)?;
        write_jsonl(&interactions, &self.interactions).map_err(io)?;
        Ok((items, interactions))
    }
}

pub fn item_key(i: usize) -> String {
    format!("i{i}")
}

pub fn user_key(u: usize) -> String {
    format!("u{u}")
}

/// A uniformly random permutation without fixed points.
fn derangement(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    loop {
        let mut p: Vec<usize> = (0..n).collect();
        p.shuffle(rng);
        if p.iter().enumerate().all(|(i, &x)| i != x) {
            return p;
        }
    }
}

pub fn make_synthetic_corpus(n_items: usize, n_users: usize, seed: u64) -> CliResult<SyntheticCorpus> {
    if n_items < MIN_ITEMS {
        return Err(CliError::Config {
            key: "items".into(),
            message: format!("need at least {MIN_ITEMS} items"),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let extra: [(&str, &[&str]); 3] = [("brand", BRANDS), ("color", COLORS), ("material", MATERIALS)];
    let items = (0..n_items)
        .map(|i| {
            let mut attributes = BTreeMap::new();
            let noun = NOUNS.choose(&mut rng).expect("non-empty");
            attributes.insert("title".to_string(), format!("{noun} m{i}"));
            attributes.insert(
                "category".to_string(),
                CATEGORIES.choose(&mut rng).expect("non-empty").to_string(),
            );
            let n_extra = rng.random_range(0..=2);
            for (key, values) in extra.choose_multiple(&mut rng, n_extra) {
                attributes.insert(key.to_string(), values.choose(&mut rng).expect("non-empty").to_string());
            }
            RawItem {
                item_id: item_key(i),
                attributes,
            }
        })
        .collect();
    let successor = derangement(n_items, &mut rng);
    let interactions = (0..n_users)
        .map(|u| {
            let len = rng.random_range(MIN_LEN..=MAX_LEN);
            let mut cur = rng.random_range(0..n_items);
            let mut seq = vec![cur];
            while seq.len() < len {
                cur = if rng.random::<f64>() < SUCCESSOR_MASS {
                    successor[cur]
                } else {
                    rng.random_range(0..n_items)
                };
                seq.push(cur);
            }
            RawInteraction {
                user_id: user_key(u),
                items: seq.into_iter().map(item_key).collect(),
            }
        })
        .collect();
    Ok(SyntheticCorpus {
        items,
        interactions,
        successor,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeded_and_sized() {
        let a = make_synthetic_corpus(200, 1000, 4).unwrap();
        let b = make_synthetic_corpus(200, 1000, 4).unwrap();
        assert_eq!(a.items, b.items);
        assert_eq!(a.interactions, b.interactions);
        assert_eq!((a.items.len(), a.interactions.len()), (200, 1000));
        assert!(a.items.iter().all(|i| (2..=4).contains(&i.attributes.len())));
        assert!(a.interactions.iter().all(|s| (MIN_LEN..=MAX_LEN).contains(&s.items.len())));
        assert!(a.successor.iter().enumerate().all(|(i, &s)| i != s));
        assert!(make_synthetic_corpus(19, 10, 0).is_err());
    }
}
