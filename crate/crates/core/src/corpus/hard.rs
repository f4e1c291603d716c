//! Hard negatives: items close to `j` in text or latent space that never
//! co-occur with `j` in a training sequence.

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::item::ItemSentence;
use crate::numerics::Tensor2D;
use crate::{Error, Result, Tensor};

pub const DEFAULT_HARD_RATIO: f64 = 0.005;

/// Items that appear together in at least one sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Cooccurrence {
    sets: Vec<BTreeSet<usize>>,
}

impl Cooccurrence {
    pub fn from_sequences<'a>(n_items: usize, sequences: impl IntoIterator<Item = &'a [usize]>) -> Self {
        let mut sets = vec![BTreeSet::new(); n_items];
        for seq in sequences {
            let uniq: BTreeSet<usize> = seq.iter().copied().collect();
            for &a in &uniq {
                for &b in &uniq {
                    if a != b {
                        sets[a].insert(b);
                    }
                }
            }
        }
        Self { sets }
    }

    pub fn n_items(&self) -> usize {
        self.sets.len()
    }

    pub fn cooccur(&self, a: usize, b: usize) -> bool {
        self.sets[a].contains(&b)
    }
}

/// `N_j` for every item `j`, as sorted lists.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct HardSampleIndex {
    pub sets: Vec<Vec<usize>>,
}

impl HardSampleIndex {
    pub fn get(&self, item: usize) -> &[usize] {
        self.sets.get(item).map_or(&[], Vec::as_slice)
    }

    pub fn empty_count(&self) -> usize {
        self.sets.iter().filter(|s| s.is_empty()).count()
    }
}

/// `max(1, ceil(ratio·|I|))`
pub fn top_k_for(ratio: f64, n_items: usize) -> usize {
    ((ratio * n_items as f64).ceil() as usize).max(1)
}

/// Mean of seeded random token vectors over each item sentence.
pub fn text_embeddings(sentences: &[ItemSentence], vocab_len: usize, dim: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let table: Tensor = Tensor2D::from_fn(vocab_len, dim, |_, _| StandardNormal.sample(&mut rng));
    let mut out = Tensor2D::zeros(sentences.len(), dim);
    for (i, s) in sentences.iter().enumerate() {
        let n = s.len().max(1) as f64;
        let row = out.row_mut(i);
        for &t in &s.token_ids {
            for (o, &v) in row.iter_mut().zip(table.row(t)) {
                *o += v / n;
            }
        }
    }
    out
}

fn squared_l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// The `k` nearest other items to `j` by L2 distance; ties go to the lower index.
fn nearest(emb: &Tensor, j: usize, k: usize) -> Vec<usize> {
    let mut d: Vec<(f64, usize)> = (0..emb.rows())
        .filter(|&o| o != j)
        .map(|o| (squared_l2(emb.row(j), emb.row(o)), o))
        .collect();
    d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    d.into_iter().take(k).map(|(_, o)| o).collect()
}

pub fn generate_hard_samples(
    text_emb: &Tensor,
    cf_latent: &Tensor,
    cooccurrence: &Cooccurrence,
    ratio: f64,
) -> Result<HardSampleIndex> {
    let n = text_emb.rows();
    if cf_latent.rows() != n || cooccurrence.n_items() != n {
        return Err(Error::Shape(format!(
            "hard samples: {} text rows, {} latent rows, {} co-occurrence rows",
            n,
            cf_latent.rows(),
            cooccurrence.n_items()
        )));
    }
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::Invalid(format!("hard-sample ratio {ratio} outside (0, 1]")));
    }
    let k = top_k_for(ratio, n);
    let sets: Vec<Vec<usize>> = (0..n)
        .map(|j| {
            let mut s: BTreeSet<usize> = nearest(text_emb, j, k).into_iter().collect();
            s.extend(nearest(cf_latent, j, k));
            s.into_iter().filter(|&o| !cooccurrence.cooccur(j, o)).collect()
        })
        .collect();
    let index = HardSampleIndex { sets };
    if index.empty_count() > 0 {
        log::info!(
            "{} of {} items have no hard samples after co-occurrence exclusion",
            index.empty_count(),
            n
        );
    }
    Ok(index)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ceiling_rule() {
        assert_eq!(top_k_for(0.005, 4), 1);
        assert_eq!(top_k_for(0.005, 200), 1);
        assert_eq!(top_k_for(0.005, 201), 2);
        assert_eq!(top_k_for(0.5, 5), 3);
    }

    #[test]
    fn identical_embeddings_become_hard_samples() {
        let text = Tensor2D::from_rows(&[vec![0.0, 0.0], vec![5.0, 5.0], vec![0.0, 0.0], vec![9.0, 9.0]]);
        let latent = Tensor2D::from_rows(&[vec![1.0], vec![2.0], vec![30.0], vec![4.0]]);
        let cooc = Cooccurrence::from_sequences(4, [&[1usize, 3][..]]);
        let idx = generate_hard_samples(&text, &latent, &cooc, 0.005).unwrap();
        assert!(idx.get(0).contains(&2));
        assert!(!idx.get(0).contains(&0));
        // 1 and 3 co-occur, so neither is a hard sample of the other
        assert!(!idx.get(1).contains(&3));
        assert!(!idx.get(3).contains(&1));
    }

    #[test]
    fn text_embeddings_are_seeded_means() {
        let s = vec![ItemSentence { token_ids: vec![4, 5] }, ItemSentence { token_ids: vec![5, 4] }];
        let a = text_embeddings(&s, 8, 6, 1);
        assert_eq!(a, text_embeddings(&s, 8, 6, 1));
        assert!(a.row(0).iter().zip(a.row(1)).all(|(x, y)| (x - y).abs() < 1e-15));
        assert_ne!(a, text_embeddings(&s, 8, 6, 2));
    }
}
