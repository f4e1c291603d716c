use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::hard::{Cooccurrence, HardSampleIndex};

/// Anchor at `anchor_pos` in the sequence, its successor as positive, and
/// `n_cl` negatives.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContrastiveSample {
    pub anchor_pos: usize,
    pub anchor: usize,
    pub positive: usize,
    pub negatives: Vec<usize>,
}

/// Draws `n_cl` negatives for `positive` from its hard set, falling back to
/// uniform items that never co-occur with it.
pub fn draw_negatives<R: Rng + ?Sized>(
    positive: usize,
    n_cl: usize,
    index: &HardSampleIndex,
    cooccurrence: &Cooccurrence,
    rng: &mut R,
) -> Vec<usize> {
    let hard = index.get(positive);
    let pool: Vec<usize> = if !hard.is_empty() {
        hard.to_vec()
    } else {
        let n = cooccurrence.n_items();
        let strict: Vec<usize> = (0..n)
            .filter(|&o| o != positive && !cooccurrence.cooccur(positive, o))
            .collect();
        if strict.is_empty() {
            (0..n).filter(|&o| o != positive).collect()
        } else {
            strict
        }
    };
    if pool.is_empty() {
        return Vec::new();
    }
    if pool.len() >= n_cl {
        pool.choose_multiple(rng, n_cl).copied().collect()
    } else {
        (0..n_cl).map(|_| *pool.choose(rng).expect("non-empty")).collect()
    }
}

/// Samples `n_s` distinct anchors from every position but the last.
pub fn sample_contrastive_batch<R: Rng + ?Sized>(
    seq: &[usize],
    n_s: usize,
    n_cl: usize,
    index: &HardSampleIndex,
    cooccurrence: &Cooccurrence,
    rng: &mut R,
) -> Vec<ContrastiveSample> {
    if seq.len() < 2 || n_cl == 0 {
        return Vec::new();
    }
    let mut positions: Vec<usize> = (0..seq.len() - 1).collect();
    positions.shuffle(rng);
    positions.truncate(n_s);
    positions.sort_unstable();
    positions
        .into_iter()
        .map(|p| {
            let positive = seq[p + 1];
            ContrastiveSample {
                anchor_pos: p,
                anchor: seq[p],
                positive,
                negatives: draw_negatives(positive, n_cl, index, cooccurrence, rng),
            }
        })
        .collect()
}
