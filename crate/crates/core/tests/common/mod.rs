#![allow(dead_code)]

use mixrec_core::corpus::{Cooccurrence, HardSampleIndex, ItemSentence, TrainExample, NUM_RESERVED};
use mixrec_core::model::{CollabMode, ModelConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct Fixture {
    pub sentences: Vec<ItemSentence>,
    pub prompt: Vec<usize>,
    pub train: Vec<TrainExample>,
    pub hard: HardSampleIndex,
    pub cooc: Cooccurrence,
    pub config: ModelConfig,
}

/// Tiny catalog: `n_items` items of 2-3 tokens over a 50-token vocabulary.
pub fn fixture(n_items: usize, n_users: usize, seed: u64) -> Fixture {
    let vocab = 50;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sentences: Vec<ItemSentence> = (0..n_items)
        .map(|_| ItemSentence {
            token_ids: (0..rng.random_range(2..4))
                .map(|_| rng.random_range(NUM_RESERVED + 3..vocab))
                .collect(),
        })
        .collect();
    let prompt = vec![NUM_RESERVED, NUM_RESERVED + 1, NUM_RESERVED + 2];
    let train: Vec<TrainExample> = (0..n_users)
        .map(|u| {
            let len = rng.random_range(3..6);
            let items: Vec<usize> = (0..len).map(|_| rng.random_range(0..n_items)).collect();
            TrainExample {
                user_id: u,
                inputs: items[..len - 1].to_vec(),
                targets: items[1..].to_vec(),
            }
        })
        .collect();
    let cooc = Cooccurrence::from_sequences(n_items, train.iter().map(|e| e.inputs.as_slice()));
    let hard = HardSampleIndex {
        sets: (0..n_items)
            .map(|i| {
                (0..n_items)
                    .filter(|&j| j != i && !cooc.cooccur(i, j))
                    .take(3)
                    .collect()
            })
            .collect(),
    };
    let config = ModelConfig {
        vocab_size: vocab,
        d_model: 16,
        heads: 1,
        layers: 2,
        ffn_dim: 32,
        bottleneck: 8,
        max_len: 64,
        n_items,
        n_users,
        d_cf: 4,
        replace_every: 1,
        collab: CollabMode::Single,
        adapter_activation: false,
        cf_mode: Default::default(),
    };
    Fixture {
        sentences,
        prompt,
        train,
        hard,
        cooc,
        config,
    }
}
