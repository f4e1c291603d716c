mod common;

use common::fixture;
use mixrec_core::cf::CfMode;
use mixrec_core::model::{ArchitectureGenome, Model};
use mixrec_core::objectives::LossWeights;
use mixrec_core::train::{epoch_summaries, steps_per_epoch, train, TrainConfig, TrainContext};

fn run(cf_mode: CfMode, weights: LossWeights) -> (Model, Model) {
    let mut f = fixture(20, 6, 4);
    f.config.cf_mode = cf_mode;
    let before = Model::new(f.config.clone(), None, 1).unwrap();
    let mut model = before.clone();
    let ctx = TrainContext {
        sentences: &f.sentences,
        prompt: &f.prompt,
        vocab_len: f.config.vocab_size,
        hard: &f.hard,
        cooccurrence: &f.cooc,
    };
    let cfg = TrainConfig {
        epochs: 2,
        lr: 1e-2,
        batch_size: 3,
        n_cl: 2,
        weights,
        ..TrainConfig::default()
    };
    let genome = ArchitectureGenome::from_index(0b011_100, 2);
    let logs = train(&mut model, &genome, &f.train, &ctx, &cfg, |_| {}).unwrap();
    assert_eq!(logs.len(), 2 * steps_per_epoch(f.train.len(), 3));
    assert_eq!(epoch_summaries(&logs).len(), 2);
    (before, model)
}

#[test]
fn joint_cf_tables_learn_through_injection_alone() {
    let (before, after) = run(CfMode::Joint, LossWeights { cf: 0.0, ..LossWeights::default() });
    let (u, i) = before.cf_ids();
    assert_ne!(before.store().get(u), after.store().get(u));
    assert_ne!(before.store().get(i), after.store().get(i));
}

#[test]
fn frozen_cf_tables_stay_bitwise_constant() {
    let (before, after) = run(CfMode::Frozen, LossWeights::default());
    for id in before.store().ids() {
        let (a, b) = (before.store().get(id), after.store().get(id));
        if before.store().is_frozen(id) {
            assert!(a.as_slice().iter().zip(b.as_slice()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }
    let (u, i) = after.cf_ids();
    assert!(after.store().is_frozen(u) && after.store().is_frozen(i));
    let (hw, _) = after.head_ids();
    assert_ne!(before.store().get(hw), after.store().get(hw));
}
