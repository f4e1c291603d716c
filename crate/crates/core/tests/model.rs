mod common;

use common::fixture;
use mixrec_core::cf::CfMode;
use mixrec_core::corpus::{build_alignment_input, build_sequence_input};
use mixrec_core::model::{ArchitectureGenome, Collab, CollabMode, Model};
use mixrec_core::numerics::{check_gradients, GradCheckConfig};
use mixrec_core::objectives::LossWeights;
use mixrec_core::train::{batch_loss, plan_batch, BatchObjective, TrainConfig, TrainContext};
use mixrec_core::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn objective_setup(
    genome_code: u64,
    collab: CollabMode,
    activation: bool,
) -> (Model, ArchitectureGenome, common::Fixture, TrainConfig) {
    let mut f = fixture(20, 3, 11);
    f.config.collab = collab;
    f.config.adapter_activation = activation;
    let mut model = Model::new(f.config.clone(), None, 5).unwrap();
    // move every zero-initialized trainable tensor off zero so every path carries gradient
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let ids: Vec<_> = model.store().ids().collect();
    for id in ids {
        if !model.store().is_frozen(id) {
            use rand::Rng;
            for x in model.store_mut().get_mut(id).as_mut_slice() {
                *x += rng.random_range(-0.1..0.1);
            }
        }
    }
    let genome = ArchitectureGenome::from_index(genome_code, f.config.moe_layer_count());
    let cfg = TrainConfig {
        batch_size: 2,
        n_s: 1,
        n_cl: 2,
        weights: LossWeights {
            align: 0.5,
            cl: 0.3,
            cf: 0.2,
        },
        ..TrainConfig::default()
    };
    (model, genome, f, cfg)
}

fn run_gradcheck(genome_code: u64, collab: CollabMode, activation: bool) {
    let (mut model, genome, f, cfg) = objective_setup(genome_code, collab, activation);
    let ctx = TrainContext {
        sentences: &f.sentences,
        prompt: &f.prompt,
        vocab_len: f.config.vocab_size,
        hard: &f.hard,
        cooccurrence: &f.cooc,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let plan = plan_batch(&f.train, vec![0, 2], &ctx, &cfg, f.config.n_items, &mut rng);
    assert!(!plan.contrastive.is_empty());
    let mut store = model.store().clone();
    let snapshot = model.clone();
    let obj = BatchObjective {
        model: &snapshot,
        genome: &genome,
        train: &f.train,
        plan: &plan,
        ctx,
        cfg: &cfg,
    };
    let report = check_gradients(&obj, &mut store, GradCheckConfig::default()).unwrap();
    assert!(report.frozen_slots_zero);
    assert!(
        report.max_rel_error < 1e-3,
        "max rel error {} at {:?}",
        report.max_rel_error,
        report.worst
    );
    *model.store_mut() = store;
}

#[test]
fn full_objective_gradients_serial_genome() {
    run_gradcheck(0, CollabMode::Single, false);
}

#[test]
fn full_objective_gradients_mixed_genome_both_collab_with_activation() {
    run_gradcheck(0b101_110, CollabMode::Both, true);
}

#[test]
fn shapes_and_markers() {
    let f = fixture(20, 3, 1);
    let model = Model::new(f.config.clone(), None, 0).unwrap();
    let g = ArchitectureGenome::all_serial(f.config.moe_layer_count());
    let input = build_sequence_input(&[1, 2, 3], &f.sentences).unwrap();
    let pass = model.forward(&input, &[Collab::User(0)], &g).unwrap();
    assert_eq!(pass.hidden.shape(), (input.len(), 16));
    assert_eq!(pass.markers.len(), 3);
    assert_eq!(pass.marker_states().shape(), (3, 16));
    assert_eq!(model.item_logits(&pass.marker_states()).shape(), (3, 20));
    assert!(pass.hidden.is_finite());
}

#[test]
fn wrong_genome_length_is_rejected() {
    let f = fixture(20, 3, 1);
    let model = Model::new(f.config.clone(), None, 0).unwrap();
    let input = build_sequence_input(&[1, 2], &f.sentences).unwrap();
    let g = ArchitectureGenome::all_serial(1);
    assert!(matches!(model.forward(&input, &[Collab::User(0)], &g), Err(Error::Shape(_))));
}

#[test]
fn out_of_range_collab_is_rejected() {
    let f = fixture(20, 3, 1);
    let model = Model::new(f.config.clone(), None, 0).unwrap();
    let input = build_sequence_input(&[1, 2], &f.sentences).unwrap();
    let g = ArchitectureGenome::all_serial(2);
    assert!(matches!(
        model.forward(&input, &[Collab::User(3)], &g),
        Err(Error::OutOfRange { index: 3, len: 3 })
    ));
}

#[test]
fn census_identical_across_genomes_and_r_changes_moe_layers() {
    let f = fixture(20, 3, 1);
    let model = Model::new(f.config.clone(), None, 0).unwrap();
    let census = model.store().trainable_census();
    for code in 0..64u64 {
        let g = ArchitectureGenome::from_index(code, 2);
        let input = build_sequence_input(&[4, 5], &f.sentences).unwrap();
        model.forward(&input, &[Collab::User(1)], &g).unwrap();
        assert_eq!(model.store().trainable_census(), census);
    }
    let mut c2 = f.config.clone();
    c2.replace_every = 2;
    assert_eq!(f.config.moe_layer_count(), 2);
    assert_eq!(c2.moe_layer_count(), 1);
    let m2 = Model::new(c2.clone(), None, 0).unwrap();
    assert!(m2.store().trainable_count() < model.store().trainable_count());
    assert!(m2.store().id("layers.1.moe.gate.w").is_none());
    assert!(m2.store().id("layers.0.moe.gate.w").is_some());
    c2.layers = 4;
    assert_eq!(c2.moe_layer_indices(), vec![0, 2]);
}

#[test]
fn frozen_mode_freezes_cf_tables() {
    let mut f = fixture(20, 3, 1);
    let joint = Model::new(f.config.clone(), None, 0).unwrap();
    f.config.cf_mode = CfMode::Frozen;
    let frozen = Model::new(f.config.clone(), None, 0).unwrap();
    let (u, i) = frozen.cf_ids();
    assert!(frozen.store().is_frozen(u) && frozen.store().is_frozen(i));
    assert!(!joint.store().is_frozen(u));
    for name in ["embed.tokens", "embed.positions", "layers.0.attn.wq", "layers.1.ffn.w2", "layers.0.ln1.gain"] {
        assert!(frozen.frozen_names().iter().any(|n| n == name), "{name}");
    }
}

#[test]
fn forward_and_init_are_deterministic() {
    let f = fixture(20, 3, 1);
    let model = Model::new(f.config.clone(), None, 0).unwrap();
    let g = ArchitectureGenome::from_index(0b010_011, 2);
    let input = build_alignment_input(&f.sentences[3], &f.prompt, 50).unwrap();
    let a = model.forward(&input, &[Collab::Item(3)], &g).unwrap();
    let b = model.forward(&input, &[Collab::Item(3)], &g).unwrap();
    assert_eq!(a.hidden, b.hidden);
    let again = Model::new(f.config.clone(), None, 0).unwrap();
    assert_eq!(again.store(), model.store());
}

#[test]
fn order_matters_for_the_last_seq_state() {
    let f = fixture(20, 3, 1);
    let model = Model::new(f.config.clone(), None, 0).unwrap();
    let g = ArchitectureGenome::all_serial(2);
    let fwd = |items: &[usize]| {
        let input = build_sequence_input(items, &f.sentences).unwrap();
        let p = model.forward(&input, &[Collab::User(0)], &g).unwrap();
        p.last_marker_state().unwrap().to_vec()
    };
    assert_ne!(fwd(&[1, 2, 3]), fwd(&[2, 1, 3]));
}

#[test]
fn collab_row_is_invisible_to_causal_only_paths() {
    let f = fixture(20, 3, 1);
    let model = Model::new(f.config.clone(), None, 0).unwrap();
    let g = ArchitectureGenome::all_serial(2);
    let input = build_sequence_input(&[1, 2], &f.sentences).unwrap();
    let a = model.forward(&input, &[Collab::User(0)], &g).unwrap();
    let b = model.forward(&input, &[Collab::User(1)], &g).unwrap();
    assert!(a.hidden.max_abs_diff(&b.hidden) > 0.0);

    let mut plain_cfg = f.config.clone();
    plain_cfg.replace_every = 5;
    plain_cfg.layers = 2;
    let plain = Model::new(plain_cfg, None, 0).unwrap();
    let g1 = ArchitectureGenome::all_serial(1);
    // layer 0 is the only mixture layer; zero its gate towards the causal expert
    let mut plain = plain;
    let gate_b = plain.store().id("layers.0.moe.gate.b").unwrap();
    plain.store_mut().get_mut(gate_b).as_mut_slice().copy_from_slice(&[800.0, -800.0]);
    let a = plain.forward(&input, &[Collab::User(0)], &g1).unwrap();
    let b = plain.forward(&input, &[Collab::User(1)], &g1).unwrap();
    assert!(a.hidden.max_abs_diff(&b.hidden) == 0.0);
}

#[test]
fn long_inputs_drop_oldest_items() {
    let mut f = fixture(20, 3, 1);
    f.config.max_len = 9;
    let model = Model::new(f.config.clone(), None, 0).unwrap();
    let g = ArchitectureGenome::all_serial(2);
    let items = [0usize, 1, 2, 3, 4, 5];
    let input = build_sequence_input(&items, &f.sentences).unwrap();
    let pass = model.forward(&input, &[Collab::User(0)], &g).unwrap();
    assert!(pass.dropped_items > 0);
    assert!(pass.hidden.rows() <= 9);
    assert_eq!(pass.markers.len() + pass.dropped_items, items.len());
}

#[test]
fn batch_loss_closed_form_at_uniform_head() {
    let (mut model, genome, f, mut cfg) = objective_setup(0, CollabMode::Single, false);
    let (hw, hb) = model.head_ids();
    model.store_mut().get_mut(hw).fill(0.0);
    model.store_mut().get_mut(hb).fill(0.0);
    cfg.weights = LossWeights { align: 0.0, cl: 0.0, cf: 0.0 };
    let ctx = TrainContext {
        sentences: &f.sentences,
        prompt: &f.prompt,
        vocab_len: 50,
        hard: &f.hard,
        cooccurrence: &f.cooc,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let plan = plan_batch(&f.train, vec![0, 1, 2], &ctx, &cfg, 20, &mut rng);
    let l = batch_loss(&model, &genome, &f.train, &plan, &ctx, &cfg, None).unwrap();
    assert!((l.l_seq - 20f64.ln()).abs() < 1e-9);
    assert!((l.l_align - 20f64.ln()).abs() < 1e-9);
    assert_eq!(l.total, l.l_seq);
}
