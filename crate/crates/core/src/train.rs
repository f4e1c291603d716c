//! Batch planning, the combined objective and the optimizer loop.

use std::collections::{BTreeMap, HashSet};
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cf::sample_unobserved;
use crate::corpus::{
    build_alignment_input, build_sequence_input, sample_contrastive_batch, ContrastiveSample, Cooccurrence,
    HardSampleIndex, ItemSentence, TrainExample,
};
use crate::model::{ArchitectureGenome, Model};
use crate::numerics::{AdamW, Differentiable, Tensor2D, WarmupCosine};
use crate::objectives::{align_loss, bpr_triple, infonce_loss, seq_loss, total_loss, LossBreakdown, LossWeights};
use crate::{Error, Gradients, Params, Result, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub warmup_fraction: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Contrastive anchors per sequence.
    pub n_s: usize,
    /// Negatives per contrastive anchor.
    pub n_cl: usize,
    pub tau: f64,
    pub weights: LossWeights,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            lr: 5e-5,
            warmup_fraction: 0.06,
            weight_decay: 0.0,
            batch_size: 8,
            n_s: 1,
            n_cl: 5,
            tau: 1.0,
            weights: LossWeights::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Invalid("batch_size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Invalid("lr must be positive".into()));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Invalid("tau must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::Invalid("warmup_fraction must be in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Catalog data shared by every batch.
#[derive(Clone, Copy, Debug)]
pub struct TrainContext<'a> {
    pub sentences: &'a [ItemSentence],
    pub prompt: &'a [usize],
    pub vocab_len: usize,
    pub hard: &'a HardSampleIndex,
    pub cooccurrence: &'a Cooccurrence,
}

/// Everything random about one batch, drawn up front.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchPlan {
    pub examples: Vec<usize>,
    /// `(slot in examples, sample)`; `anchor_pos` indexes the example's inputs.
    pub contrastive: Vec<(usize, ContrastiveSample)>,
    /// `(user, positive, negative)` per observed interaction.
    pub bpr: Vec<(usize, usize, usize)>,
}

impl BatchPlan {
    /// Items whose `[ALIGN]` state the batch needs: contrastive positives and
    /// negatives, deduplicated and sorted.
    pub fn alignment_items(&self) -> Vec<usize> {
        let mut items: Vec<usize> = self
            .contrastive
            .iter()
            .flat_map(|(_, s)| std::iter::once(s.positive).chain(s.negatives.iter().copied()))
            .collect();
        items.sort_unstable();
        items.dedup();
        items
    }
}

pub fn plan_batch<R: Rng + ?Sized>(
    train: &[TrainExample],
    examples: Vec<usize>,
    ctx: &TrainContext<'_>,
    cfg: &TrainConfig,
    n_items: usize,
    rng: &mut R,
) -> BatchPlan {
    let mut contrastive = Vec::new();
    let mut bpr = Vec::new();
    for (slot, &e) in examples.iter().enumerate() {
        let ex = &train[e];
        let chain = ex.chain();
        for s in sample_contrastive_batch(&chain, cfg.n_s, cfg.n_cl, ctx.hard, ctx.cooccurrence, rng) {
            if !s.negatives.is_empty() {
                contrastive.push((slot, s));
            }
        }
        let observed: HashSet<usize> = chain.iter().copied().collect();
        for &pos in &chain {
            if let Some(neg) = sample_unobserved(&observed, n_items, rng) {
                bpr.push((ex.user_id, pos, neg));
            }
        }
    }
    BatchPlan {
        examples,
        contrastive,
        bpr,
    }
}

/// Combined loss of one batch. With `grads`, also accumulates the gradient
/// of the weighted total.
pub fn batch_loss(
    model: &Model,
    genome: &ArchitectureGenome,
    train: &[TrainExample],
    plan: &BatchPlan,
    ctx: &TrainContext<'_>,
    cfg: &TrainConfig,
    grads: Option<&mut Gradients>,
) -> Result<LossBreakdown> {
    let d = model.config().d_model;
    let w = cfg.weights;

    // sequence passes
    let mut seq_passes = Vec::with_capacity(plan.examples.len());
    let mut seq_rows: Vec<Vec<f64>> = Vec::new();
    let mut seq_targets = Vec::new();
    let mut row_of: Vec<BTreeMap<usize, usize>> = Vec::with_capacity(plan.examples.len());
    for &e in &plan.examples {
        let ex = &train[e];
        let input = build_sequence_input(&ex.inputs, ctx.sentences)?;
        let collab = model.sequence_collab(ex.user_id, &ex.inputs);
        let pass = model.forward(&input, &collab, genome)?;
        let mut map = BTreeMap::new();
        for (j, &m) in pass.markers.iter().enumerate() {
            let pos = pass.dropped_items + j;
            map.insert(pos, seq_rows.len());
            seq_rows.push(pass.hidden.row(m).to_vec());
            seq_targets.push(ex.targets.get(pos).copied());
        }
        row_of.push(map);
        seq_passes.push(pass);
    }
    let h_seq = Tensor2D::from_rows(&seq_rows);
    let (head_w, head_b) = model.head();
    let seq = seq_loss(&h_seq, &seq_targets, head_w, head_b)?;

    // alignment passes
    let align_items = plan.alignment_items();
    let mut align_passes = Vec::with_capacity(align_items.len());
    let mut align_rows = Vec::with_capacity(align_items.len());
    for &item in &align_items {
        let sentence = ctx
            .sentences
            .get(item)
            .ok_or(Error::OutOfRange { index: item, len: ctx.sentences.len() })?;
        let input = build_alignment_input(sentence, ctx.prompt, ctx.vocab_len)?;
        let pass = model.forward(&input, &model.alignment_collab(item), genome)?;
        align_rows.push(pass.last_marker_state().expect("alignment marker").to_vec());
        align_passes.push(pass);
    }
    let h_align = if align_rows.is_empty() {
        Tensor2D::zeros(0, d)
    } else {
        Tensor2D::from_rows(&align_rows)
    };
    let align = align_loss(&h_align, &align_items, head_w, head_b)?;
    let l_align = if align_items.is_empty() { 0.0 } else { align.loss };

    // contrastive
    let mut d_seq = seq.d_hidden.clone();
    let mut d_align = align.d_hidden.scaled(w.align);
    let align_index = |item: usize| align_items.binary_search(&item).expect("planned alignment item");
    let usable: Vec<(usize, &ContrastiveSample)> = plan
        .contrastive
        .iter()
        .filter_map(|(slot, s)| row_of[*slot].get(&s.anchor_pos).map(|&r| (r, s)))
        .collect();
    let mut l_cl = 0.0;
    if !usable.is_empty() {
        let inv = 1.0 / usable.len() as f64;
        for (row, s) in &usable {
            let negs: Vec<&[f64]> = s.negatives.iter().map(|&n| h_align.row(align_index(n))).collect();
            let g = infonce_loss(h_seq.row(*row), h_align.row(align_index(s.positive)), &negs, cfg.tau)?;
            l_cl += g.loss * inv;
            let c = w.cl * inv;
            for (o, &x) in d_seq.row_mut(*row).iter_mut().zip(&g.d_anchor) {
                *o += c * x;
            }
            for (o, &x) in d_align.row_mut(align_index(s.positive)).iter_mut().zip(&g.d_positive) {
                *o += c * x;
            }
            for (&n, dn) in s.negatives.iter().zip(&g.d_negatives) {
                for (o, &x) in d_align.row_mut(align_index(n)).iter_mut().zip(dn) {
                    *o += c * x;
                }
            }
        }
    }

    // collaborative
    let (cf_user, cf_item) = model.cf_ids();
    let users = model.store().get(cf_user);
    let items = model.store().get(cf_item);
    let mut l_cf = 0.0;
    let mut d_users = Tensor2D::zeros(users.rows(), users.cols());
    let mut d_items = Tensor2D::zeros(items.rows(), items.cols());
    if !plan.bpr.is_empty() {
        let inv = 1.0 / plan.bpr.len() as f64;
        for &(u, p, n) in &plan.bpr {
            let g = bpr_triple(users, items, u, p, n)?;
            l_cf += g.loss * inv;
            let c = w.cf * inv;
            for (o, &x) in d_users.row_mut(u).iter_mut().zip(&g.d_user) {
                *o += c * x;
            }
            for (o, &x) in d_items.row_mut(p).iter_mut().zip(&g.d_pos) {
                *o += c * x;
            }
            for (o, &x) in d_items.row_mut(n).iter_mut().zip(&g.d_neg) {
                *o += c * x;
            }
        }
    }

    let breakdown = total_loss(seq.loss, l_align, l_cl, l_cf, &w);
    if let Some(grads) = grads {
        let (hw, hb) = model.head_ids();
        grads.accumulate(hw, &seq.d_w);
        grads.accumulate(hb, &seq.d_b);
        if !align_items.is_empty() {
            grads.accumulate_scaled(hw, &align.d_w, w.align);
            grads.accumulate_scaled(hb, &align.d_b, w.align);
        }
        grads.accumulate(cf_user, &d_users);
        grads.accumulate(cf_item, &d_items);
        for ((pass, map), _) in seq_passes.iter().zip(&row_of).zip(&plan.examples) {
            let mut dm = Tensor2D::zeros(pass.markers.len(), d);
            for (j, &r) in map.values().enumerate() {
                dm.row_mut(j).copy_from_slice(d_seq.row(r));
            }
            model.backward(pass, &pass.scatter_marker_grads(&dm), grads)?;
        }
        for (k, pass) in align_passes.iter().enumerate() {
            let dm = Tensor2D::row_vector(d_align.row(k));
            model.backward(pass, &pass.scatter_marker_grads(&dm), grads)?;
        }
    }
    Ok(breakdown)
}

/// The combined loss of a fixed batch as a function of the parameter store.
pub struct BatchObjective<'a> {
    pub model: &'a Model,
    pub genome: &'a ArchitectureGenome,
    pub train: &'a [TrainExample],
    pub plan: &'a BatchPlan,
    pub ctx: TrainContext<'a>,
    pub cfg: &'a TrainConfig,
}

impl BatchObjective<'_> {
    fn with_store(&self, store: &Params) -> Model {
        Model::from_store(self.model.config().clone(), store.clone()).expect("store layout matches model")
    }
}

impl Differentiable<f64> for BatchObjective<'_> {
    fn loss(&self, store: &Params) -> f64 {
        let m = self.with_store(store);
        batch_loss(&m, self.genome, self.train, self.plan, &self.ctx, self.cfg, None)
            .expect("batch loss")
            .total
    }

    fn loss_and_grads(&self, store: &Params) -> (f64, Gradients) {
        let m = self.with_store(store);
        let mut g = store.zero_grads();
        let l = batch_loss(&m, self.genome, self.train, self.plan, &self.ctx, self.cfg, Some(&mut g)).expect("batch loss");
        (l.total, g)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
}

pub fn steps_per_epoch(n_examples: usize, batch_size: usize) -> usize {
    n_examples.div_ceil(batch_size)
}

/// AdamW with linear warmup and cosine decay. `on_step` sees every step.
pub fn train(
    model: &mut Model,
    genome: &ArchitectureGenome,
    train: &[TrainExample],
    ctx: &TrainContext<'_>,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepLog),
) -> Result<Vec<StepLog>> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::EmptySplit);
    }
    let n_items = model.config().n_items;
    let per_epoch = steps_per_epoch(train.len(), cfg.batch_size);
    let schedule = WarmupCosine::new(cfg.lr, per_epoch * cfg.epochs, cfg.warmup_fraction);
    let mut opt = AdamW::new(model.store(), cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut logs = Vec::with_capacity(per_epoch * cfg.epochs);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let plan = plan_batch(train, chunk.to_vec(), ctx, cfg, n_items, &mut rng);
            let mut grads = model.store().zero_grads();
            let loss = batch_loss(model, genome, train, &plan, ctx, cfg, Some(&mut grads))?;
            if !loss.total.is_finite() || !grads.all_finite() {
                return Err(Error::Invalid(format!("non-finite loss at step {step}")));
            }
            let lr = schedule.lr(step);
            opt.step(model.store_mut(), &grads, lr);
            let log = StepLog { epoch, step, lr, loss };
            on_step(&log);
            logs.push(log);
            step += 1;
        }
    }
    Ok(logs)
}

/// Per-epoch means of every loss term.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: usize,
    pub last_lr: f64,
    pub loss: LossBreakdown,
}

pub fn epoch_summaries(logs: &[StepLog]) -> Vec<EpochLog> {
    let mut out: Vec<EpochLog> = Vec::new();
    for l in logs {
        if out.last().is_none_or(|e| e.epoch != l.epoch) {
            out.push(EpochLog {
                epoch: l.epoch,
                steps: 0,
                last_lr: l.lr,
                loss: LossBreakdown::default(),
            });
        }
        let e = out.last_mut().expect("pushed above");
        e.steps += 1;
        e.last_lr = l.lr;
        e.loss.l_seq += l.loss.l_seq;
        e.loss.l_align += l.loss.l_align;
        e.loss.l_cl += l.loss.l_cl;
        e.loss.l_cf += l.loss.l_cf;
        e.loss.total += l.loss.total;
    }
    for e in &mut out {
        let k = e.steps as f64;
        e.loss.l_seq /= k;
        e.loss.l_align /= k;
        e.loss.l_cl /= k;
        e.loss.l_cf /= k;
        e.loss.total /= k;
    }
    out
}

/// Writes one CSV row per epoch, preceded by `# comment` lines.
pub fn write_loss_csv(path: &Path, logs: &[StepLog], comments: &[String]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for c in comments {
        writeln!(f, "# {c}")?;
    }
    writeln!(f, "epoch,steps,lr,l_seq,l_align,l_cl,l_cf,total")?;
    for e in epoch_summaries(logs) {
        writeln!(
            f,
            "{},{},{:e},{:e},{:e},{:e},{:e},{:e}",
            e.epoch, e.steps, e.last_lr, e.loss.l_seq, e.loss.l_align, e.loss.l_cl, e.loss.l_cf, e.loss.total
        )?;
    }
    f.flush()?;
    Ok(())
}

/// Item logits for the last `[SEQ]` of `context`.
pub fn score_items(
    model: &Model,
    genome: &ArchitectureGenome,
    user: usize,
    context: &[usize],
    sentences: &[ItemSentence],
) -> Result<Vec<f64>> {
    let input = build_sequence_input(context, sentences)?;
    let pass = model.forward(&input, &model.sequence_collab(user, context), genome)?;
    let h = pass
        .last_marker_state()
        .ok_or_else(|| Error::Invalid("context has no items".into()))?;
    let logits: Tensor = model.item_logits(&Tensor2D::row_vector(h));
    Ok(logits.into_vec())
}
