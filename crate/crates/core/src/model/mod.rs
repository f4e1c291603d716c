//! Frozen decoder stack with mixture-of-experts adapter layers, the item
//! head and the collaborative prefix.

mod blocks;
mod config;
mod genome;

pub use blocks::{
    adapter_backward, adapter_forward, ffn_backward, ffn_forward, gate_backward, gate_fuse, AdapterCache,
    AdapterGrads, AdapterWeights, FfnCache, FfnWeights, GateCache,
};
pub use config::{CollabMode, ModelConfig};
pub use genome::{ArchitectureGenome, GenomeFile, LayerGenes, Placement, GENOME_LAYOUT};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::attention::{
    build_causal_mask, build_context_mask, masked_self_attention, masked_self_attention_backward,
    AttentionCache, AttentionParams, MaskMatrix,
};
use crate::cf::{cf_init, CfEmbeddings, CfMode};
use crate::corpus::{ModelInput, NUM_RESERVED};
use crate::numerics::{LayerNormCache, ParamId, Tensor2D};
use crate::{Error, Gradients, Params, Result, Tensor};

/// Source of one collaborative prefix row.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Collab {
    User(usize),
    Item(usize),
}

#[derive(Clone, Copy, Debug)]
struct AttnIds {
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct AdapterIds {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct MoeIds {
    causal: AdapterIds,
    context: AdapterIds,
    rec: AdapterIds,
    gate_w: ParamId,
    gate_b: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct LayerIds {
    attn: AttnIds,
    ln1_g: ParamId,
    ln1_b: ParamId,
    ffn_w1: ParamId,
    ffn_b1: ParamId,
    ffn_w2: ParamId,
    ffn_b2: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    moe: Option<MoeIds>,
}

#[derive(Clone, Debug)]
struct ModelIds {
    tok_emb: ParamId,
    special_emb: ParamId,
    pos_emb: ParamId,
    layers: Vec<LayerIds>,
    collab_user_w: ParamId,
    collab_user_b: ParamId,
    collab_item_w: ParamId,
    collab_item_b: ParamId,
    head_w: ParamId,
    head_b: ParamId,
    cf_user: ParamId,
    cf_item: ParamId,
}

fn layer_prefix(k: usize) -> String {
    format!("layers.{k}")
}

impl ModelIds {
    fn resolve(config: &ModelConfig, store: &Params) -> Result<Self> {
        let d = config.d_model;
        let lookup = |name: String, shape: (usize, usize)| -> Result<ParamId> {
            let id = store
                .id(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            let got = store.get(id).shape();
            if got != shape {
                return Err(Error::Checkpoint(format!("tensor {name} has shape {got:?}, expected {shape:?}")));
            }
            Ok(id)
        };
        let adapter = |prefix: String| -> Result<AdapterIds> {
            Ok(AdapterIds {
                w1: lookup(format!("{prefix}.w1"), (d, config.bottleneck))?,
                b1: lookup(format!("{prefix}.b1"), (1, config.bottleneck))?,
                w2: lookup(format!("{prefix}.w2"), (config.bottleneck, d))?,
                b2: lookup(format!("{prefix}.b2"), (1, d))?,
            })
        };
        let mut layers = Vec::with_capacity(config.layers);
        for k in 0..config.layers {
            let p = layer_prefix(k);
            let attn = AttnIds {
                wq: lookup(format!("{p}.attn.wq"), (d, d))?,
                bq: lookup(format!("{p}.attn.bq"), (1, d))?,
                wk: lookup(format!("{p}.attn.wk"), (d, d))?,
                bk: lookup(format!("{p}.attn.bk"), (1, d))?,
                wv: lookup(format!("{p}.attn.wv"), (d, d))?,
                bv: lookup(format!("{p}.attn.bv"), (1, d))?,
                wo: lookup(format!("{p}.attn.wo"), (d, d))?,
                bo: lookup(format!("{p}.attn.bo"), (1, d))?,
            };
            let moe = if config.is_moe_layer(k) {
                Some(MoeIds {
                    causal: adapter(format!("{p}.moe.causal"))?,
                    context: adapter(format!("{p}.moe.context"))?,
                    rec: adapter(format!("{p}.moe.rec"))?,
                    gate_w: lookup(format!("{p}.moe.gate.w"), (2 * d, 2))?,
                    gate_b: lookup(format!("{p}.moe.gate.b"), (1, 2))?,
                })
            } else {
                None
            };
            layers.push(LayerIds {
                attn,
                ln1_g: lookup(format!("{p}.ln1.gain"), (1, d))?,
                ln1_b: lookup(format!("{p}.ln1.bias"), (1, d))?,
                ffn_w1: lookup(format!("{p}.ffn.w1"), (d, config.ffn_dim))?,
                ffn_b1: lookup(format!("{p}.ffn.b1"), (1, config.ffn_dim))?,
                ffn_w2: lookup(format!("{p}.ffn.w2"), (config.ffn_dim, d))?,
                ffn_b2: lookup(format!("{p}.ffn.b2"), (1, d))?,
                ln2_g: lookup(format!("{p}.ln2.gain"), (1, d))?,
                ln2_b: lookup(format!("{p}.ln2.bias"), (1, d))?,
                moe,
            });
        }
        Ok(Self {
            tok_emb: lookup("embed.tokens".into(), (config.vocab_size, d))?,
            special_emb: lookup("embed.special".into(), (NUM_RESERVED, d))?,
            pos_emb: lookup("embed.positions".into(), (config.max_len, d))?,
            layers,
            collab_user_w: lookup("collab.user.w".into(), (config.d_cf, d))?,
            collab_user_b: lookup("collab.user.b".into(), (1, d))?,
            collab_item_w: lookup("collab.item.w".into(), (config.d_cf, d))?,
            collab_item_b: lookup("collab.item.b".into(), (1, d))?,
            head_w: lookup("head.w".into(), (d, config.n_items))?,
            head_b: lookup("head.b".into(), (1, config.n_items))?,
            cf_user: lookup("cf.user".into(), (config.n_users, config.d_cf))?,
            cf_item: lookup("cf.item".into(), (config.n_items, config.d_cf))?,
        })
    }
}

fn build_store(config: &ModelConfig, cf: CfEmbeddings, seed: u64) -> Params {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = config.d_model;
    let mut normal = |rows: usize, cols: usize, std: f64| -> Tensor {
        let n = Normal::new(0.0, std).expect("valid normal");
        Tensor2D::from_fn(rows, cols, |_, _| n.sample(&mut rng))
    };
    let ones = |cols: usize| Tensor2D::from_vec(1, cols, vec![1.0; cols]);
    let inv_sqrt_d = 1.0 / (d as f64).sqrt();
    let mut s = Params::new();
    s.insert("embed.tokens", normal(config.vocab_size, d, 1.0), true);
    s.insert("embed.special", normal(NUM_RESERVED, d, 1.0), false);
    s.insert("embed.positions", normal(config.max_len, d, 0.2), true);
    for k in 0..config.layers {
        let p = layer_prefix(k);
        for w in ["wq", "wk", "wv", "wo"] {
            let b = w.replacen('w', "b", 1);
            s.insert(format!("{p}.attn.{w}"), normal(d, d, inv_sqrt_d), true);
            s.insert(format!("{p}.attn.{b}"), Tensor2D::zeros(1, d), true);
        }
        s.insert(format!("{p}.ln1.gain"), ones(d), true);
        s.insert(format!("{p}.ln1.bias"), Tensor2D::zeros(1, d), true);
        s.insert(format!("{p}.ffn.w1"), normal(d, config.ffn_dim, inv_sqrt_d), true);
        s.insert(format!("{p}.ffn.b1"), Tensor2D::zeros(1, config.ffn_dim), true);
        s.insert(
            format!("{p}.ffn.w2"),
            normal(config.ffn_dim, d, 1.0 / (config.ffn_dim as f64).sqrt()),
            true,
        );
        s.insert(format!("{p}.ffn.b2"), Tensor2D::zeros(1, d), true);
        s.insert(format!("{p}.ln2.gain"), ones(d), true);
        s.insert(format!("{p}.ln2.bias"), Tensor2D::zeros(1, d), true);
        if config.is_moe_layer(k) {
            for expert in ["causal", "context", "rec"] {
                let q = format!("{p}.moe.{expert}");
                s.insert(format!("{q}.w1"), normal(d, config.bottleneck, 0.02), false);
                s.insert(format!("{q}.b1"), Tensor2D::zeros(1, config.bottleneck), false);
                s.insert(format!("{q}.w2"), Tensor2D::zeros(config.bottleneck, d), false);
                s.insert(format!("{q}.b2"), Tensor2D::zeros(1, d), false);
            }
            s.insert(format!("{p}.moe.gate.w"), Tensor2D::zeros(2 * d, 2), false);
            s.insert(format!("{p}.moe.gate.b"), Tensor2D::zeros(1, 2), false);
        }
    }
    let proj_std = 1.0 / (config.d_cf as f64).sqrt();
    s.insert("collab.user.w", normal(config.d_cf, d, proj_std), false);
    s.insert("collab.user.b", Tensor2D::zeros(1, d), false);
    s.insert("collab.item.w", normal(config.d_cf, d, proj_std), false);
    s.insert("collab.item.b", Tensor2D::zeros(1, d), false);
    s.insert("head.w", normal(d, config.n_items, inv_sqrt_d), false);
    s.insert("head.b", Tensor2D::zeros(1, config.n_items), false);
    let cf_frozen = config.cf_mode == CfMode::Frozen;
    s.insert("cf.user", cf.user, cf_frozen);
    s.insert("cf.item", cf.item, cf_frozen);
    s
}

struct PlainCache {
    attn: AttentionCache<f64>,
    ln1: LayerNormCache<f64>,
    ffn: FfnCache<f64>,
    ln2: LayerNormCache<f64>,
}

struct MoeCache {
    genes: LayerGenes,
    causal_attn: AttentionCache<f64>,
    context_attn: AttentionCache<f64>,
    causal_ad: AdapterCache<f64>,
    context_ad: AdapterCache<f64>,
    q: Tensor,
    p: Tensor,
    gate: GateCache<f64>,
    ln1: LayerNormCache<f64>,
    ffn: FfnCache<f64>,
    rec_ad: AdapterCache<f64>,
    ln2: LayerNormCache<f64>,
}

enum LayerCache {
    Plain(PlainCache),
    Moe(Box<MoeCache>),
}

/// Everything one forward pass keeps for its backward pass.
pub struct ForwardPass {
    /// Final hidden states, one row per token.
    pub hidden: Tensor,
    /// Positions of `[SEQ]` / `[ALIGN]` tokens after truncation.
    pub markers: Vec<usize>,
    /// Whole items dropped from the front to fit `max_len`.
    pub dropped_items: usize,
    tokens: Vec<usize>,
    collab: Vec<Collab>,
    layers: Vec<LayerCache>,
}

impl ForwardPass {
    /// Hidden states at the marker positions, in order.
    pub fn marker_states(&self) -> Tensor {
        Tensor2D::from_fn(self.markers.len(), self.hidden.cols(), |r, c| {
            self.hidden.get(self.markers[r], c)
        })
    }

    pub fn last_marker_state(&self) -> Option<&[f64]> {
        self.markers.last().map(|&m| self.hidden.row(m))
    }

    /// Scatters per-marker gradients into a full hidden-state gradient.
    pub fn scatter_marker_grads(&self, d_markers: &Tensor) -> Tensor {
        assert_eq!(d_markers.rows(), self.markers.len());
        let mut out = Tensor2D::zeros(self.hidden.rows(), self.hidden.cols());
        for (r, &m) in self.markers.iter().enumerate() {
            for (o, &g) in out.row_mut(m).iter_mut().zip(d_markers.row(r)) {
                *o += g;
            }
        }
        out
    }

    pub fn collab(&self) -> &[Collab] {
        &self.collab
    }
}

fn half(t: &Tensor) -> Tensor {
    t.scaled(0.5)
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    store: Params,
    ids: ModelIds,
}

impl Model {
    /// Fresh model. Frozen blocks and trainable parts both come from `seed`;
    /// CF tables come from `cf` or a seeded Gaussian init.
    pub fn new(config: ModelConfig, cf: Option<CfEmbeddings>, seed: u64) -> Result<Self> {
        config.validate()?;
        let cf = match cf {
            Some(cf) => cf,
            None => cf_init(config.n_users, config.n_items, config.d_cf, seed ^ 0x005e_edcf)?,
        };
        let store = build_store(&config, cf, seed);
        Self::from_store(config, store)
    }

    /// Wraps an existing parameter store, checking names and shapes.
    pub fn from_store(config: ModelConfig, store: Params) -> Result<Self> {
        config.validate()?;
        let ids = ModelIds::resolve(&config, &store)?;
        Ok(Self { config, store, ids })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &Params {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut Params {
        &mut self.store
    }

    pub fn into_store(self) -> Params {
        self.store
    }

    pub fn head_ids(&self) -> (ParamId, ParamId) {
        (self.ids.head_w, self.ids.head_b)
    }

    pub fn cf_ids(&self) -> (ParamId, ParamId) {
        (self.ids.cf_user, self.ids.cf_item)
    }

    pub fn cf_embeddings(&self) -> CfEmbeddings {
        CfEmbeddings {
            user: self.store.get(self.ids.cf_user).clone(),
            item: self.store.get(self.ids.cf_item).clone(),
        }
    }

    /// Prefix rows for a sequence input of `user` over `items`.
    pub fn sequence_collab(&self, user: usize, items: &[usize]) -> Vec<Collab> {
        match (self.config.collab, items.last()) {
            (CollabMode::Both, Some(&last)) => vec![Collab::User(user), Collab::Item(last)],
            _ => vec![Collab::User(user)],
        }
    }

    pub fn alignment_collab(&self, item: usize) -> Vec<Collab> {
        vec![Collab::Item(item)]
    }

    fn check_genome(&self, genome: &ArchitectureGenome) -> Result<()> {
        if genome.len() != self.config.genome_len() {
            return Err(Error::Shape(format!(
                "genome has {} bits, model needs {}",
                genome.len(),
                self.config.genome_len()
            )));
        }
        Ok(())
    }

    fn attn_params(&self, ids: &AttnIds) -> AttentionParams<'_, f64> {
        let s = &self.store;
        AttentionParams {
            wq: s.get(ids.wq),
            bq: s.get(ids.bq).as_slice(),
            wk: s.get(ids.wk),
            bk: s.get(ids.bk).as_slice(),
            wv: s.get(ids.wv),
            bv: s.get(ids.bv).as_slice(),
            wo: s.get(ids.wo),
            bo: s.get(ids.bo).as_slice(),
            heads: self.config.heads,
        }
    }

    fn adapter_weights(&self, ids: &AdapterIds) -> AdapterWeights<'_, f64> {
        let s = &self.store;
        AdapterWeights {
            w1: s.get(ids.w1),
            b1: s.get(ids.b1).as_slice(),
            w2: s.get(ids.w2),
            b2: s.get(ids.b2).as_slice(),
            activation: self.config.adapter_activation,
        }
    }

    fn ffn_weights(&self, l: &LayerIds) -> FfnWeights<'_, f64> {
        let s = &self.store;
        FfnWeights {
            w1: s.get(l.ffn_w1),
            b1: s.get(l.ffn_b1).as_slice(),
            w2: s.get(l.ffn_w2),
            b2: s.get(l.ffn_b2).as_slice(),
        }
    }

    fn collab_parts(&self, c: Collab) -> Result<(ParamId, ParamId, ParamId, usize)> {
        let (w, b, table, idx) = match c {
            Collab::User(u) => (self.ids.collab_user_w, self.ids.collab_user_b, self.ids.cf_user, u),
            Collab::Item(i) => (self.ids.collab_item_w, self.ids.collab_item_b, self.ids.cf_item, i),
        };
        let len = self.store.get(table).rows();
        if idx >= len {
            return Err(Error::OutOfRange { index: idx, len });
        }
        Ok((w, b, table, idx))
    }

    fn collab_rows(&self, collab: &[Collab]) -> Result<Tensor> {
        let d = self.config.d_model;
        let mut out = Tensor2D::zeros(collab.len(), d);
        for (j, &c) in collab.iter().enumerate() {
            let (w, b, table, idx) = self.collab_parts(c)?;
            let e = Tensor2D::row_vector(self.store.get(table).row(idx));
            let mut row = e.matmul(self.store.get(w));
            row.add_assign(self.store.get(b));
            out.row_mut(j).copy_from_slice(row.row(0));
        }
        Ok(out)
    }

    fn embed(&self, tokens: &[usize]) -> Result<Tensor> {
        let d = self.config.d_model;
        let tok = self.store.get(self.ids.tok_emb);
        let special = self.store.get(self.ids.special_emb);
        let pos = self.store.get(self.ids.pos_emb);
        let mut h = Tensor2D::zeros(tokens.len(), d);
        for (t, &id) in tokens.iter().enumerate() {
            if id >= self.config.vocab_size {
                return Err(Error::OutOfRange {
                    index: id,
                    len: self.config.vocab_size,
                });
            }
            let src = if id < NUM_RESERVED { special.row(id) } else { tok.row(id) };
            for ((o, &a), &p) in h.row_mut(t).iter_mut().zip(src).zip(pos.row(t)) {
                *o = a + p;
            }
        }
        Ok(h)
    }

    /// Runs the full stack. Inputs longer than `max_len` lose whole items
    /// from the front, with a warning.
    pub fn forward(&self, input: &ModelInput, collab: &[Collab], genome: &ArchitectureGenome) -> Result<ForwardPass> {
        self.check_genome(genome)?;
        let mut input = input.clone();
        let dropped_items = input.truncate_oldest(self.config.max_len);
        if dropped_items > 0 {
            log::warn!(
                "input exceeds {} tokens; dropped the {dropped_items} oldest item(s)",
                self.config.max_len
            );
        }
        if input.is_empty() {
            return Err(Error::Invalid("model input is empty".into()));
        }
        let segments = input.segments.clone().with_collab(collab.len());
        let causal = build_causal_mask(&segments);
        let context = build_context_mask(&segments);
        let c = self.collab_rows(collab)?;
        let mut h = self.embed(&input.tokens)?;
        let mut caches = Vec::with_capacity(self.config.layers);
        let mut moe_index = 0;
        for l in &self.ids.layers {
            let (out, cache) = match &l.moe {
                None => self.plain_forward(l, &c, &h, &causal),
                Some(m) => {
                    let genes = genome.layer(moe_index);
                    moe_index += 1;
                    self.moe_forward(l, m, genes, &c, &h, &causal, &context)
                }
            };
            h = out;
            caches.push(cache);
        }
        Ok(ForwardPass {
            hidden: h,
            markers: input.markers,
            dropped_items,
            tokens: input.tokens,
            collab: collab.to_vec(),
            layers: caches,
        })
    }

    fn plain_forward(&self, l: &LayerIds, c: &Tensor, h: &Tensor, causal: &MaskMatrix) -> (Tensor, LayerCache) {
        let s = &self.store;
        let x = Tensor2D::vstack(c, h);
        let (attn_out, attn) = masked_self_attention(&x, causal, &self.attn_params(&l.attn));
        let (h1, ln1) = LayerNormCache::forward(&h.add(&attn_out), s.get(l.ln1_g).as_slice(), s.get(l.ln1_b).as_slice());
        let (f, ffn) = ffn_forward(&h1, &self.ffn_weights(l));
        let (h2, ln2) = LayerNormCache::forward(&h1.add(&f), s.get(l.ln2_g).as_slice(), s.get(l.ln2_b).as_slice());
        (h2, LayerCache::Plain(PlainCache { attn, ln1, ffn, ln2 }))
    }

    fn expert_forward(&self, wrapped: &Tensor, input: &Tensor, ids: &AdapterIds, placement: Placement) -> (Tensor, AdapterCache<f64>) {
        let w = self.adapter_weights(ids);
        match placement {
            Placement::Serial => adapter_forward(wrapped, &w),
            Placement::Parallel => {
                let (a, cache) = adapter_forward(input, &w);
                (half(&wrapped.add(&a)), cache)
            }
        }
    }

    /// Returns `(d_wrapped, d_input)`; `d_input` is zero for serial placement.
    fn expert_backward(
        &self,
        cache: &AdapterCache<f64>,
        ids: &AdapterIds,
        placement: Placement,
        dy: &Tensor,
        grads: &mut Gradients,
    ) -> (Tensor, Option<Tensor>) {
        let w = self.adapter_weights(ids);
        let want = grads.wants(ids.w1);
        let (d_wrapped, d_input, g) = match placement {
            Placement::Serial => {
                let (dx, g) = adapter_backward(cache, &w, dy, want);
                (dx, None, g)
            }
            Placement::Parallel => {
                let dh = half(dy);
                let (dx, g) = adapter_backward(cache, &w, &dh, want);
                (dh, Some(dx), g)
            }
        };
        if let Some(g) = g {
            grads.accumulate(ids.w1, &g.w1);
            grads.accumulate(ids.b1, &g.b1);
            grads.accumulate(ids.w2, &g.w2);
            grads.accumulate(ids.b2, &g.b2);
        }
        (d_wrapped, d_input)
    }

    #[allow(clippy::too_many_arguments)]
    fn moe_forward(
        &self,
        l: &LayerIds,
        m: &MoeIds,
        genes: LayerGenes,
        c: &Tensor,
        h: &Tensor,
        causal: &MaskMatrix,
        context: &MaskMatrix,
    ) -> (Tensor, LayerCache) {
        let s = &self.store;
        let x = Tensor2D::vstack(c, h);
        let ap = self.attn_params(&l.attn);
        let (a_causal, causal_attn) = masked_self_attention(&x, causal, &ap);
        let (a_context, context_attn) = masked_self_attention(&x, context, &ap);
        let (q, causal_ad) = self.expert_forward(&a_causal, h, &m.causal, genes.causal);
        let (p, context_ad) = self.expert_forward(&a_context, h, &m.context, genes.context);
        let (fused, gate) = gate_fuse(&q, &p, s.get(m.gate_w), s.get(m.gate_b).as_slice());
        let (h1, ln1) = LayerNormCache::forward(&h.add(&fused), s.get(l.ln1_g).as_slice(), s.get(l.ln1_b).as_slice());
        let (f, ffn) = ffn_forward(&h1, &self.ffn_weights(l));
        let (r, rec_ad) = self.expert_forward(&f, &h1, &m.rec, genes.rec);
        let (h2, ln2) = LayerNormCache::forward(&h1.add(&r), s.get(l.ln2_g).as_slice(), s.get(l.ln2_b).as_slice());
        (
            h2,
            LayerCache::Moe(Box::new(MoeCache {
                genes,
                causal_attn,
                context_attn,
                causal_ad,
                context_ad,
                q,
                p,
                gate,
                ln1,
                ffn,
                rec_ad,
                ln2,
            })),
        )
    }

    fn layer_norm_backward(&self, cache: &LayerNormCache<f64>, g: ParamId, b: ParamId, dy: &Tensor, grads: &mut Gradients) -> Tensor {
        let (dx, dg, db) = cache.backward(self.store.get(g).as_slice(), dy);
        if grads.wants(g) || grads.wants(b) {
            grads.accumulate(g, &Tensor2D::row_vector(&dg));
            grads.accumulate(b, &Tensor2D::row_vector(&db));
        }
        dx
    }

    /// Backprop through attention; adds the collab-row part into `dc` and
    /// returns the token-row part.
    fn attention_backward(
        &self,
        ids: &AttnIds,
        cache: &AttentionCache<f64>,
        d_out: &Tensor,
        dc: &mut Tensor,
        grads: &mut Gradients,
    ) -> Tensor {
        let want = grads.wants(ids.wq);
        let (dx, g) = masked_self_attention_backward(cache, &self.attn_params(ids), d_out, want);
        if let Some(g) = g {
            for (id, t) in [
                (ids.wq, &g.wq),
                (ids.bq, &g.bq),
                (ids.wk, &g.wk),
                (ids.bk, &g.bk),
                (ids.wv, &g.wv),
                (ids.bv, &g.bv),
                (ids.wo, &g.wo),
                (ids.bo, &g.bo),
            ] {
                grads.accumulate(id, t);
            }
        }
        let kc = dc.rows();
        dc.add_assign(&dx.slice_rows(0, kc));
        dx.slice_rows(kc, dx.rows())
    }

    fn layer_backward(&self, l: &LayerIds, cache: &LayerCache, dh2: &Tensor, dc: &mut Tensor, grads: &mut Gradients) -> Tensor {
        match cache {
            LayerCache::Plain(pc) => {
                let dv = self.layer_norm_backward(&pc.ln2, l.ln2_g, l.ln2_b, dh2, grads);
                let mut dh1 = dv.clone();
                dh1.add_assign(&ffn_backward(&pc.ffn, &self.ffn_weights(l), &dv));
                let du = self.layer_norm_backward(&pc.ln1, l.ln1_g, l.ln1_b, &dh1, grads);
                let mut dh = du.clone();
                dh.add_assign(&self.attention_backward(&l.attn, &pc.attn, &du, dc, grads));
                dh
            }
            LayerCache::Moe(mc) => {
                let m = l.moe.as_ref().expect("moe ids for moe cache");
                let s = &self.store;
                let dv = self.layer_norm_backward(&mc.ln2, l.ln2_g, l.ln2_b, dh2, grads);
                let mut dh1 = dv.clone();
                let (df, dh1_rec) = self.expert_backward(&mc.rec_ad, &m.rec, mc.genes.rec, &dv, grads);
                if let Some(x) = dh1_rec {
                    dh1.add_assign(&x);
                }
                dh1.add_assign(&ffn_backward(&mc.ffn, &self.ffn_weights(l), &df));
                let du = self.layer_norm_backward(&mc.ln1, l.ln1_g, l.ln1_b, &dh1, grads);
                let mut dh = du.clone();
                let want_gate = grads.wants(m.gate_w);
                let (dq, dp, gg) = gate_backward(&mc.q, &mc.p, s.get(m.gate_w), &mc.gate, &du, want_gate);
                if let Some((dw, db)) = gg {
                    grads.accumulate(m.gate_w, &dw);
                    grads.accumulate(m.gate_b, &db);
                }
                let (d_causal, dh_c) = self.expert_backward(&mc.causal_ad, &m.causal, mc.genes.causal, &dq, grads);
                let (d_context, dh_x) = self.expert_backward(&mc.context_ad, &m.context, mc.genes.context, &dp, grads);
                for x in [dh_c, dh_x].into_iter().flatten() {
                    dh.add_assign(&x);
                }
                dh.add_assign(&self.attention_backward(&l.attn, &mc.causal_attn, &d_causal, dc, grads));
                dh.add_assign(&self.attention_backward(&l.attn, &mc.context_attn, &d_context, dc, grads));
                dh
            }
        }
    }

    /// Accumulates parameter gradients for `d_hidden`, the loss gradient with
    /// respect to [`ForwardPass::hidden`].
    pub fn backward(&self, pass: &ForwardPass, d_hidden: &Tensor, grads: &mut Gradients) -> Result<()> {
        if d_hidden.shape() != pass.hidden.shape() {
            return Err(Error::Shape(format!(
                "hidden gradient {:?} vs hidden {:?}",
                d_hidden.shape(),
                pass.hidden.shape()
            )));
        }
        let d = self.config.d_model;
        let mut dh = d_hidden.clone();
        let mut dc = Tensor2D::zeros(pass.collab.len(), d);
        for (l, cache) in self.ids.layers.iter().zip(&pass.layers).rev() {
            dh = self.layer_backward(l, cache, &dh, &mut dc, grads);
        }
        for (t, &id) in pass.tokens.iter().enumerate() {
            let row = dh.row(t);
            if id < NUM_RESERVED {
                grads.accumulate_row(self.ids.special_emb, id, row);
            } else {
                grads.accumulate_row(self.ids.tok_emb, id, row);
            }
            grads.accumulate_row(self.ids.pos_emb, t, row);
        }
        for (j, &c) in pass.collab.iter().enumerate() {
            let (w, b, table, idx) = self.collab_parts(c)?;
            let dcj = Tensor2D::row_vector(dc.row(j));
            let e = Tensor2D::row_vector(self.store.get(table).row(idx));
            if grads.wants(w) {
                grads.accumulate(w, &e.t_matmul(&dcj));
            }
            grads.accumulate(b, &dcj);
            if grads.wants(table) {
                let de = dcj.matmul_t(self.store.get(w));
                grads.accumulate_row(table, idx, de.row(0));
            }
        }
        Ok(())
    }

    /// `h·W_item + b_item` for every row of `h`.
    pub fn item_logits(&self, h: &Tensor) -> Tensor {
        let mut out = h.matmul(self.store.get(self.ids.head_w));
        out.add_row_broadcast(self.store.get(self.ids.head_b).as_slice());
        out
    }

    pub fn head(&self) -> (&Tensor, &[f64]) {
        (
            self.store.get(self.ids.head_w),
            self.store.get(self.ids.head_b).as_slice(),
        )
    }

    /// Names of every frozen tensor.
    pub fn frozen_names(&self) -> Vec<String> {
        self.store
            .iter()
            .filter(|(_, p)| p.frozen)
            .map(|(_, p)| p.name.clone())
            .collect()
    }
}
