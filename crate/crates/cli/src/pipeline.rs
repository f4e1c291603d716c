//! Stage runner: ingest, hard samples, CF pre-training, search, training
//! and evaluation, each reading and writing artifacts in one directory.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs::{self, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use mixrec_core::bosearch::{bo_search, BoConfig, TraceEntry};
use mixrec_core::cf::{cf_init, train_bpr, BprConfig, CfEmbeddings, CfMode};
use mixrec_core::corpus::io::{hard_samples_from_json, hard_samples_to_json, read_jsonl};
use mixrec_core::corpus::{
    generate_hard_samples, ingest, leave_one_out_split, text_embeddings, top_k_for, Corpus, Cooccurrence,
    EvalCase, HardSampleIndex, RawInteraction, RawItem, Split, TrainExample, DEFAULT_ALIGN_PROMPT,
};
use mixrec_core::evalharness::{evaluate_model, MetricsReport};
use mixrec_core::model::{ArchitectureGenome, CollabMode, GenomeFile, Model, ModelConfig};
use mixrec_core::numerics::{load_checkpoint, save_checkpoint};
use mixrec_core::objectives::LossWeights;
use mixrec_core::train::{train, write_loss_csv, TrainConfig, TrainContext};
use mixrec_core::Params;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{de::DeserializeOwned, Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

pub const DATASET: &str = "dataset.json";
pub const HARD_SAMPLES: &str = "hard_samples.json";
pub const CF_STEM: &str = "cf";
pub const GENOME: &str = "genome.json";
pub const SEARCH_TRACE: &str = "search_trace.jsonl";
pub const MODEL_STEM: &str = "model";
pub const TRAIN_LOG: &str = "train_log.csv";
pub const METRICS: &str = "metrics.json";
pub const CONFIG_COPY: &str = "config.txt";
pub const LOCK: &str = ".lock";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Ingest,
    HardSamples,
    TrainCf,
    Search,
    Train,
    Eval,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::Ingest,
        Stage::HardSamples,
        Stage::TrainCf,
        Stage::Search,
        Stage::Train,
        Stage::Eval,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::HardSamples => "hard-samples",
            Stage::TrainCf => "train-cf",
            Stage::Search => "search",
            Stage::Train => "train",
            Stage::Eval => "eval",
        }
    }

    /// Comma-separated stage names, run in dependency order.
    pub fn parse_list(text: &str) -> CliResult<Vec<Stage>> {
        let mut stages = text
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(Stage::from_str)
            .collect::<CliResult<Vec<_>>>()?;
        stages.sort();
        stages.dedup();
        Ok(stages)
    }
}

impl FromStr for Stage {
    type Err = CliError;

    fn from_str(s: &str) -> CliResult<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| CliError::UnknownStage(s.into()))
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetFile {
    pub provenance: Provenance,
    pub corpus: Corpus,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HardSamplesFile {
    pub provenance: Provenance,
    pub ratio: f64,
    pub k: usize,
    pub empty_sets: usize,
    pub sets: BTreeMap<String, Vec<String>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsFile {
    #[serde(flatten)]
    pub report: MetricsReport,
    pub seed: u64,
    pub genome: String,
    pub genome_hash: String,
    pub config_hash: String,
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Exclusive ownership of an output directory for the lifetime of a run.
pub struct OutputLock {
    path: PathBuf,
}

impl OutputLock {
    pub fn acquire(dir: &Path) -> CliResult<Self> {
        fs::create_dir_all(dir)?;
        let path = dir.join(LOCK);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id())?;
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CliError::Locked(dir.to_path_buf())),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| std::io::Error::other(e.to_string()))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

fn read_json<T: DeserializeOwned>(path: &Path, stage: Stage) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|_| CliError::Missing {
        artifact: path.file_name().map_or_else(String::new, |n| n.to_string_lossy().into_owned()),
        stage: stage.name().into(),
    })?;
    serde_json::from_str(&text).map_err(|e| CliError::Stage {
        stage: stage.name().into(),
        source: e.into(),
    })
}

/// Everything the later stages derive from the dataset artifact.
pub struct Prepared {
    pub corpus: Corpus,
    pub split: Split,
    pub cooccurrence: Cooccurrence,
}

impl Prepared {
    fn new(corpus: Corpus) -> Self {
        let split = leave_one_out_split(&corpus.sequences);
        let chains: Vec<Vec<usize>> = split.train.iter().map(TrainExample::chain).collect();
        let cooccurrence = Cooccurrence::from_sequences(corpus.n_items(), chains.iter().map(Vec::as_slice));
        Self {
            corpus,
            split,
            cooccurrence,
        }
    }

    fn interactions(&self) -> Vec<(usize, Vec<usize>)> {
        self.split.train.iter().map(|e| (e.user_id, e.chain())).collect()
    }

    fn context<'a>(&'a self, hard: &'a HardSampleIndex) -> TrainContext<'a> {
        TrainContext {
            sentences: &self.corpus.sentences,
            prompt: &self.corpus.prompt,
            vocab_len: self.corpus.vocab.len(),
            hard,
            cooccurrence: &self.cooccurrence,
        }
    }
}

pub struct Pipeline {
    pub config: RunConfig,
    pub out: PathBuf,
    pub provenance: Provenance,
}

impl Pipeline {
    pub fn new(config: RunConfig, out: &Path) -> Self {
        let provenance = Provenance {
            config_hash: config.hash(),
            seed: config.seed,
        };
        Self {
            config,
            out: out.to_path_buf(),
            provenance,
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn stage_err(stage: Stage) -> impl Fn(mixrec_core::Error) -> CliError {
        move |source| CliError::Stage {
            stage: stage.name().into(),
            source,
        }
    }

    pub fn model_config(&self, corpus: &Corpus) -> ModelConfig {
        let c = &self.config;
        ModelConfig {
            vocab_size: corpus.vocab.len(),
            d_model: c.d_model,
            heads: c.heads,
            layers: c.layers,
            ffn_dim: c.ffn_dim,
            bottleneck: c.bottleneck,
            max_len: c.max_len,
            n_items: corpus.n_items(),
            n_users: corpus.n_users(),
            d_cf: c.d_cf,
            replace_every: c.replace_every,
            collab: if c.collab_keys == 2 { CollabMode::Both } else { CollabMode::Single },
            adapter_activation: c.adapter_activation,
            cf_mode: c.cf_mode,
        }
    }

    pub fn train_config(&self, epochs: usize) -> TrainConfig {
        let c = &self.config;
        TrainConfig {
            epochs,
            lr: c.lr,
            warmup_fraction: c.warmup_fraction,
            weight_decay: c.weight_decay,
            batch_size: c.batch_size,
            n_s: c.n_s,
            n_cl: c.n_cl,
            tau: c.tau,
            weights: LossWeights {
                align: c.lambda1,
                cl: c.lambda2,
                cf: c.lambda3,
            },
            seed: c.seed,
        }
    }

    /// Runs `stages` in dependency order under the output-directory lock.
    pub fn run(&self, stages: &[Stage]) -> CliResult<()> {
        self.config.validate()?;
        let _lock = OutputLock::acquire(&self.out)?;
        fs::write(self.path(CONFIG_COPY), self.config.to_text())?;
        let mut ordered = stages.to_vec();
        ordered.sort();
        ordered.dedup();
        for stage in ordered {
            log::info!("stage {stage}");
            let result = match stage {
                Stage::Ingest => self.ingest(),
                Stage::HardSamples => self.hard_samples(),
                Stage::TrainCf => self.train_cf(),
                Stage::Search => self.search(),
                Stage::Train => self.train(),
                Stage::Eval => self.eval().map(|_| ()),
            };
            if let Err(e) = result {
                log::error!("stage {stage} failed");
                return Err(e);
            }
        }
        Ok(())
    }

    pub fn ingest(&self) -> CliResult<()> {
        let err = Self::stage_err(Stage::Ingest);
        let need = |p: &Option<PathBuf>, key: &str| {
            p.clone().ok_or_else(|| CliError::Config {
                key: key.into(),
                message: "required by stage ingest".into(),
            })
        };
        let items: Vec<RawItem> = read_jsonl(&need(&self.config.items, "items")?).map_err(&err)?;
        let interactions: Vec<RawInteraction> =
            read_jsonl(&need(&self.config.interactions, "interactions")?).map_err(&err)?;
        let corpus = ingest(&items, &interactions, self.config.max_item_tokens, DEFAULT_ALIGN_PROMPT).map_err(&err)?;
        log::info!(
            "ingested {} items, {} users ({:?})",
            corpus.n_items(),
            corpus.n_users(),
            corpus.stats
        );
        write_json(
            &self.path(DATASET),
            &DatasetFile {
                provenance: self.provenance.clone(),
                corpus,
            },
        )
    }

    pub fn load_prepared(&self, stage: Stage) -> CliResult<Prepared> {
        let _ = stage;
        let file: DatasetFile = read_json(&self.path(DATASET), Stage::Ingest)?;
        let prepared = Prepared::new(file.corpus);
        if prepared.split.train.is_empty() {
            return Err(CliError::Stage {
                stage: stage.name().into(),
                source: mixrec_core::Error::EmptySplit,
            });
        }
        Ok(prepared)
    }

    pub fn hard_samples(&self) -> CliResult<()> {
        let err = Self::stage_err(Stage::HardSamples);
        let p = self.load_prepared(Stage::HardSamples)?;
        let c = &self.config;
        let text = text_embeddings(&p.corpus.sentences, p.corpus.vocab.len(), c.hard_dim, c.seed);
        let mut mf = cf_init(p.corpus.n_users(), p.corpus.n_items(), c.hard_dim, c.seed.wrapping_add(1)).map_err(&err)?;
        let bpr = BprConfig {
            epochs: c.hard_mf_epochs,
            lr: c.cf_lr,
            seed: c.seed.wrapping_add(2),
            ..BprConfig::default()
        };
        train_bpr(&mut mf, &p.interactions(), &bpr).map_err(&err)?;
        let index = generate_hard_samples(&text, &mf.item, &p.cooccurrence, c.hard_ratio).map_err(&err)?;
        if index.empty_count() > 0 {
            log::warn!("{} items have no hard samples; uniform fallback applies", index.empty_count());
        }
        write_json(
            &self.path(HARD_SAMPLES),
            &HardSamplesFile {
                provenance: self.provenance.clone(),
                ratio: c.hard_ratio,
                k: top_k_for(c.hard_ratio, p.corpus.n_items()),
                empty_sets: index.empty_count(),
                sets: hard_samples_to_json(&index, &p.corpus.item_keys),
            },
        )
    }

    fn load_hard(&self, p: &Prepared) -> CliResult<HardSampleIndex> {
        let file: HardSamplesFile = read_json(&self.path(HARD_SAMPLES), Stage::HardSamples)?;
        hard_samples_from_json(&file.sets, &p.corpus.item_keys).map_err(Self::stage_err(Stage::HardSamples))
    }

    pub fn train_cf(&self) -> CliResult<()> {
        let err = Self::stage_err(Stage::TrainCf);
        let p = self.load_prepared(Stage::TrainCf)?;
        let c = &self.config;
        let mut cf = cf_init(p.corpus.n_users(), p.corpus.n_items(), c.d_cf, c.seed.wrapping_add(3)).map_err(&err)?;
        let bpr = BprConfig {
            epochs: c.cf_epochs,
            lr: c.cf_lr,
            seed: c.seed.wrapping_add(4),
            ..BprConfig::default()
        };
        let losses = train_bpr(&mut cf, &p.interactions(), &bpr).map_err(&err)?;
        let mut store = Params::new();
        store.insert("cf.user", cf.user, false);
        store.insert("cf.item", cf.item, false);
        let mut meta = self.provenance_map();
        meta.insert("final_bpr_loss".into(), json!(losses.last().copied().unwrap_or(f64::NAN)));
        save_checkpoint(&store, &self.out, CF_STEM, meta).map_err(&err)?;
        Ok(())
    }

    fn provenance_map(&self) -> serde_json::Map<String, Value> {
        let mut m = serde_json::Map::new();
        m.insert("config_hash".into(), json!(self.provenance.config_hash));
        m.insert("seed".into(), json!(self.provenance.seed));
        m
    }

    /// CF tables for a fresh model: the pre-trained checkpoint if present,
    /// required in frozen mode.
    fn initial_cf(&self, stage: Stage) -> CliResult<Option<CfEmbeddings>> {
        let bin = self.path(&format!("{CF_STEM}.bin"));
        if !bin.exists() {
            if self.config.cf_mode == CfMode::Frozen {
                return Err(CliError::Missing {
                    artifact: format!("{CF_STEM}.bin"),
                    stage: Stage::TrainCf.name().into(),
                });
            }
            return Ok(None);
        }
        let (store, _) = load_checkpoint::<f64>(&self.out, CF_STEM).map_err(Self::stage_err(stage))?;
        let get = |name: &str| {
            store
                .id(name)
                .map(|id| store.get(id).clone())
                .ok_or_else(|| CliError::Stage {
                    stage: stage.name().into(),
                    source: mixrec_core::Error::Checkpoint(format!("cf checkpoint lacks {name}")),
                })
        };
        Ok(Some(CfEmbeddings {
            user: get("cf.user")?,
            item: get("cf.item")?,
        }))
    }

    fn genome_override(&self) -> CliResult<Option<ArchitectureGenome>> {
        self.config
            .genome
            .as_ref()
            .map(|g| {
                ArchitectureGenome::new(g.chars().map(|c| c == '1').collect()).map_err(|e| CliError::Config {
                    key: "genome".into(),
                    message: e.to_string(),
                })
            })
            .transpose()
    }

    /// Seeded subset of training users and their validation cases.
    pub fn search_subset(&self, p: &Prepared) -> (Vec<TrainExample>, Vec<EvalCase>) {
        let mut users: Vec<usize> = p.split.train.iter().map(|e| e.user_id).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed.wrapping_add(5));
        users.shuffle(&mut rng);
        let take = ((self.config.bo_fraction * users.len() as f64).ceil() as usize).clamp(1, users.len());
        let chosen: HashSet<usize> = users[..take].iter().copied().collect();
        let train = p.split.train.iter().filter(|e| chosen.contains(&e.user_id)).cloned().collect();
        let valid = p.split.valid.iter().filter(|c| chosen.contains(&c.user_id)).cloned().collect();
        (train, valid)
    }

    pub fn search(&self) -> CliResult<()> {
        let stage = Stage::Search;
        let err = Self::stage_err(stage);
        let p = self.load_prepared(stage)?;
        let model_cfg = self.model_config(&p.corpus);
        if let Some(g) = self.genome_override()? {
            if g.len() != model_cfg.genome_len() {
                return Err(CliError::Config {
                    key: "genome".into(),
                    message: format!("model needs {} bits", model_cfg.genome_len()),
                });
            }
            log::info!("genome override {}; search skipped", g.to_string_bits());
            return self.write_genome(&g, json!({"source": "override"}));
        }
        let hard = self.load_hard(&p)?;
        let cf = self.initial_cf(stage)?;
        let (sub_train, sub_valid) = self.search_subset(&p);
        if sub_valid.is_empty() {
            return Err(CliError::Stage {
                stage: stage.name().into(),
                source: mixrec_core::Error::EmptySplit,
            });
        }
        let ctx = p.context(&hard);
        let tcfg = self.train_config(self.config.bo_epochs);
        let c = &self.config;
        let bo = BoConfig::new(model_cfg.genome_len(), c.bo_init, c.bo_iterations, c.seed.wrapping_add(6));
        let mut trace = BufWriter::new(fs::File::create(self.path(SEARCH_TRACE))?);
        let mut write_err = None;
        let result = bo_search(
            &bo,
            |genome| {
                let mut model = Model::new(model_cfg.clone(), cf.clone(), c.seed)?;
                train(&mut model, genome, &sub_train, &ctx, &tcfg, |_| {})?;
                let r = evaluate_model(&model, genome, &sub_valid, &p.corpus.sentences, "valid", c.eval_cutoff)?;
                log::info!("genome {} -> valid MRR {:.4}", genome.to_string_bits(), r.mrr);
                Ok(r.mrr)
            },
            |entry: &TraceEntry| {
                let mut line = serde_json::to_value(entry).expect("trace entry serializes");
                line["config_hash"] = json!(self.provenance.config_hash);
                line["seed"] = json!(self.provenance.seed);
                if let Err(e) = writeln!(trace, "{line}").and_then(|_| trace.flush()) {
                    write_err.get_or_insert(e);
                }
            },
        )
        .map_err(&err)?;
        if let Some(e) = write_err {
            return Err(e.into());
        }
        self.write_genome(
            &result.best,
            json!({"source": "search", "best_valid_mrr": result.best_f, "evaluations": result.trace.len()}),
        )
    }

    fn write_genome(&self, genome: &ArchitectureGenome, extra: Value) -> CliResult<()> {
        let mut file = GenomeFile::new(genome, self.config.replace_every);
        let mut prov = self.provenance_map();
        if let Value::Object(m) = extra {
            prov.extend(m);
        }
        file.provenance = Some(Value::Object(prov));
        write_json(&self.path(GENOME), &file)
    }

    pub fn load_genome(&self) -> CliResult<ArchitectureGenome> {
        let file: GenomeFile = read_json(&self.path(GENOME), Stage::Search)?;
        file.genome().map_err(Self::stage_err(Stage::Search))
    }

    pub fn train(&self) -> CliResult<()> {
        let stage = Stage::Train;
        let err = Self::stage_err(stage);
        let p = self.load_prepared(stage)?;
        let hard = self.load_hard(&p)?;
        let genome = self.load_genome()?;
        let cf = self.initial_cf(stage)?;
        let model_cfg = self.model_config(&p.corpus);
        let mut model = Model::new(model_cfg.clone(), cf, self.config.seed).map_err(&err)?;
        let ctx = p.context(&hard);
        let tcfg = self.train_config(self.config.epochs);
        let logs = train(&mut model, &genome, &p.split.train, &ctx, &tcfg, |l| {
            log::debug!("step {} loss {:.4}", l.step, l.loss.total)
        })
        .map_err(&err)?;
        let mut meta = self.provenance_map();
        meta.insert("genome".into(), json!(genome.to_string_bits()));
        meta.insert("model_config".into(), serde_json::to_value(&model_cfg).expect("config serializes"));
        save_checkpoint(model.store(), &self.out, MODEL_STEM, meta).map_err(&err)?;
        write_loss_csv(
            &self.path(TRAIN_LOG),
            &logs,
            &[
                format!("config_hash={}", self.provenance.config_hash),
                format!("seed={}", self.provenance.seed),
            ],
        )
        .map_err(&err)?;
        Ok(())
    }

    pub fn load_model(&self) -> CliResult<Model> {
        let err = Self::stage_err(Stage::Eval);
        if !self.path(&format!("{MODEL_STEM}.json")).exists() {
            return Err(CliError::Missing {
                artifact: format!("{MODEL_STEM}.json"),
                stage: Stage::Train.name().into(),
            });
        }
        let (store, manifest) = load_checkpoint::<f64>(&self.out, MODEL_STEM).map_err(&err)?;
        let cfg: ModelConfig = manifest
            .metadata
            .get("model_config")
            .cloned()
            .ok_or_else(|| mixrec_core::Error::Checkpoint("manifest lacks model_config".into()))
            .and_then(|v| serde_json::from_value(v).map_err(mixrec_core::Error::from))
            .map_err(&err)?;
        Model::from_store(cfg, store).map_err(&err)
    }

    pub fn eval(&self) -> CliResult<MetricsFile> {
        let stage = Stage::Eval;
        let err = Self::stage_err(stage);
        let p = self.load_prepared(stage)?;
        let genome = self.load_genome()?;
        let model = self.load_model()?;
        let report = evaluate_model(
            &model,
            &genome,
            &p.split.test,
            &p.corpus.sentences,
            "test",
            self.config.eval_cutoff,
        )
        .map_err(&err)?;
        let bits = genome.to_string_bits();
        let file = MetricsFile {
            report,
            seed: self.provenance.seed,
            genome_hash: sha256_hex(bits.as_bytes()),
            genome: bits,
            config_hash: self.provenance.config_hash.clone(),
        };
        write_json(&self.path(METRICS), &file)?;
        Ok(file)
    }

    /// Human-readable summary of whatever artifacts exist.
    pub fn report(&self) -> CliResult<String> {
        let mut out = format!("output: {}\n", self.out.display());
        if let Ok(d) = read_json::<DatasetFile>(&self.path(DATASET), Stage::Ingest) {
            out += &format!(
                "dataset: {} items, {} users, vocabulary {}\n",
                d.corpus.n_items(),
                d.corpus.n_users(),
                d.corpus.vocab.len()
            );
        }
        if let Ok(h) = read_json::<HardSamplesFile>(&self.path(HARD_SAMPLES), Stage::HardSamples) {
            out += &format!("hard samples: k={} ratio={} empty sets={}\n", h.k, h.ratio, h.empty_sets);
        }
        if let Ok(g) = read_json::<GenomeFile>(&self.path(GENOME), Stage::Search) {
            let bits: String = g.bits.iter().map(|b| b.to_string()).collect();
            out += &format!("genome: {bits} ({}, r={})\n", g.layout, g.r);
        }
        if let Ok(text) = fs::read_to_string(self.path(SEARCH_TRACE)) {
            out += &format!("search evaluations: {}\n", text.lines().count());
        }
        if let Ok(m) = read_json::<MetricsFile>(&self.path(METRICS), Stage::Eval) {
            out += &format!(
                "{} metrics over {} sequences: MRR {:.4}  Recall@{} {:.4}  NDCG@{} {:.4}\n",
                m.report.split, m.report.count, m.report.mrr, m.report.n, m.report.recall, m.report.n, m.report.ndcg
            );
        }
        Ok(out)
    }
}

/// Convenience wrapper over [`Pipeline::run`].
pub fn run_pipeline(config: &RunConfig, out: &Path, stages: &[Stage]) -> CliResult<()> {
    Pipeline::new(config.clone(), out).run(stages)
}
