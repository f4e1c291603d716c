//! Catalog and interaction ingestion, model inputs, splits, hard samples
//! and contrastive batches.

pub mod contrastive;
pub mod hard;
pub mod input;
pub mod io;
pub mod item;
pub mod split;
pub mod vocab;

pub use contrastive::{draw_negatives, sample_contrastive_batch, ContrastiveSample};
pub use hard::{generate_hard_samples, text_embeddings, top_k_for, Cooccurrence, HardSampleIndex};
pub use input::{build_alignment_input, build_sequence_input, ModelInput, DEFAULT_ALIGN_PROMPT};
pub use io::{ingest, Corpus, RawInteraction, RawItem};
pub use item::{flatten_item, ItemRecord, ItemSentence};
pub use split::{leave_one_out_split, EvalCase, InteractionSequence, Split, TrainExample};
pub use vocab::{Vocabulary, ALIGN, NUM_RESERVED, PAD, SEQ, UNK};
