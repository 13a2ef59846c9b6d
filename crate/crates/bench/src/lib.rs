//! Shared fixtures for the benchmarks.

use warmstart::corpus::{CorpusPreset, Document};
use warmstart::model::{Batch, ModelConfig};
use warmstart::synthetic::SyntheticLanguage;
use warmstart::tokenizer::{train_bpe, Specials, Tokenizer};
use warmstart::training::PretrainData;

pub fn corpus(docs_per_source: usize) -> Vec<Document> {
    SyntheticLanguage::new(1, 120, 6).preset(CorpusPreset::Small, docs_per_source, 42)
}

pub fn tokenizer(docs: &[Document], vocab_size: usize) -> Tokenizer {
    train_bpe(docs.iter().cloned(), vocab_size, &Specials::default()).expect("fixture tokenizer")
}

/// The model size the CLI defaults to, over `vocab` tokens.
pub fn model(vocab: usize) -> ModelConfig {
    ModelConfig::desk(vocab)
}

pub fn batch(tok: &Tokenizer, docs: &[Document], config: &ModelConfig, size: usize) -> Batch {
    PretrainData::new(tok, docs, config.max_seq_len, 0.15)
        .and_then(|d| d.batch(0, 1, size, 0.1))
        .expect("fixture batch")
}
