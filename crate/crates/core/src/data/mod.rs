//! Proposal/document data model, corpus files, batching and synthetic data.

mod batch;
mod corpus;
mod synth;
mod types;

pub use batch::{
    bucket_batches, bucket_plan, bucket_plan_shuffled, collate, truncate_or_keep, Batch, TokenKind,
    DEFAULT_GROUP_THRESHOLD, DEFAULT_MAX_LEN,
};
pub use corpus::{
    corpus_to_string, load_corpus, parse_corpus, save_corpus, save_corpus_with_sidecar, Corpus, CorpusHeader,
    CORPUS_VERSION,
};
pub use synth::{
    cross_modal_task, entity_rule, synth_generate, Archetypes, CrossTaskConfig, GeneratorConfig, ROLE_COUNT,
    SLOTS_PER_TEMPLATE,
};
pub use types::{
    make_special_tokens, Category, Document, EntityLabel, Modality, Proposal, SpecialToken, PAGE_BBOX, SEP_BBOX,
};
