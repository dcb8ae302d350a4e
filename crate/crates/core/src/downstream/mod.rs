//! Modality-adaptive fusion, task heads, fine-tuning and metrics.

mod finetune;
mod heads;
mod maa;
mod metrics;

pub use finetune::{
    encode_documents, evaluate, finetune, DocStates, Evaluation, FinetuneSettings, LabelValue, PredictionRecord, Task,
    TaskMetrics,
};
pub use heads::{classify_document, document_scores, entity_logits, entity_scores};
pub use maa::{fuse, modality_adaptive_attention, modality_weights, MaaParams};
pub use metrics::{accuracy, micro_f1, micro_prf, PrfScore};
