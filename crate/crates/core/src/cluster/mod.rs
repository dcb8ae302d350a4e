//! Document embeddings, k-means clustering and clustering metrics.

mod kmeans;
mod metrics;

pub use kmeans::{kmeans, KMeansInit, KMeansOptions, KMeansResult};
pub use metrics::{clustering_accuracy, hungarian, nmi, ContingencyTable};

use serde::{Deserialize, Serialize};

use crate::data::Document;
use crate::downstream::{encode_documents, modality_adaptive_attention};
use crate::error::{invalid, Error, Result};
use crate::model::SelfDocModel;
use crate::numerics::{Graph, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingMode {
    /// Mean over proposals of `[lang; visn; bbox]`.
    Input,
    /// Mean over proposals of the fused model outputs.
    Model,
}

impl EmbeddingMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "input" => Ok(Self::Input),
            "model" => Ok(Self::Model),
            other => Err(Error::Config(format!(
                "unknown embedding mode `{other}` (expected input or model)"
            ))),
        }
    }
}

fn mean_rows<'a>(rows: impl Iterator<Item = &'a [f64]>) -> Vec<f64> {
    let mut sum: Vec<f64> = Vec::new();
    let mut n = 0usize;
    for r in rows {
        if sum.is_empty() {
            sum = vec![0.0; r.len()];
        }
        sum.iter_mut().zip(r).for_each(|(s, v)| *s += v);
        n += 1;
    }
    sum.iter_mut().for_each(|s| *s /= n as f64);
    sum
}

/// Input-embedding representation of one document.
pub fn input_embedding(doc: &Document) -> Result<Vec<f64>> {
    if doc.is_empty() {
        return invalid(format!("document `{}` has no proposals", doc.doc_id));
    }
    let rows: Vec<Vec<f64>> = doc
        .proposals
        .iter()
        .map(|p| p.lang.iter().chain(&p.visn).chain(&p.bbox).copied().collect())
        .collect();
    Ok(mean_rows(rows.iter().map(Vec::as_slice)))
}

/// Embeddings of every document in the requested mode. Model mode needs
/// `model` and averages fused states over proposal slots only.
pub fn doc_embeddings(docs: &[Document], mode: EmbeddingMode, model: Option<&SelfDocModel>) -> Result<Vec<Vec<f64>>> {
    match mode {
        EmbeddingMode::Input => docs.iter().map(input_embedding).collect(),
        EmbeddingMode::Model => {
            let model = model.ok_or_else(|| Error::Config("model embeddings need a checkpoint".into()))?;
            if let Some(d) = docs.iter().find(|d| d.is_empty()) {
                return invalid(format!("document `{}` has no proposals", d.doc_id));
            }
            let states = encode_documents(model, docs, 16)?;
            states
                .iter()
                .zip(docs)
                .map(|(st, doc)| {
                    let rows: Vec<usize> = (1..=doc.len()).collect();
                    let mut g = Graph::frozen(&model.params);
                    let t = g.tape.constant(st.text.clone())?;
                    let v = g.tape.constant(st.visn.clone())?;
                    let t = g.tape.gather_rows(t, &rows)?;
                    let v = g.tape.gather_rows(v, &rows)?;
                    let (fused, _) = modality_adaptive_attention(&mut g, &model.maa, t, v)?;
                    let fused: &Tensor = g.tape.value(fused);
                    Ok(mean_rows((0..fused.rows()).map(|r| fused.row(r))))
                })
                .collect()
        }
    }
}

/// Summary written by the clustering command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterReport {
    pub k: usize,
    pub n: usize,
    pub acc: f64,
    pub nmi: f64,
    pub inertia: f64,
    pub seed: u64,
    pub mode: EmbeddingMode,
}

/// Embeds, clusters and scores documents against their class labels.
pub fn cluster_documents(
    docs: &[Document],
    mode: EmbeddingMode,
    model: Option<&SelfDocModel>,
    opts: &KMeansOptions,
) -> Result<ClusterReport> {
    let truth: Vec<usize> = docs
        .iter()
        .map(|d| {
            d.class_label
                .ok_or_else(|| Error::Invalid(format!("document `{}` has no class label", d.doc_id)))
        })
        .collect::<Result<_>>()?;
    let x = doc_embeddings(docs, mode, model)?;
    let r = kmeans(&x, opts)?;
    Ok(ClusterReport {
        k: opts.k,
        n: docs.len(),
        acc: clustering_accuracy(&r.labels, &truth)?,
        nmi: nmi(&r.labels, &truth)?,
        inertia: r.inertia,
        seed: opts.seed,
        mode,
    })
}
