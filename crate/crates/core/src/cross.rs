//! Cross-modality encoder and attention export.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::{AttentionKind, ModelConfig};
use crate::data::{Batch, Modality};
use crate::downstream::modality_weights;
use crate::encoders::{AttentionBlock, SeqShape};
use crate::error::{invalid, Result};
use crate::model::SelfDocModel;
use crate::numerics::{Graph, ParamStore, Var};

/// Text-branch and vision-branch parameters of one sub-layer.
#[derive(Clone, Debug)]
pub struct BranchPair {
    pub text: AttentionBlock,
    pub visn: AttentionBlock,
}

/// Which stream feeds queries and keys of each branch's update.
fn sources(kind: AttentionKind, own: Var, other: Var) -> (Var, Var) {
    match kind {
        AttentionKind::SelfAtt => (own, own),
        AttentionKind::Cross1 => (own, other),
        AttentionKind::Cross2 => (other, other),
    }
}

/// Updates both branches from the same `(h_t, h_v)` snapshot.
#[allow(clippy::too_many_arguments)]
pub fn paired_update(
    g: &mut Graph,
    cfg: &ModelConfig,
    seq: &SeqShape,
    kind: AttentionKind,
    h_t: Var,
    h_v: Var,
    params: &BranchPair,
    trace: Option<&str>,
) -> Result<(Var, Var)> {
    let name = |m: Modality| trace.map(|t| format!("{t}.{}.{}", m.tag(), kind.tag()));
    let (q, k) = sources(kind, h_t, h_v);
    let t = params.text.forward(g, cfg, seq, h_t, q, k, name(Modality::Lang))?;
    let (q, k) = sources(kind, h_v, h_t);
    let v = params.visn.forward(g, cfg, seq, h_v, q, k, name(Modality::Visn))?;
    Ok((t, v))
}

/// Own queries against the other stream's keys; own values.
pub fn cross_att_1(
    g: &mut Graph,
    cfg: &ModelConfig,
    seq: &SeqShape,
    h_t: Var,
    h_v: Var,
    params: &BranchPair,
) -> Result<(Var, Var)> {
    paired_update(g, cfg, seq, AttentionKind::Cross1, h_t, h_v, params, None)
}

/// Weights computed entirely within the other stream, applied to own values.
pub fn cross_att_2(
    g: &mut Graph,
    cfg: &ModelConfig,
    seq: &SeqShape,
    h_t: Var,
    h_v: Var,
    params: &BranchPair,
) -> Result<(Var, Var)> {
    paired_update(g, cfg, seq, AttentionKind::Cross2, h_t, h_v, params, None)
}

/// One block: a sub-layer per entry of the configured layout.
#[derive(Clone, Debug)]
pub struct CrossBlock {
    pub layout: Vec<AttentionKind>,
    pub sublayers: Vec<BranchPair>,
}

impl CrossBlock {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, index: usize, cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        let mut sublayers = Vec::with_capacity(cfg.cross_layout.len());
        for s in 0..cfg.cross_layout.len() {
            let text = AttentionBlock::new(store, &format!("cross{index}.text.sub{s}"), cfg, rng)?;
            let visn = AttentionBlock::new(store, &format!("cross{index}.visn.sub{s}"), cfg, rng)?;
            sublayers.push(BranchPair { text, visn });
        }
        Ok(Self {
            layout: cfg.cross_layout.clone(),
            sublayers,
        })
    }
}

/// Runs every block in order; no blocks is the identity.
pub fn cross_encode(
    g: &mut Graph,
    cfg: &ModelConfig,
    seq: &SeqShape,
    h_t: Var,
    h_v: Var,
    blocks: &[CrossBlock],
) -> Result<(Var, Var)> {
    let (mut t, mut v) = (h_t, h_v);
    for (b, block) in blocks.iter().enumerate() {
        for (s, (&kind, params)) in block.layout.iter().zip(&block.sublayers).enumerate() {
            let trace = format!("cross{b}.sub{s}");
            (t, v) = paired_update(g, cfg, seq, kind, t, v, params, Some(&trace))?;
        }
    }
    Ok((t, v))
}

/// Attention weights of one layer for one document; `heads[h][i][j]` is
/// the weight of slot `i` on slot `j`, padding dropped.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerAttention {
    pub name: String,
    pub heads: Vec<Vec<Vec<f64>>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModalityWeights {
    pub w_lang: Vec<f64>,
    pub w_visn: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionRecord {
    pub doc_id: String,
    pub layers: Vec<LayerAttention>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub maa: Option<ModalityWeights>,
}

/// Slices traced `[B * heads, L, L]` weights into per-document records.
/// `maa` holds per-slot `(w_lang, w_visn)` for the whole batch when present.
pub fn collect_attention(
    g: &Graph,
    batch: &Batch,
    n_heads: usize,
    maa: Option<&[(f64, f64)]>,
) -> Result<Vec<AttentionRecord>> {
    let l = batch.seq_len;
    let mut out = Vec::with_capacity(batch.batch_size);
    for b in 0..batch.batch_size {
        let valid = batch.lengths[b] + 2;
        let mut layers = Vec::with_capacity(g.traced().len());
        for (name, var) in g.traced() {
            let w = g.tape.value(*var);
            if w.shape() != [batch.batch_size * n_heads, l, l] {
                return invalid(format!("traced weights `{name}` have shape {:?}", w.shape()));
            }
            let heads = (0..n_heads)
                .map(|h| {
                    (0..valid)
                        .map(|i| w.row((b * n_heads + h) * l + i)[..valid].to_vec())
                        .collect()
                })
                .collect();
            layers.push(LayerAttention {
                name: name.clone(),
                heads,
            });
        }
        let maa = maa.map(|w| {
            let rows = &w[b * l..b * l + valid];
            ModalityWeights {
                w_lang: rows.iter().map(|p| p.0).collect(),
                w_visn: rows.iter().map(|p| p.1).collect(),
            }
        });
        out.push(AttentionRecord {
            doc_id: batch.doc_ids[b].clone(),
            layers,
            maa,
        });
    }
    Ok(out)
}

/// Runs `model` over `batch` with tracing on and returns every layer's
/// attention weights plus the per-slot modality weights.
pub fn export_attention(model: &SelfDocModel, batch: &Batch) -> Result<Vec<AttentionRecord>> {
    let mut g = Graph::frozen(&model.params);
    g.enable_trace();
    let enc = model.encode(&mut g, batch)?;
    let w = modality_weights(&mut g, &model.maa, enc.text, enc.visn)?;
    let pairs: Vec<(f64, f64)> = g.tape.value(w).data().chunks(2).map(|c| (c[0], c[1])).collect();
    collect_attention(&g, batch, model.cfg.n_heads, Some(&pairs))
}

/// Writes records as one JSON object keyed by `doc_id`.
pub fn save_attention(path: &Path, records: &[AttentionRecord]) -> Result<()> {
    let map: BTreeMap<&str, &AttentionRecord> = records.iter().map(|r| (r.doc_id.as_str(), r)).collect();
    crate::io::write_atomic(path, serde_json::to_string(&map)?.as_bytes())
}

pub fn load_attention(path: &Path) -> Result<BTreeMap<String, AttentionRecord>> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}
