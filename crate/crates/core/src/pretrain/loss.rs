//! Masked-feature reconstruction objective.

use super::masking::MaskRecord;
use crate::data::Modality;
use crate::error::{shape_err, Result};
use crate::model::{Encoded, SelfDocModel};
use crate::numerics::{Graph, Tensor, Var};

/// Per-modality reconstruction losses and their sum.
#[derive(Clone, Copy, Debug)]
pub struct PretrainLoss {
    pub total: Var,
    pub lang: Option<Var>,
    pub visn: Option<Var>,
}

/// Mean Smooth-L1 between reconstructed and original features of one
/// modality's records; `None` when the modality has no records.
fn modality_term(
    g: &mut Graph,
    model: &SelfDocModel,
    enc: &Encoded,
    records: &[MaskRecord],
    modality: Modality,
) -> Result<Option<Var>> {
    let picked: Vec<&MaskRecord> = records.iter().filter(|r| r.modality == modality).collect();
    if picked.is_empty() {
        return Ok(None);
    }
    let (hidden, head, d) = match modality {
        Modality::Lang => (enc.text, &model.recon_lang, model.cfg.d_lang),
        Modality::Visn => (enc.visn, &model.recon_visn, model.cfg.d_visn),
    };
    let mut rows = Vec::with_capacity(picked.len());
    let mut target = Vec::with_capacity(picked.len() * d);
    for r in &picked {
        if r.batch_index >= enc.seq.batch || r.seq_index >= enc.seq.len || r.original.len() != d {
            return shape_err(format!(
                "mask record ({}, {}) with {} features does not fit a {}x{} batch of width {d}",
                r.batch_index,
                r.seq_index,
                r.original.len(),
                enc.seq.batch,
                enc.seq.len
            ));
        }
        rows.push(r.batch_index * enc.seq.len + r.seq_index);
        target.extend_from_slice(&r.original);
    }
    let h = g.tape.gather_rows(hidden, &rows)?;
    let pred = head.forward(g, h)?;
    let target = Tensor::new(vec![rows.len(), d], target)?;
    Ok(Some(g.tape.smooth_l1(pred, &target)?))
}

/// Sum over modalities of the mean reconstruction loss at masked slots.
/// Returns `None` when there are no records, in which case the step is
/// skipped.
pub fn pretrain_loss(
    g: &mut Graph,
    model: &SelfDocModel,
    enc: &Encoded,
    records: &[MaskRecord],
) -> Result<Option<PretrainLoss>> {
    let lang = modality_term(g, model, enc, records, Modality::Lang)?;
    let visn = modality_term(g, model, enc, records, Modality::Visn)?;
    let total = match (lang, visn) {
        (Some(a), Some(b)) => g.tape.add(a, b)?,
        (Some(a), None) | (None, Some(a)) => a,
        (None, None) => return Ok(None),
    };
    Ok(Some(PretrainLoss { total, lang, visn }))
}
