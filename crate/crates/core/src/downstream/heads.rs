//! Entity and document classification heads over fused features.

use crate::data::Batch;
use crate::error::{invalid, Result};
use crate::model::{Encoded, SelfDocModel};
use crate::numerics::{Graph, Tensor, Var};

use super::maa::modality_adaptive_attention;

/// Entity logits `[n, 4]` and gate values `[n, 2]` from per-proposal
/// text/vision states `[n, d_h]`.
pub fn entity_scores(g: &mut Graph, model: &SelfDocModel, t: Var, v: Var) -> Result<(Var, Var)> {
    let (fused, w) = modality_adaptive_attention(g, &model.maa, t, v)?;
    Ok((model.entity_head.forward(g, fused)?, w))
}

/// Projected whole-page vectors `[B, d_h]`; documents without one
/// contribute a zero row.
fn global_term(g: &mut Graph, model: &SelfDocModel, globals: &[Option<&[f64]>]) -> Result<Var> {
    let Some(proj) = &model.global_proj else {
        return invalid("the model has no global-feature projection (set model.d_global)");
    };
    let d = model.cfg.d_global.expect("projection implies d_global");
    let mut data = Vec::with_capacity(globals.len() * d);
    for gv in globals {
        match gv {
            Some(v) if v.len() == d => data.extend_from_slice(v),
            Some(v) => return invalid(format!("global vector of length {} where {d} is expected", v.len())),
            None => data.extend(std::iter::repeat_n(0.0, d)),
        }
    }
    let x = g.tape.constant(Tensor::new(vec![globals.len(), d], data)?)?;
    proj.forward(g, x)
}

/// Class logits `[B, n_classes]` and gate values `[B, 2]` from the
/// index-0 text/vision states `[B, d_h]`, i.e. the `[LANG]` and `[VISN]`
/// outputs. The fused feature adds both gated tokens; when `globals` is
/// given, projected whole-page vectors are added before the head.
pub fn document_scores(
    g: &mut Graph,
    model: &SelfDocModel,
    t: Var,
    v: Var,
    globals: Option<&[Option<&[f64]>]>,
) -> Result<(Var, Var)> {
    let (mut feat, w) = modality_adaptive_attention(g, &model.maa, t, v)?;
    if let Some(gl) = globals {
        let gt = global_term(g, model, gl)?;
        feat = g.tape.add(feat, gt)?;
    }
    Ok((model.cls_head.forward(g, feat)?, w))
}

/// Entity logits for flat rows of an encoded batch.
pub fn entity_logits(g: &mut Graph, model: &SelfDocModel, enc: &Encoded, rows: &[usize]) -> Result<(Var, Var)> {
    let t = g.tape.gather_rows(enc.text, rows)?;
    let v = g.tape.gather_rows(enc.visn, rows)?;
    entity_scores(g, model, t, v)
}

/// Class logits for every document of an encoded batch.
pub fn classify_document(
    g: &mut Graph,
    model: &SelfDocModel,
    enc: &Encoded,
    batch: &Batch,
    use_global: bool,
) -> Result<Var> {
    let rows = batch.special_rows();
    let t = g.tape.gather_rows(enc.text, &rows)?;
    let v = g.tape.gather_rows(enc.visn, &rows)?;
    let globals: Vec<Option<&[f64]>> = batch.global_visual.iter().map(|x| x.as_deref()).collect();
    Ok(document_scores(g, model, t, v, use_global.then_some(globals.as_slice()))?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;

    #[test]
    fn zero_global_vector_matches_the_plain_path() {
        let cfg = ModelConfig {
            d_global: Some(5),
            ..ModelConfig::tiny()
        };
        let model = SelfDocModel::new(cfg, 4).unwrap();
        let d = model.cfg.d_h;
        let scores = |globals: Option<&[Option<&[f64]>]>| {
            let mut g = Graph::frozen(&model.params);
            let t = g.tape.constant(Tensor::from_fn(&[2, d], |i| (i as f64).sin())).unwrap();
            let v = g.tape.constant(Tensor::from_fn(&[2, d], |i| (i as f64).cos())).unwrap();
            let (s, _) = document_scores(&mut g, &model, t, v, globals).unwrap();
            g.tape.value(s).clone()
        };
        let zero = [0.0; 5];
        let plain = scores(None);
        assert_eq!(scores(Some(&[Some(&zero), None])), plain);
        let one = [1.0; 5];
        assert_ne!(scores(Some(&[Some(&one), None])), plain);
    }
}
