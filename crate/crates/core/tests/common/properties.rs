//! Structural and statistical checks shared by the property tests and the
//! acceptance run.

use std::collections::HashMap;

use super::*;
use selfdoc::config::ModelConfig;
use selfdoc::data::{collate, Batch, Document, Modality, TokenKind};
use selfdoc::encoders::{encode_modality, project_inputs, SeqShape};
use selfdoc::model::SelfDocModel;
use selfdoc::numerics::{Graph, Tensor};
use selfdoc::pretrain::{MaskAction, Masker, MaskingConfig, ReplacementPool};

fn encode_rows(model: &SelfDocModel, batch: &Batch, b: usize) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let (t, v) = model.encode_values(batch).unwrap();
    let valid = batch.lengths[b] + 2;
    let rows = |x: &Tensor| (0..valid).map(|i| x.row(batch.row(b, i)).to_vec()).collect();
    (rows(&t), rows(&v))
}

fn rows_diff(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter().zip(b).map(|(x, y)| max_diff(x, y)).fold(0.0, f64::max)
}

/// Largest change in a document's final states when it is padded by
/// being batched next to a longer document.
pub fn padding_invariance_error(model: &SelfDocModel, short_len: usize, long_len: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let (dl, dv) = (model.cfg.d_lang, model.cfg.d_visn);
    let short = random_doc(&mut r, "short", short_len, dl, dv);
    let long = random_doc(&mut r, "long", long_len, dl, dv);
    let alone = encode_rows(model, &collate(&[&short], dl, dv).unwrap(), 0);
    let padded = encode_rows(model, &collate(&[&long, &short], dl, dv).unwrap(), 1);
    rows_diff(&alone.0, &padded.0).max(rows_diff(&alone.1, &padded.1))
}

/// Largest deviation from equivariance when a document's proposals are
/// permuted (features and boxes together, both modalities).
pub fn permutation_error(model: &SelfDocModel, perm: &[usize], seed: u64) -> f64 {
    let mut r = rng(seed);
    let (dl, dv) = (model.cfg.d_lang, model.cfg.d_visn);
    let doc = random_doc(&mut r, "d", perm.len(), dl, dv);
    let sep = perm.len() + 1;
    let permuted = Document {
        proposals: perm.iter().map(|&i| doc.proposals[i].clone()).collect(),
        ..doc.clone()
    };
    let (t0, v0) = encode_rows(model, &collate(&[&doc], dl, dv).unwrap(), 0);
    let (t1, v1) = encode_rows(model, &collate(&[&permuted], dl, dv).unwrap(), 0);
    let mut worst: f64 = 0.0;
    for (a, b) in [(&t0, &t1), (&v0, &v1)] {
        // special and separator slots are order-independent
        worst = worst.max(max_diff(&a[0], &b[0]));
        worst = worst.max(max_diff(&a[sep], &b[sep]));
        for (k, &i) in perm.iter().enumerate() {
            worst = worst.max(max_diff(&b[1 + k], &a[1 + i]));
        }
    }
    worst
}

/// Single-modality stack outputs `(text, visn)` for a fixed batch.
fn stack_outputs(model: &SelfDocModel, batch: &Batch) -> (Vec<f64>, Vec<f64>) {
    let mut g = Graph::frozen(&model.params);
    let seq = SeqShape::of(batch).unwrap();
    let (t0, v0) = project_inputs(&mut g, &model.input, batch).unwrap();
    let t = encode_modality(&mut g, &model.cfg, &seq, t0, &model.text).unwrap();
    let v = encode_modality(&mut g, &model.cfg, &seq, v0, &model.visn).unwrap();
    (g.tape.value(t).data().to_vec(), g.tape.value(v).data().to_vec())
}

/// Checks that the two stacks and the two branches of every cross block
/// share no parameter, and that perturbing one stack's parameters leaves
/// the other stack's output bit-identical while changing its own.
pub fn disjointness(model: &SelfDocModel) -> Result<(), String> {
    let names: Vec<String> = model.params.iter().map(|(n, _)| n.to_string()).collect();
    let group = |prefix: &str| -> Vec<&String> { names.iter().filter(|n| n.starts_with(prefix)).collect() };
    for b in 0..model.cfg.n_cross_blocks {
        let (t, v) = (group(&format!("cross{b}.text.")), group(&format!("cross{b}.visn.")));
        if t.is_empty() || t.len() != v.len() || t.iter().any(|n| v.contains(n)) {
            return Err(format!("cross block {b} branches overlap"));
        }
    }
    let mut r = rng(103);
    let doc = random_doc(&mut r, "d", 5, model.cfg.d_lang, model.cfg.d_visn);
    let batch = collate(&[&doc], model.cfg.d_lang, model.cfg.d_visn).unwrap();
    let base = stack_outputs(model, &batch);
    for (prefix, own_is_text) in [("text.", true), ("visn.", false)] {
        let mut m = model.clone();
        for id in m.params.ids().collect::<Vec<_>>() {
            if m.params.name(id).starts_with(prefix) {
                m.params.get_mut(id).data_mut().iter_mut().for_each(|x| *x += 0.05);
            }
        }
        let (t, v) = stack_outputs(&m, &batch);
        let (own, other, own0, other0) = if own_is_text {
            (t, v, &base.0, &base.1)
        } else {
            (v, t, &base.1, &base.0)
        };
        if other != *other0 {
            return Err(format!("perturbing `{prefix}` changed the other stack"));
        }
        if max_diff(&own, own0) < 1e-6 {
            return Err(format!("perturbing `{prefix}` did not change its own stack"));
        }
    }
    Ok(())
}

fn masking_batch(r: &mut rand_chacha::ChaCha8Rng, sizes: &[usize]) -> (Vec<Document>, Batch) {
    let docs: Vec<Document> = sizes
        .iter()
        .enumerate()
        .map(|(i, &n)| random_doc(r, &format!("d{i}"), n, 3, 5))
        .collect();
    let refs: Vec<&Document> = docs.iter().collect();
    let batch = collate(&refs, 3, 5).unwrap();
    (docs, batch)
}

/// Number of masking trials that touched a special, separator or padded
/// slot, either through a record or by changing its features.
pub fn masking_violations(trials: usize) -> usize {
    let mut r = rng(104);
    let (docs, batch) = masking_batch(&mut r, &[2, 6, 1, 4]);
    let pool = ReplacementPool::from_documents(&docs, 100, &mut r);
    let masker = Masker::new(
        MaskingConfig {
            select_prob: 0.5,
            ..MaskingConfig::default()
        },
        pool,
    )
    .unwrap();
    let fixed: Vec<usize> = (0..batch.kinds.len())
        .filter(|&i| batch.kinds[i] != TokenKind::Proposal)
        .collect();
    let mut bad = 0;
    for _ in 0..trials {
        let (masked, records) = masker.apply(&batch, &mut r);
        let hit = records
            .iter()
            .any(|rec| batch.kinds[batch.row(rec.batch_index, rec.seq_index)] != TokenKind::Proposal);
        let changed = fixed
            .iter()
            .any(|&i| masked.lang.row(i) != batch.lang.row(i) || masked.visn.row(i) != batch.visn.row(i));
        if hit || changed || masked.pos != batch.pos {
            bad += 1;
        }
    }
    bad
}

pub struct MaskingStats {
    pub proposals: usize,
    /// Per modality: selection rate and the zero / random / keep shares.
    pub rate: [f64; 2],
    pub split: [[f64; 3]; 2],
}

/// Masking at the default configuration over exactly `n` proposals.
pub fn masking_statistics(n: usize) -> MaskingStats {
    let mut r = rng(105);
    let per_doc = 50;
    let (docs, _) = masking_batch(&mut r, &[per_doc]);
    let pool = ReplacementPool::from_documents(&docs, 100, &mut r);
    let masker = Masker::new(MaskingConfig::default(), pool).unwrap();
    let mut counts: HashMap<(Modality, MaskAction), usize> = HashMap::new();
    let mut seen = 0;
    while seen < n {
        let mut sizes = Vec::new();
        let mut left = n - seen;
        while left > 0 && sizes.len() < 10 {
            let k = per_doc.min(left);
            sizes.push(k);
            left -= k;
        }
        let (_, batch) = masking_batch(&mut r, &sizes);
        seen += sizes.iter().sum::<usize>();
        for rec in masker.apply(&batch, &mut r).1 {
            *counts.entry((rec.modality, rec.action)).or_default() += 1;
        }
    }
    let mut stats = MaskingStats {
        proposals: seen,
        rate: [0.0; 2],
        split: [[0.0; 3]; 2],
    };
    for (m, modality) in [Modality::Lang, Modality::Visn].into_iter().enumerate() {
        let c: Vec<usize> = [MaskAction::Zero, MaskAction::Random, MaskAction::Keep]
            .iter()
            .map(|&a| counts.get(&(modality, a)).copied().unwrap_or(0))
            .collect();
        let selected: usize = c.iter().sum();
        stats.rate[m] = selected as f64 / seen as f64;
        for (share, &count) in stats.split[m].iter_mut().zip(&c) {
            *share = count as f64 / selected as f64;
        }
    }
    stats
}

/// Tiny model used by the structural checks.
pub fn tiny_model() -> SelfDocModel {
    SelfDocModel::new(ModelConfig::tiny(), 5).unwrap()
}
