//! Fine-tuning loops and evaluation for the two supervised tasks.

use log::info;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::heads::{document_scores, entity_scores};
use super::metrics::{accuracy, micro_prf};
use crate::config::RunConfig;
use crate::data::{bucket_plan, collate, Batch, Document, EntityLabel};
use crate::error::{invalid, Error, Result};
use crate::model::{is_backbone, SelfDocModel};
use crate::numerics::{Graph, Tensor, Var};
use crate::pretrain::{derived_rng, AdamW, AdamWConfig, Schedule, Stream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    /// Per-proposal entity labelling.
    Ner,
    /// Whole-document classification.
    Cls,
}

impl Task {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "ner" => Ok(Task::Ner),
            "cls" => Ok(Task::Cls),
            other => Err(Error::Config(format!("unknown task `{other}` (expected ner or cls)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneSettings {
    pub task: Task,
    /// Train only the fusion network and head on fixed backbone outputs.
    pub freeze: bool,
    /// Add the projected whole-page vector to the document feature.
    pub use_global: bool,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub warmup_ratio: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl FinetuneSettings {
    /// Settings from a run configuration; entity labelling freezes the
    /// backbone unless told otherwise, classification does not.
    pub fn from_run(run: &RunConfig, task: Task, freeze: Option<bool>, use_global: bool) -> Self {
        let ft = &run.finetune;
        let freeze = freeze.or(ft.freeze).unwrap_or(task == Task::Ner);
        Self {
            task,
            freeze,
            use_global,
            epochs: ft.epochs,
            lr: if freeze { ft.frozen_lr.unwrap_or(ft.lr) } else { ft.lr },
            batch_size: ft.batch_size,
            warmup_ratio: ft.warmup_ratio,
            weight_decay: ft.weight_decay,
            seed: run.seed,
        }
    }
}

/// Final backbone states of one document, rows `[SPECIAL, p1 .. pN, SEP]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DocStates {
    pub text: Tensor,
    pub visn: Tensor,
}

/// Runs the backbone over `docs` in length buckets and keeps each
/// document's unpadded rows. Outputs do not depend on batch composition.
pub fn encode_documents(model: &SelfDocModel, docs: &[Document], batch_size: usize) -> Result<Vec<DocStates>> {
    let lengths: Vec<usize> = docs.iter().map(Document::len).collect();
    let mut out: Vec<Option<DocStates>> = vec![None; docs.len()];
    for idx in bucket_plan(&lengths, crate::data::DEFAULT_GROUP_THRESHOLD, batch_size.max(1))? {
        let group: Vec<&Document> = idx.iter().map(|&i| &docs[i]).collect();
        let batch = collate(&group, model.cfg.d_lang, model.cfg.d_visn)?;
        let (t, v) = model.encode_values(&batch)?;
        for (b, &i) in idx.iter().enumerate() {
            let rows: Vec<usize> = (0..docs[i].len() + 2).map(|r| batch.row(b, r)).collect();
            out[i] = Some(DocStates {
                text: take_rows(&t, &rows)?,
                visn: take_rows(&v, &rows)?,
            });
        }
    }
    Ok(out.into_iter().map(|s| s.expect("every document is batched")).collect())
}

fn take_rows(t: &Tensor, rows: &[usize]) -> Result<Tensor> {
    let d = t.last_dim();
    let flat = t.clone().reshape(&[t.numel() / d, d])?;
    let mut data = Vec::with_capacity(rows.len() * d);
    for &r in rows {
        data.extend_from_slice(flat.row(r));
    }
    Tensor::new(vec![rows.len(), d], data)
}

/// Rows (relative to each document's sequence) and targets the task reads.
fn targets(task: Task, doc: &Document, n_classes: usize) -> Result<Vec<(usize, usize)>> {
    match task {
        Task::Ner => Ok(doc
            .proposals
            .iter()
            .enumerate()
            .filter_map(|(i, p)| p.entity_label.map(|l| (1 + i, l.index())))
            .collect()),
        Task::Cls => match doc.class_label {
            Some(c) if c < n_classes => Ok(vec![(0, c)]),
            Some(c) => invalid(format!(
                "document `{}` has class {c} but the model has {n_classes}",
                doc.doc_id
            )),
            None => invalid(format!("document `{}` has no class label", doc.doc_id)),
        },
    }
}

fn check_labels(task: Task, docs: &[Document], n_classes: usize) -> Result<usize> {
    let mut n = 0;
    for d in docs {
        n += targets(task, d, n_classes)?.len();
    }
    if n == 0 {
        return invalid("no labelled examples for fine-tuning");
    }
    Ok(n)
}

/// Head logits and targets for documents whose backbone states are known.
fn head_from_states(
    g: &mut Graph,
    model: &SelfDocModel,
    task: Task,
    use_global: bool,
    docs: &[&Document],
    states: &[&DocStates],
) -> Result<Option<(Var, Var, Vec<usize>)>> {
    let (mut t, mut v, mut y) = (Vec::new(), Vec::new(), Vec::new());
    for (doc, st) in docs.iter().zip(states) {
        for (r, label) in targets(task, doc, model.cfg.n_classes)? {
            t.extend_from_slice(st.text.row(r));
            v.extend_from_slice(st.visn.row(r));
            y.push(label);
        }
    }
    if y.is_empty() {
        return Ok(None);
    }
    let d = model.cfg.d_h;
    let t = g.tape.constant(Tensor::new(vec![y.len(), d], t)?)?;
    let v = g.tape.constant(Tensor::new(vec![y.len(), d], v)?)?;
    let globals: Vec<Option<&[f64]>> = docs.iter().map(|d| d.global_visual.as_deref()).collect();
    let (logits, w) = match task {
        Task::Ner => entity_scores(g, model, t, v)?,
        Task::Cls => document_scores(g, model, t, v, use_global.then_some(globals.as_slice()))?,
    };
    Ok(Some((logits, w, y)))
}

/// Head logits and targets with the backbone on the tape.
fn head_from_batch(
    g: &mut Graph,
    model: &SelfDocModel,
    task: Task,
    use_global: bool,
    docs: &[&Document],
    batch: &Batch,
) -> Result<Option<(Var, Var, Vec<usize>)>> {
    let enc = model.encode(g, batch)?;
    let (mut rows, mut y) = (Vec::new(), Vec::new());
    for (b, doc) in docs.iter().enumerate() {
        for (r, label) in targets(task, doc, model.cfg.n_classes)? {
            rows.push(batch.row(b, r));
            y.push(label);
        }
    }
    if y.is_empty() {
        return Ok(None);
    }
    let t = g.tape.gather_rows(enc.text, &rows)?;
    let v = g.tape.gather_rows(enc.visn, &rows)?;
    let globals: Vec<Option<&[f64]>> = docs.iter().map(|d| d.global_visual.as_deref()).collect();
    let (logits, w) = match task {
        Task::Ner => entity_scores(g, model, t, v)?,
        Task::Cls => document_scores(g, model, t, v, use_global.then_some(globals.as_slice()))?,
    };
    Ok(Some((logits, w, y)))
}

/// Trains the task head (and, unless frozen, the backbone) with softmax
/// cross-entropy under AdamW and the warm-up/decay schedule. Returns the
/// mean training loss of each epoch.
pub fn finetune(model: &mut SelfDocModel, docs: &[Document], s: &FinetuneSettings) -> Result<Vec<f64>> {
    if s.batch_size == 0 || s.epochs == 0 {
        return invalid("fine-tuning needs a positive batch size and epoch count");
    }
    if s.use_global && model.global_proj.is_none() {
        return invalid("--global-feature needs a model with d_global set");
    }
    check_labels(s.task, docs, model.cfg.n_classes)?;
    let states = if s.freeze {
        Some(encode_documents(model, docs, s.batch_size)?)
    } else {
        None
    };
    let per_epoch = docs.len().div_ceil(s.batch_size);
    let schedule = Schedule::new(s.lr, s.epochs * per_epoch, s.warmup_ratio)?;
    let mut opt = AdamW::new(
        AdamWConfig {
            weight_decay: s.weight_decay,
            ..AdamWConfig::default()
        },
        &model.params,
    );
    let freeze = s.freeze;
    let trainable = move |name: &str| !name.starts_with("recon.") && (!freeze || !is_backbone(name));
    let mut order: Vec<usize> = (0..docs.len()).collect();
    let mut epoch_losses = Vec::with_capacity(s.epochs);
    let mut step = 0;
    for epoch in 0..s.epochs {
        order.shuffle(&mut derived_rng(s.seed, Stream::Epoch, epoch as u64));
        let (mut total, mut count) = (0.0, 0usize);
        for chunk in order.chunks(s.batch_size) {
            step += 1;
            let group: Vec<&Document> = chunk.iter().map(|&i| &docs[i]).collect();
            let mut g = Graph::with_trainable(&model.params, trainable);
            let head = match &states {
                Some(st) => {
                    let st: Vec<&DocStates> = chunk.iter().map(|&i| &st[i]).collect();
                    head_from_states(&mut g, model, s.task, s.use_global, &group, &st)?
                }
                None => {
                    let batch = collate(&group, model.cfg.d_lang, model.cfg.d_visn)?;
                    head_from_batch(&mut g, model, s.task, s.use_global, &group, &batch)?
                }
            };
            let Some((logits, _, y)) = head else { continue };
            let loss = g.tape.cross_entropy(logits, &y)?;
            total += g.tape.value(loss).item() * y.len() as f64;
            count += y.len();
            g.tape.backward(loss)?;
            let grads = g.param_grads();
            drop(g);
            opt.update(&mut model.params, &grads, schedule.lr(step))?;
        }
        let mean = total / count.max(1) as f64;
        info!("epoch {}/{} loss {mean:.5}", epoch + 1, s.epochs);
        epoch_losses.push(mean);
    }
    Ok(epoch_losses)
}

/// Gold or predicted label in a predictions file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LabelValue {
    Entity(EntityLabel),
    Class(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub doc_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub proposal_index: Option<usize>,
    pub gold: LabelValue,
    pub pred: LabelValue,
    pub scores: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub task: Task,
    pub n: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub micro_f1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub micro_f1_excluding_other: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    /// Smallest and largest modality weight seen during evaluation.
    pub maa_min: f64,
    pub maa_max: f64,
}

pub struct Evaluation {
    pub predictions: Vec<PredictionRecord>,
    pub metrics: TaskMetrics,
}

/// Predicts every labelled target of `docs` and scores the predictions.
pub fn evaluate(model: &SelfDocModel, docs: &[Document], task: Task, use_global: bool) -> Result<Evaluation> {
    check_labels(task, docs, model.cfg.n_classes)?;
    let states = encode_documents(model, docs, 16)?;
    let mut predictions = Vec::new();
    let (mut preds, mut golds) = (Vec::new(), Vec::new());
    let (mut wmin, mut wmax) = (f64::INFINITY, f64::NEG_INFINITY);
    for (doc, st) in docs.iter().zip(&states) {
        let mut g = Graph::frozen(&model.params);
        let Some((logits, w, y)) = head_from_states(&mut g, model, task, use_global, &[doc], &[st])? else {
            continue;
        };
        for &x in g.tape.value(w).data() {
            wmin = wmin.min(x);
            wmax = wmax.max(x);
        }
        let logits = g.tape.value(logits);
        let rows = targets(task, doc, model.cfg.n_classes)?;
        for (k, (&gold, &(r, _))) in y.iter().zip(&rows).enumerate() {
            let scores = logits.row(k).to_vec();
            let pred = scores
                .iter()
                .enumerate()
                .fold(0, |best, (j, &s)| if s > scores[best] { j } else { best });
            preds.push(pred);
            golds.push(gold);
            let label = |c: usize| match task {
                Task::Ner => LabelValue::Entity(EntityLabel::from_index(c).expect("4 entity classes")),
                Task::Cls => LabelValue::Class(c),
            };
            predictions.push(PredictionRecord {
                doc_id: doc.doc_id.clone(),
                proposal_index: (task == Task::Ner).then(|| r - 1),
                gold: label(gold),
                pred: label(pred),
                scores,
            });
        }
    }
    let metrics = match task {
        Task::Ner => TaskMetrics {
            task,
            n: preds.len(),
            micro_f1: Some(micro_prf(&preds, &golds, None)?.f1),
            micro_f1_excluding_other: Some(micro_prf(&preds, &golds, Some(EntityLabel::Other.index()))?.f1),
            accuracy: None,
            maa_min: wmin,
            maa_max: wmax,
        },
        Task::Cls => TaskMetrics {
            task,
            n: preds.len(),
            micro_f1: None,
            micro_f1_excluding_other: None,
            accuracy: Some(accuracy(&preds, &golds)?),
            maa_min: wmin,
            maa_max: wmax,
        },
    };
    Ok(Evaluation { predictions, metrics })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frozen_runs_use_the_frozen_learning_rate() {
        let mut run = RunConfig::tiny();
        run.finetune.lr = 1e-3;
        run.finetune.frozen_lr = Some(1e-2);
        assert_eq!(FinetuneSettings::from_run(&run, Task::Ner, None, false).lr, 1e-2);
        assert_eq!(FinetuneSettings::from_run(&run, Task::Cls, None, false).lr, 1e-3);
        assert_eq!(FinetuneSettings::from_run(&run, Task::Cls, Some(true), false).lr, 1e-2);
        run.finetune.frozen_lr = None;
        assert_eq!(FinetuneSettings::from_run(&run, Task::Ner, None, false).lr, 1e-3);
    }
}
