//! What each subcommand does, callable without going through argument parsing.

use std::path::{Path, PathBuf};

use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cluster::{cluster_documents, ClusterReport, EmbeddingMode, KMeansInit, KMeansOptions};
use crate::config::{Config, ModelConfig, Precision};
use crate::cross::{export_attention, save_attention};
use crate::data::{
    collate, cross_modal_task, load_corpus, save_corpus, synth_generate, Corpus, CrossTaskConfig, Document,
    GeneratorConfig, Modality,
};
use crate::downstream::{
    classify_document, entity_logits, evaluate, finetune, FinetuneSettings, PredictionRecord, Task, TaskMetrics,
};
use crate::error::{invalid, Error, Result};
use crate::io::write_atomic;
use crate::model::{is_backbone, SelfDocModel};
use crate::numerics::{finite_diff_check, GradCheckReport, Graph, Var};
use crate::pretrain::{
    derived_rng, pretrain, pretrain_loss, Checkpoint, Masker, MaskingConfig, PretrainOptions, PretrainOutcome,
    ReplacementPool, RngState, Stream, RNG_SCHEME,
};

/// Fails with a usage error unless `path` names an existing file.
pub fn require_file(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Config(format!("{what} `{}` does not exist", path.display())))
    }
}

fn require_f64(cfg: &Config, what: &str) -> Result<()> {
    match cfg.run.precision {
        Precision::F64 => Ok(()),
        Precision::F32 => Err(Error::Config(format!(
            "{what} runs in 64-bit arithmetic only; 32-bit mode is not available in this build (use --f64)"
        ))),
    }
}

fn load_checked(path: &Path, cfg: &ModelConfig) -> Result<Corpus> {
    require_file(path, "corpus")?;
    let corpus = load_corpus(path)?;
    if corpus.d_lang != cfg.d_lang || corpus.d_visn != cfg.d_visn {
        return Err(Error::Config(format!(
            "corpus `{}` has {}/{} wide features, model expects {}/{}",
            path.display(),
            corpus.d_lang,
            corpus.d_visn,
            cfg.d_lang,
            cfg.d_visn
        )));
    }
    Ok(corpus)
}

/// Builds the model for `cfg`, taking the backbone (and any task-side
/// parameters present with the right shape) from `checkpoint`.
pub fn load_model(cfg: &Config, checkpoint: Option<&Path>) -> Result<SelfDocModel> {
    let Some(path) = checkpoint else {
        info!(
            "no checkpoint given, using freshly initialised weights (seed {})",
            cfg.run.seed
        );
        return SelfDocModel::new(cfg.model.clone(), cfg.run.seed);
    };
    require_file(path, "checkpoint")?;
    let ck = Checkpoint::load(path)?;
    let mut source = crate::numerics::ParamStore::new();
    let fresh = SelfDocModel::new(cfg.model.clone(), cfg.run.seed)?;
    for (name, t) in ck.params.iter() {
        let fits = fresh.params.by_name(name).is_some_and(|f| f.shape() == t.shape());
        if is_backbone(name) || fits {
            source.add(name, t.clone())?;
        }
    }
    SelfDocModel::with_values(cfg.model.clone(), cfg.run.seed, &source, |n| !is_backbone(n))
}

/// Configuration stored in a checkpoint.
pub fn checkpoint_config(path: &Path) -> Result<Config> {
    require_file(path, "checkpoint")?;
    Ok(Checkpoint::load(path)?.config)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SynthSpec {
    /// Class-templated documents with entity and class labels.
    Standard(GeneratorConfig),
    /// Documents whose entity labels depend on the other modality.
    Cross(CrossTaskConfig),
}

pub fn cmd_synth(spec: &SynthSpec, out: &Path, workers: usize) -> Result<Corpus> {
    let corpus = match spec {
        SynthSpec::Standard(g) => synth_generate(g, workers)?,
        SynthSpec::Cross(c) => cross_modal_task(c)?,
    };
    save_corpus(out, &corpus)?;
    info!("wrote {} documents to {}", corpus.documents.len(), out.display());
    Ok(corpus)
}

pub fn cmd_pretrain(
    cfg: &Config,
    corpus: &Path,
    out: &Path,
    resume: Option<&Path>,
    stop_after: Option<usize>,
) -> Result<PretrainOutcome> {
    require_f64(cfg, "pre-training")?;
    let corpus = load_checked(corpus, &cfg.model)?;
    if let Some(r) = resume {
        require_file(r, "checkpoint")?;
    }
    let opts = PretrainOptions {
        out_dir: Some(out.to_path_buf()),
        resume: resume.map(Path::to_path_buf),
        stop_after,
    };
    pretrain(&corpus, cfg, &opts)
}

#[derive(Clone, Debug)]
pub struct FinetuneArgs {
    pub task: Task,
    pub corpus: PathBuf,
    /// Scored after training; the training corpus when unset.
    pub eval_corpus: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out: PathBuf,
    pub freeze: Option<bool>,
    pub use_global: bool,
}

pub const FINETUNED_FILE: &str = "finetuned.bin";
pub const FINETUNE_METRICS_FILE: &str = "metrics.json";
pub const PREDICTIONS_FILE: &str = "predictions.jsonl";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneReport {
    pub metrics: TaskMetrics,
    pub freeze: bool,
    pub use_global: bool,
    pub epoch_losses: Vec<f64>,
    pub backbone_hash_before: String,
    pub backbone_hash_after: String,
}

pub fn cmd_finetune(cfg: &Config, args: &FinetuneArgs) -> Result<FinetuneReport> {
    require_f64(cfg, "fine-tuning")?;
    let mut cfg = cfg.clone();
    let corpus = load_checked(&args.corpus, &cfg.model)?;
    if args.use_global && cfg.model.d_global.is_none() {
        let dim = corpus
            .documents
            .iter()
            .find_map(|d| d.global_visual.as_ref().map(Vec::len));
        cfg.model.d_global = Some(dim.ok_or_else(|| {
            Error::Config("--global-feature given but no document carries a global_visual vector".into())
        })?);
    }
    let eval = match &args.eval_corpus {
        Some(p) => load_checked(p, &cfg.model)?,
        None => corpus.clone(),
    };
    let mut model = load_model(&cfg, args.checkpoint.as_deref())?;
    let settings = FinetuneSettings::from_run(&cfg.run, args.task, args.freeze, args.use_global);
    let before = model.backbone_fingerprint();
    let epoch_losses = finetune(&mut model, &corpus.documents, &settings)?;
    let after = model.backbone_fingerprint();
    let evaluation = evaluate(&model, &eval.documents, args.task, args.use_global)?;

    std::fs::create_dir_all(&args.out)?;
    let report = FinetuneReport {
        metrics: evaluation.metrics,
        freeze: settings.freeze,
        use_global: settings.use_global,
        epoch_losses,
        backbone_hash_before: format!("{before:016x}"),
        backbone_hash_after: format!("{after:016x}"),
    };
    let ck = Checkpoint {
        iteration: 0,
        config: cfg.clone(),
        rng: RngState {
            seed: cfg.run.seed,
            scheme: RNG_SCHEME.into(),
        },
        params: model.params.clone(),
        optimizer: None,
        meta: serde_json::json!({"stage": "finetune", "task": args.task, "freeze": settings.freeze}),
    };
    ck.save(&args.out.join(FINETUNED_FILE))?;
    write_atomic(
        &args.out.join(FINETUNE_METRICS_FILE),
        serde_json::to_string_pretty(&report)?.as_bytes(),
    )?;
    write_predictions(&args.out.join(PREDICTIONS_FILE), &evaluation.predictions)?;
    Ok(report)
}

fn write_predictions(path: &Path, records: &[PredictionRecord]) -> Result<()> {
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    write_atomic(path, text.as_bytes())
}

#[derive(Clone, Debug)]
pub struct ClusterArgs {
    pub corpus: PathBuf,
    pub k: usize,
    pub mode: EmbeddingMode,
    pub checkpoint: Option<PathBuf>,
    pub init: KMeansInit,
    pub out: Option<PathBuf>,
}

pub fn cmd_cluster(cfg: &Config, args: &ClusterArgs) -> Result<ClusterReport> {
    require_f64(cfg, "clustering")?;
    let corpus = load_checked(&args.corpus, &cfg.model)?;
    if args.k < 2 || args.k > corpus.documents.len() {
        return Err(Error::Config(format!(
            "k must lie in [2, {}] for this corpus, got {}",
            corpus.documents.len(),
            args.k
        )));
    }
    let model = match args.mode {
        EmbeddingMode::Input => None,
        EmbeddingMode::Model => Some(load_model(cfg, args.checkpoint.as_deref())?),
    };
    let opts = KMeansOptions {
        init: args.init,
        ..KMeansOptions::new(args.k, cfg.run.seed)
    };
    let report = cluster_documents(&corpus.documents, args.mode, model.as_ref(), &opts)?;
    if let Some(out) = &args.out {
        write_atomic(out, serde_json::to_string_pretty(&report)?.as_bytes())?;
    }
    Ok(report)
}

/// Small labelled batch used by the gradient check, masked so that both
/// modalities have at least one reconstruction target.
struct CheckCase {
    docs: Vec<Document>,
    masked: crate::data::Batch,
    records: Vec<crate::pretrain::MaskRecord>,
}

fn check_case(cfg: &ModelConfig, seed: u64) -> Result<CheckCase> {
    let mut gen = GeneratorConfig::new(2, 1, cfg.d_lang, cfg.d_visn, seed);
    gen.n_proposals_range = [3, 5];
    gen.global_dim = cfg.d_global;
    let docs = synth_generate(&gen, 1)?.documents;
    let refs: Vec<&Document> = docs.iter().collect();
    let batch = collate(&refs, cfg.d_lang, cfg.d_visn)?;
    let mut rng = derived_rng(seed, Stream::Pool, 0);
    let pool = ReplacementPool::from_documents(&docs, 64, &mut rng);
    let masker = Masker::new(
        MaskingConfig {
            select_prob: 0.5,
            ..MaskingConfig::default()
        },
        pool,
    )?;
    for attempt in 0..1000 {
        let (masked, records) = masker.apply(&batch, &mut derived_rng(seed, Stream::Step, attempt));
        let has = |m: Modality| records.iter().any(|r| r.modality == m);
        if has(Modality::Lang) && has(Modality::Visn) {
            return Ok(CheckCase { docs, masked, records });
        }
    }
    invalid("could not draw a masking that covers both modalities")
}

/// Reconstruction loss plus entity and class cross-entropy, so every
/// parameter of the model receives a gradient.
fn check_loss(g: &mut Graph, model: &SelfDocModel, case: &CheckCase) -> Result<Var> {
    let enc = model.encode(g, &case.masked)?;
    let recon = pretrain_loss(g, model, &enc, &case.records)?
        .ok_or_else(|| Error::Invalid("gradient check batch has no masked slots".into()))?
        .total;
    let (mut rows, mut ents) = (Vec::new(), Vec::new());
    for (b, doc) in case.docs.iter().enumerate() {
        for (i, p) in doc.proposals.iter().enumerate() {
            if let Some(l) = p.entity_label {
                rows.push(case.masked.row(b, 1 + i));
                ents.push(l.index());
            }
        }
    }
    let (logits, _) = entity_logits(g, model, &enc, &rows)?;
    let ce_ent = g.tape.cross_entropy(logits, &ents)?;
    let classes: Vec<usize> = case
        .docs
        .iter()
        .map(|d| d.class_label.unwrap_or(0) % model.cfg.n_classes)
        .collect();
    let logits = classify_document(g, model, &enc, &case.masked, model.global_proj.is_some())?;
    let ce_cls = g.tape.cross_entropy(logits, &classes)?;
    let sum = g.tape.add(recon, ce_ent)?;
    g.tape.add(sum, ce_cls)
}

/// Central-difference check of the analytic gradient of the full model.
pub fn gradcheck_model(cfg: &ModelConfig, seed: u64, min_coords: usize, eps: f64) -> Result<GradCheckReport> {
    let mut model = SelfDocModel::new(cfg.clone(), seed)?;
    let case = check_case(cfg, seed)?;
    let analytic = {
        let mut g = Graph::new(&model.params);
        let loss = check_loss(&mut g, &model, &case)?;
        g.tape.backward(loss)?;
        g.param_grads()
    };
    let mut store = std::mem::take(&mut model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let report = finite_diff_check(
        &mut store,
        &analytic,
        |s| {
            let mut g = Graph::frozen(s);
            let loss = check_loss(&mut g, &model, &case)?;
            Ok(g.tape.value(loss).item())
        },
        eps,
        min_coords,
        &mut rng,
    );
    model.params = store;
    report
}

pub fn cmd_gradcheck(cfg: &Config, min_coords: usize, eps: f64, out: Option<&Path>) -> Result<GradCheckReport> {
    if cfg.run.precision == Precision::F32 {
        return Err(Error::Config(
            "gradient checking needs 64-bit arithmetic: central differences at eps ~1e-5 lose all \
             significant digits in 32-bit floats"
                .into(),
        ));
    }
    let report = gradcheck_model(&cfg.model, cfg.run.seed, min_coords, eps)?;
    if let Some(out) = out {
        write_atomic(out, serde_json::to_string_pretty(&report)?.as_bytes())?;
    }
    Ok(report)
}

/// Exports attention for the first `limit` documents (all when unset).
pub fn cmd_export_attention(
    cfg: &Config,
    checkpoint: Option<&Path>,
    corpus: &Path,
    out: &Path,
    limit: Option<usize>,
) -> Result<usize> {
    require_f64(cfg, "attention export")?;
    let corpus = load_checked(corpus, &cfg.model)?;
    let model = load_model(cfg, checkpoint)?;
    let n = limit.map_or(corpus.documents.len(), |l| l.min(corpus.documents.len()));
    let mut records = Vec::with_capacity(n);
    for chunk in corpus.documents[..n].chunks(cfg.run.finetune.batch_size.max(1)) {
        let refs: Vec<&Document> = chunk.iter().collect();
        let batch = collate(&refs, cfg.model.d_lang, cfg.model.d_visn)?;
        records.extend(export_attention(&model, &batch)?);
    }
    save_attention(out, &records)?;
    Ok(records.len())
}
