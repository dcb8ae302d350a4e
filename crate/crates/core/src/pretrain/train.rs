//! The pre-training loop.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::{Checkpoint, RngState};
use super::loss::pretrain_loss;
use super::masking::{Masker, ReplacementPool};
use super::optim::{AdamW, AdamWConfig, Schedule};
use crate::config::Config;
use crate::data::{bucket_plan_shuffled, collate, truncate_or_keep, Corpus, Document};
use crate::error::{invalid, Error, Result};
use crate::model::SelfDocModel;
use crate::numerics::Graph;

/// Name of the random-stream derivation recorded in checkpoints.
pub const RNG_SCHEME: &str = "chacha8-seed-stream-v1";

/// Independent random streams, one per purpose and index.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Pool = 1,
    Epoch = 2,
    Step = 3,
    Dropout = 4,
}

/// Generator for `(seed, stream, index)`; identical inputs always give
/// identical sequences, which is what makes resumption exact.
pub fn derived_rng(seed: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((stream as u64) << 48) | (index & ((1 << 48) - 1)));
    rng
}

/// Losses of one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    pub iter: usize,
    pub lr: f64,
    pub loss_lang: f64,
    pub loss_visn: f64,
    pub loss_total: f64,
}

impl StepLog {
    pub const CSV_HEADER: &'static str = "iter,lr,loss_lang,loss_visn,loss_total";

    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.iter, self.lr, self.loss_lang, self.loss_visn, self.loss_total
        )
    }
}

#[derive(Clone, Debug, Default)]
pub struct PretrainOptions {
    /// Directory for `metrics.csv` and checkpoints; nothing is written when unset.
    pub out_dir: Option<PathBuf>,
    /// Continue from this checkpoint.
    pub resume: Option<PathBuf>,
    /// Stop after this iteration even if the schedule runs longer.
    pub stop_after: Option<usize>,
}

pub struct PretrainOutcome {
    pub model: SelfDocModel,
    pub optimizer: AdamW,
    pub iteration: usize,
    pub log: Vec<StepLog>,
}

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const LAST_GOOD_FILE: &str = "last_good.bin";
pub const METRICS_FILE: &str = "metrics.csv";

fn checkpoint(cfg: &Config, model: &SelfDocModel, opt: &AdamW, iteration: usize) -> Checkpoint {
    Checkpoint {
        iteration,
        config: cfg.clone(),
        rng: RngState {
            seed: cfg.run.seed,
            scheme: RNG_SCHEME.into(),
        },
        params: model.params.clone(),
        optimizer: Some(opt.clone()),
        meta: serde_json::json!({"stage": "pretrain"}),
    }
}

struct Resumed {
    model: SelfDocModel,
    optimizer: AdamW,
    iteration: usize,
}

fn resume(path: &Path, cfg: &Config) -> Result<Resumed> {
    let ck = Checkpoint::load(path)?;
    if ck.config.model != cfg.model {
        return Err(Error::Checkpoint(
            "checkpoint model configuration differs from the run".into(),
        ));
    }
    if ck.rng.scheme != RNG_SCHEME || ck.rng.seed != cfg.run.seed {
        return Err(Error::Checkpoint(format!(
            "checkpoint random state ({}, seed {}) does not match this run (seed {})",
            ck.rng.scheme, ck.rng.seed, cfg.run.seed
        )));
    }
    let model = SelfDocModel::with_values(cfg.model.clone(), cfg.run.seed, &ck.params, |_| false)?;
    let optimizer = ck
        .optimizer
        .ok_or_else(|| Error::Checkpoint("checkpoint carries no optimizer state".into()))?;
    if optimizer.m.len() != model.params.len() {
        return Err(Error::Checkpoint("optimizer state does not match the model".into()));
    }
    Ok(Resumed {
        model,
        optimizer,
        iteration: ck.iteration,
    })
}

fn open_metrics(dir: &Path, append: bool) -> Result<std::fs::File> {
    let path = dir.join(METRICS_FILE);
    let fresh = !append || !path.exists();
    let mut f = OpenOptions::new()
        .create(true)
        .write(true)
        .append(!fresh)
        .truncate(fresh)
        .open(path)?;
    if fresh {
        writeln!(f, "{}", StepLog::CSV_HEADER)?;
    }
    Ok(f)
}

/// Bucket, mask, reconstruct and update for `run.total_iters` iterations.
///
/// Iteration `t` uses batch `(t - 1) mod n_batches` of epoch
/// `(t - 1) / n_batches`; each epoch's batch plan and each step's sampling
/// come from streams derived from the seed, so runs replay exactly and a
/// resumed run continues the same sequence.
pub fn pretrain(corpus: &Corpus, cfg: &Config, opts: &PretrainOptions) -> Result<PretrainOutcome> {
    let run = &cfg.run;
    cfg.model.validate()?;
    run.validate()?;
    if corpus.d_lang != cfg.model.d_lang || corpus.d_visn != cfg.model.d_visn {
        return invalid(format!(
            "corpus features are {}/{} wide, model expects {}/{}",
            corpus.d_lang, corpus.d_visn, cfg.model.d_lang, cfg.model.d_visn
        ));
    }
    let docs: &[Document] = &corpus.documents;
    if docs.is_empty() {
        return invalid("corpus has no documents");
    }

    let pool = ReplacementPool::from_documents(docs, run.pool_size, &mut derived_rng(run.seed, Stream::Pool, 0));
    let masker = Masker::new(run.masking.clone(), pool)?;
    let schedule = Schedule::new(run.base_lr, run.total_iters, run.warmup_ratio)?;
    let adam_cfg = AdamWConfig {
        weight_decay: run.weight_decay,
        ..AdamWConfig::default()
    };

    let (mut model, mut optimizer, start) = match &opts.resume {
        Some(p) => {
            let r = resume(p, cfg)?;
            info!("resuming from {} at iteration {}", p.display(), r.iteration);
            (r.model, r.optimizer, r.iteration)
        }
        None => {
            let m = SelfDocModel::new(cfg.model.clone(), run.seed)?;
            let o = AdamW::new(adam_cfg, &m.params);
            (m, o, 0)
        }
    };
    let end = opts.stop_after.map_or(run.total_iters, |s| s.min(run.total_iters));

    if let Some(dir) = &opts.out_dir {
        std::fs::create_dir_all(dir)?;
    }
    let mut metrics = match &opts.out_dir {
        Some(dir) => Some(open_metrics(dir, opts.resume.is_some())?),
        None => None,
    };

    let lengths: Vec<usize> = docs.iter().map(|d| d.len().min(run.max_len)).collect();
    let n_batches = crate::data::bucket_plan(&lengths, run.group_threshold, run.batch_size)?.len();
    let mut plan: Option<(usize, Vec<Vec<usize>>)> = None;
    let mut log = Vec::new();
    let started = Instant::now();

    for t in start + 1..=end {
        let (epoch, slot) = ((t - 1) / n_batches, (t - 1) % n_batches);
        if plan.as_ref().map(|p| p.0) != Some(epoch) {
            let mut rng = derived_rng(run.seed, Stream::Epoch, epoch as u64);
            plan = Some((
                epoch,
                bucket_plan_shuffled(&lengths, run.group_threshold, run.batch_size, &mut rng)?,
            ));
        }
        let members = &plan.as_ref().expect("plan set above").1[slot];
        let mut rng = derived_rng(run.seed, Stream::Step, t as u64);
        let picked: Vec<Document> = members
            .iter()
            .map(|&i| truncate_or_keep(&docs[i], run.max_len, &mut rng))
            .collect::<Result<_>>()?;
        let refs: Vec<&Document> = picked.iter().collect();
        let batch = collate(&refs, corpus.d_lang, corpus.d_visn)?;
        let (masked, records) = masker.apply(&batch, &mut rng);

        let step = (|| -> Result<Option<(StepLog, Vec<Option<crate::numerics::Tensor>>)>> {
            let mut g = Graph::new(&model.params);
            if cfg.model.dropout > 0.0 {
                g.set_dropout_rng(derived_rng(run.seed, Stream::Dropout, t as u64));
            }
            let enc = model.encode(&mut g, &masked)?;
            let Some(loss) = pretrain_loss(&mut g, &model, &enc, &records)? else {
                return Ok(None);
            };
            let value = |v: Option<crate::numerics::Var>| v.map_or(0.0, |v| g.tape.value(v).item());
            let entry = StepLog {
                iter: t,
                lr: schedule.lr(t),
                loss_lang: value(loss.lang),
                loss_visn: value(loss.visn),
                loss_total: value(Some(loss.total)),
            };
            if !entry.loss_total.is_finite() {
                return Err(Error::NonFinite(format!("loss at iteration {t}")));
            }
            g.tape.backward(loss.total)?;
            Ok(Some((entry, g.param_grads())))
        })();

        let (entry, grads) = match step {
            Ok(Some(s)) => s,
            Ok(None) => {
                warn!("iteration {t}: nothing was masked, step skipped");
                continue;
            }
            Err(e @ Error::NonFinite(_)) => {
                if let Some(dir) = &opts.out_dir {
                    checkpoint(cfg, &model, &optimizer, t - 1).save(&dir.join(LAST_GOOD_FILE))?;
                }
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        if let Err(e) = optimizer.update(&mut model.params, &grads, entry.lr) {
            if let Some(dir) = &opts.out_dir {
                checkpoint(cfg, &model, &optimizer, t - 1).save(&dir.join(LAST_GOOD_FILE))?;
            }
            return Err(e);
        }
        if let Some(f) = metrics.as_mut() {
            writeln!(f, "{}", entry.csv_line())?;
        }
        if t % 100 == 0 || t == end {
            info!(
                "iter {t}/{end} lr {:.3e} loss {:.5} ({:.1}s)",
                entry.lr,
                entry.loss_total,
                started.elapsed().as_secs_f64()
            );
        }
        log.push(entry);
        if let Some(dir) = &opts.out_dir {
            if run.checkpoint_every > 0 && t % run.checkpoint_every == 0 {
                checkpoint(cfg, &model, &optimizer, t).save(&dir.join(format!("checkpoint-{t}.bin")))?;
            }
        }
    }

    if let Some(dir) = &opts.out_dir {
        checkpoint(cfg, &model, &optimizer, end).save(&dir.join(CHECKPOINT_FILE))?;
    }
    Ok(PretrainOutcome {
        model,
        optimizer,
        iteration: end,
        log,
    })
}
