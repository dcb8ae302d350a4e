//! Command-line front end.
//!
//! Every flag that changes behaviour is a shorthand for a dotted config
//! key: `--seed` is `run.seed`, `--workers` is `run.workers`,
//! `--f32`/`--f64` is `run.precision`, `--freeze`/`--no-freeze` is
//! `run.finetune.freeze`, `--iters` is `run.total_iters`. Any other key
//! can be set with `--set path=value`. Layering order is profile, then the
//! `--config` file, then `--set`, then the shorthand flags.

pub mod commands;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

pub use commands::*;

use crate::cluster::{EmbeddingMode, KMeansInit};
use crate::config::{parse_override, set_path, Config};
use crate::data::{CrossTaskConfig, GeneratorConfig};
use crate::downstream::Task;
use crate::error::{Error, Result};

/// Usage or configuration problem.
pub const EXIT_USAGE: i32 = 2;
/// Failure while running a valid command.
pub const EXIT_RUNTIME: i32 = 1;

#[derive(Debug, Parser)]
#[command(
    name = "selfdoc",
    version,
    about = "Two-stream document encoder: synthesis, pre-training, fine-tuning, clustering"
)]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// JSON file merged over the profile.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Built-in profile: tiny or base.
    #[arg(long, global = true, default_value = "tiny")]
    pub profile: String,
    /// run.seed
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output file or directory, depending on the command.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// run.workers
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Compute in 64-bit floats (run.precision = f64).
    #[arg(long, global = true, conflicts_with = "f32")]
    pub f64: bool,
    /// Request 32-bit floats (run.precision = f32); refused by this build.
    #[arg(long, global = true)]
    pub f32: bool,
    /// Extra `dotted.key=value` override; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SynthKind {
    Standard,
    Cross,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum TaskArg {
    Ner,
    Cls,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    Input,
    Model,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum InitArg {
    Plusplus,
    Random,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus (JSON Lines) at --out.
    Synth {
        #[arg(long, value_enum, default_value = "standard")]
        kind: SynthKind,
    },
    /// Masked-feature pre-training; writes checkpoints and metrics.csv into --out.
    Pretrain {
        #[arg(long)]
        corpus: PathBuf,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// run.total_iters
        #[arg(long)]
        iters: Option<usize>,
        /// Stop after this iteration without changing the schedule.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Train and score a task head; writes finetuned.bin, metrics.json and predictions.jsonl into --out.
    Finetune {
        #[arg(value_enum)]
        task: TaskArg,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        eval_corpus: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Keep the backbone fixed (run.finetune.freeze = true).
        #[arg(long, conflicts_with = "no_freeze")]
        freeze: bool,
        /// Train the backbone too (run.finetune.freeze = false).
        #[arg(long)]
        no_freeze: bool,
        /// Add each document's whole-page vector to the class feature.
        #[arg(long)]
        global_feature: bool,
    },
    /// k-means over document embeddings, scored against class labels.
    Cluster {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        k: usize,
        #[arg(long, value_enum, default_value = "input")]
        mode: ModeArg,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "plusplus")]
        init: InitArg,
    },
    /// Finite-difference check of the full model's gradient.
    Gradcheck {
        /// Minimum number of sampled coordinates.
        #[arg(long, default_value_t = 200)]
        coords: usize,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
    },
    /// Write per-layer attention weights and modality weights as JSON.
    ExportAttention {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Only the first N documents.
        #[arg(long)]
        limit: Option<usize>,
    },
}

fn read_json(path: &Path) -> Result<Value> {
    require_file(path, "config")?;
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// Overrides from `--set` followed by the shorthand flags.
fn overrides(common: &Common, extra: &[(&str, Value)]) -> Result<Vec<(String, Value)>> {
    let mut out: Vec<(String, Value)> = common.set.iter().map(|s| parse_override(s)).collect::<Result<_>>()?;
    if let Some(s) = common.seed {
        out.push(("run.seed".into(), json!(s)));
    }
    if let Some(w) = common.workers {
        out.push(("run.workers".into(), json!(w)));
    }
    if common.f32 {
        out.push(("run.precision".into(), json!("f32")));
    }
    if common.f64 {
        out.push(("run.precision".into(), json!("f64")));
    }
    out.extend(extra.iter().map(|(k, v)| (k.to_string(), v.clone())));
    Ok(out)
}

/// Resolves the run configuration; `base` replaces the profile when a
/// checkpoint already fixes the model.
pub fn resolve_config(common: &Common, base: Option<Config>, extra: &[(&str, Value)]) -> Result<Config> {
    let base = match base {
        Some(c) => c,
        None => Config::profile(&common.profile)?,
    };
    let file = common.config.as_deref().map(read_json).transpose()?;
    base.layer(file.as_ref(), &overrides(common, extra)?)
}

fn synth_spec(common: &Common, kind: SynthKind) -> Result<SynthSpec> {
    let profile = Config::profile(&common.profile)?.model;
    let seed = common.seed.unwrap_or(0);
    let mut inner = match kind {
        SynthKind::Standard => serde_json::to_value(GeneratorConfig::new(4, 8, profile.d_lang, profile.d_visn, seed))?,
        SynthKind::Cross => serde_json::to_value(CrossTaskConfig {
            docs: 200,
            d_lang: profile.d_lang,
            d_visn: profile.d_visn,
            group_sizes: vec![3, 5],
            noise_sigma: 0.1,
            seed,
        })?,
    };
    if let Some(p) = &common.config {
        crate::config::merge(&mut inner, &read_json(p)?);
    }
    for s in &common.set {
        let (k, val) = parse_override(s)?;
        set_path(&mut inner, &k, val)?;
    }
    if let Some(s) = common.seed {
        set_path(&mut inner, "seed", json!(s))?;
    }
    let bad = |e: serde_json::Error| Error::Config(format!("generator config: {e}"));
    Ok(match kind {
        SynthKind::Standard => SynthSpec::Standard(serde_json::from_value(inner).map_err(bad)?),
        SynthKind::Cross => SynthSpec::Cross(serde_json::from_value(inner).map_err(bad)?),
    })
}

fn need_out(common: &Common) -> Result<&Path> {
    common
        .out
        .as_deref()
        .ok_or_else(|| Error::Config("this command needs --out".into()))
}

/// Prints a JSON summary; a closed pipe downstream is not an error.
fn print_json<T: serde::Serialize>(v: &T) -> Result<()> {
    use std::io::Write;
    let text = serde_json::to_string_pretty(v)?;
    match writeln!(std::io::stdout().lock(), "{text}") {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

/// Runs a parsed command line.
pub fn execute(cli: &Cli) -> Result<()> {
    let common = &cli.common;
    match &cli.command {
        Command::Synth { kind } => {
            let spec = synth_spec(common, *kind)?;
            let corpus = cmd_synth(&spec, need_out(common)?, common.workers.unwrap_or(1))?;
            print_json(&json!({"documents": corpus.documents.len(), "d_lang": corpus.d_lang, "d_visn": corpus.d_visn}))
        }
        Command::Pretrain {
            corpus,
            resume,
            iters,
            stop_after,
        } => {
            let base = resume.as_deref().map(checkpoint_config).transpose()?;
            let extra: Vec<(&str, Value)> = iters.iter().map(|n| ("run.total_iters", json!(n))).collect();
            let cfg = resolve_config(common, base, &extra)?;
            let out = cmd_pretrain(&cfg, corpus, need_out(common)?, resume.as_deref(), *stop_after)?;
            let last = out.log.last().map(|l| l.loss_total);
            print_json(&json!({"iteration": out.iteration, "steps": out.log.len(), "final_loss": last}))
        }
        Command::Finetune {
            task,
            corpus,
            eval_corpus,
            checkpoint,
            freeze,
            no_freeze,
            global_feature,
        } => {
            let base = checkpoint.as_deref().map(checkpoint_config).transpose()?;
            let mut extra = Vec::new();
            if *freeze || *no_freeze {
                extra.push(("run.finetune.freeze", json!(*freeze)));
            }
            let cfg = resolve_config(common, base, &extra)?;
            let args = FinetuneArgs {
                task: match task {
                    TaskArg::Ner => Task::Ner,
                    TaskArg::Cls => Task::Cls,
                },
                corpus: corpus.clone(),
                eval_corpus: eval_corpus.clone(),
                checkpoint: checkpoint.clone(),
                out: need_out(common)?.to_path_buf(),
                freeze: None,
                use_global: *global_feature,
            };
            print_json(&cmd_finetune(&cfg, &args)?)
        }
        Command::Cluster {
            corpus,
            k,
            mode,
            checkpoint,
            init,
        } => {
            let base = checkpoint.as_deref().map(checkpoint_config).transpose()?;
            let cfg = resolve_config(common, base, &[])?;
            let args = ClusterArgs {
                corpus: corpus.clone(),
                k: *k,
                mode: match mode {
                    ModeArg::Input => EmbeddingMode::Input,
                    ModeArg::Model => EmbeddingMode::Model,
                },
                checkpoint: checkpoint.clone(),
                init: match init {
                    InitArg::Plusplus => KMeansInit::PlusPlus,
                    InitArg::Random => KMeansInit::Random,
                },
                out: common.out.clone(),
            };
            print_json(&cmd_cluster(&cfg, &args)?)
        }
        Command::Gradcheck { coords, eps } => {
            let cfg = resolve_config(common, None, &[])?;
            let report = cmd_gradcheck(&cfg, *coords, *eps, common.out.as_deref())?;
            print_json(&json!({
                "max_rel_err": report.max_rel_err,
                "coords_checked": report.coords_checked,
                "groups": report.per_group.len(),
            }))
        }
        Command::ExportAttention {
            corpus,
            checkpoint,
            limit,
        } => {
            let base = checkpoint.as_deref().map(checkpoint_config).transpose()?;
            let cfg = resolve_config(common, base, &[])?;
            let n = cmd_export_attention(&cfg, checkpoint.as_deref(), corpus, need_out(common)?, *limit)?;
            print_json(&json!({"documents": n}))
        }
    }
}

/// Exit status for an error: configuration and input problems are usage
/// errors, everything else is a runtime failure.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Invalid(_) | Error::Parse { .. } => EXIT_USAGE,
        _ => EXIT_RUNTIME,
    }
}

/// Parses `args`, runs the command and returns the process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::new().filter_or("SELFDOC_LOG", "info")).try_init();
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
