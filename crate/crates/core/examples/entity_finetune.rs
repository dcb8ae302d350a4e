//! Fits the modality gate and a linear entity head on top of a frozen
//! backbone, then scores held-out documents with micro-F1.
//!
//!     cargo run --release --example entity_finetune -- [checkpoint.bin]

use selfdoc::config::Config;
use selfdoc::data::{synth_generate, GeneratorConfig};
use selfdoc::downstream::{evaluate, finetune, FinetuneSettings, Task};
use selfdoc::model::{is_backbone, SelfDocModel};
use selfdoc::pretrain::Checkpoint;

fn main() -> selfdoc::Result<()> {
    let cfg = Config::profile("tiny")?;
    let mut model = match std::env::args().nth(1) {
        Some(path) => {
            let ck = Checkpoint::load(path.as_ref())?;
            SelfDocModel::with_values(cfg.model.clone(), cfg.run.seed, &ck.params, |n| !is_backbone(n))?
        }
        None => SelfDocModel::new(cfg.model.clone(), cfg.run.seed)?,
    };

    let corpus = synth_generate(&GeneratorConfig::new(4, 32, cfg.model.d_lang, cfg.model.d_visn, 7), 1)?;
    // Alternate blocks of four documents so every class lands on both sides.
    let (train, test): (Vec<_>, Vec<_>) = corpus
        .documents
        .into_iter()
        .enumerate()
        .partition(|(i, _)| (i / 4) % 2 == 0);
    let train: Vec<_> = train.into_iter().map(|(_, d)| d).collect();
    let test: Vec<_> = test.into_iter().map(|(_, d)| d).collect();

    let settings = FinetuneSettings::from_run(&cfg.run, Task::Ner, None, false);
    let before = model.backbone_fingerprint();
    let losses = finetune(&mut model, &train, &settings)?;
    assert_eq!(model.backbone_fingerprint(), before, "backbone must stay frozen");

    let eval = evaluate(&model, &test, Task::Ner, false)?;
    let m = &eval.metrics;
    println!(
        "epoch losses: first {:.4}, last {:.4}",
        losses[0],
        losses[losses.len() - 1]
    );
    println!(
        "held-out micro-F1 {:.4} (without `other`: {:.4}) over {} proposals",
        m.micro_f1.unwrap_or(f64::NAN),
        m.micro_f1_excluding_other.unwrap_or(f64::NAN),
        m.n
    );
    println!("modality gate range ({:.3}, {:.3})", m.maa_min, m.maa_max);
    Ok(())
}
