//! Trains the full model and the variant without cross-attention on a task
//! whose labels need information from the other modality, then compares
//! held-out accuracy.
//!
//!     cargo run --release --example cross_ablation -- [train_docs] [epochs] [lr]

use std::time::Instant;

use selfdoc::config::{layouts, Config};
use selfdoc::data::{cross_modal_task, CrossTaskConfig};
use selfdoc::downstream::{evaluate, finetune, FinetuneSettings, Task};
use selfdoc::model::SelfDocModel;

fn main() -> selfdoc::Result<()> {
    let mut args = std::env::args().skip(1);
    let train_docs: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(200);
    let epochs: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(30);
    let lr: f64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(1e-3);

    let cfg = Config::profile("tiny")?;
    // One draw, so both splits share the sign direction and style vectors.
    let mut docs = cross_modal_task(&CrossTaskConfig {
        docs: train_docs + 100,
        d_lang: cfg.model.d_lang,
        d_visn: cfg.model.d_visn,
        group_sizes: vec![3, 5],
        noise_sigma: 0.1,
        seed: 1,
    })?
    .documents;
    let test = docs.split_off(train_docs);
    let train = docs;

    for (name, layout) in [("full", layouts::full()), ("no_cross", layouts::without_cross())] {
        let started = Instant::now();
        let mut model_cfg = cfg.model.clone();
        model_cfg.cross_layout = layout;
        let mut model = SelfDocModel::new(model_cfg, cfg.run.seed)?;
        let mut settings = FinetuneSettings::from_run(&cfg.run, Task::Ner, Some(false), false);
        settings.epochs = epochs;
        settings.lr = lr;
        let losses = finetune(&mut model, &train, &settings)?;
        let eval = evaluate(&model, &test, Task::Ner, false)?;
        println!(
            "{name:9} final train loss {:.4}  held-out accuracy {:.3}  ({:.1}s)",
            losses.last().copied().unwrap_or(f64::NAN),
            eval.metrics.micro_f1.unwrap_or(f64::NAN),
            started.elapsed().as_secs_f64()
        );
    }
    Ok(())
}
