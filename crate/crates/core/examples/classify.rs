//! Document classification from the fused `[LANG]` and `[VISN]` outputs,
//! with and without a whole-page visual feature.
//!
//!     cargo run --release --example classify -- [epochs]

use selfdoc::config::Config;
use selfdoc::data::{synth_generate, GeneratorConfig};
use selfdoc::downstream::{evaluate, finetune, FinetuneSettings, Task};
use selfdoc::model::SelfDocModel;

fn main() -> selfdoc::Result<()> {
    let mut cfg = Config::profile("tiny")?;
    if let Some(n) = std::env::args().nth(1).and_then(|s| s.parse().ok()) {
        cfg.run.finetune.epochs = n;
    }
    let mut gen = GeneratorConfig::new(4, 16, cfg.model.d_lang, cfg.model.d_visn, 3);
    gen.global_dim = Some(8);
    let docs = synth_generate(&gen, 1)?.documents;
    let (train, test) = docs.split_at(docs.len() / 2);

    for use_global in [false, true] {
        let mut model_cfg = cfg.model.clone();
        model_cfg.d_global = use_global.then_some(8);
        let mut model = SelfDocModel::new(model_cfg, cfg.run.seed)?;
        let settings = FinetuneSettings::from_run(&cfg.run, Task::Cls, None, use_global);
        finetune(&mut model, train, &settings)?;
        let eval = evaluate(&model, test, Task::Cls, use_global)?;
        println!(
            "global feature {:5}  accuracy {:.3} on {} documents (backbone {})",
            use_global,
            eval.metrics.accuracy.unwrap_or(f64::NAN),
            eval.metrics.n,
            if settings.freeze { "frozen" } else { "trained" }
        );
    }
    Ok(())
}
