//! Exports per-layer attention weights and modality gate values for a few
//! documents, then prints where each `[LANG]` head looks in the last layer.
//!
//!     cargo run --release --example attention_maps -- [out.json]

use selfdoc::config::Config;
use selfdoc::cross::{export_attention, save_attention};
use selfdoc::data::{collate, synth_generate, GeneratorConfig};
use selfdoc::model::SelfDocModel;

fn main() -> selfdoc::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "attention.json".into());
    let cfg = Config::profile("tiny")?;
    let (dl, dv) = (cfg.model.d_lang, cfg.model.d_visn);
    let docs = synth_generate(&GeneratorConfig::new(2, 2, dl, dv, 1), 1)?.documents;
    let model = SelfDocModel::new(cfg.model, cfg.run.seed)?;

    let refs: Vec<_> = docs.iter().collect();
    let records = export_attention(&model, &collate(&refs, dl, dv)?)?;
    save_attention(out.as_ref(), &records)?;

    let rec = &records[0];
    println!("{} layers recorded for `{}` -> {out}", rec.layers.len(), rec.doc_id);
    let last = rec.layers.last().expect("at least one layer");
    for (h, head) in last.heads.iter().enumerate() {
        let row = &head[0];
        let (arg, w) = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .expect("non-empty row");
        println!("  {} head {h}: slot 0 attends most to slot {arg} ({w:.3})", last.name);
    }
    if let Some(maa) = &rec.maa {
        println!(
            "  gate w_lang {:?}",
            maa.w_lang.iter().map(|w| (w * 1e3).round() / 1e3).collect::<Vec<_>>()
        );
    }
    Ok(())
}
