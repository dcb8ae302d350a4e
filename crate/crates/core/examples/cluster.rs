//! Clusters synthetic documents by their mean input embedding and by the
//! model's fused outputs, reporting clustering accuracy and NMI.
//!
//!     cargo run --release --example cluster -- [k]

use selfdoc::cluster::{cluster_documents, EmbeddingMode, KMeansOptions};
use selfdoc::config::Config;
use selfdoc::data::{synth_generate, GeneratorConfig};
use selfdoc::model::SelfDocModel;

fn main() -> selfdoc::Result<()> {
    let k: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(4);
    let cfg = Config::profile("tiny")?;
    let docs = synth_generate(&GeneratorConfig::new(k, 20, cfg.model.d_lang, cfg.model.d_visn, 5), 1)?.documents;
    let model = SelfDocModel::new(cfg.model, cfg.run.seed)?;

    for mode in [EmbeddingMode::Input, EmbeddingMode::Model] {
        let r = cluster_documents(&docs, mode, Some(&model), &KMeansOptions::new(k, 0))?;
        println!(
            "{:?} embedding: k={} n={}  acc {:.3}  nmi {:.3}  inertia {:.2}",
            mode, r.k, r.n, r.acc, r.nmi, r.inertia
        );
    }
    Ok(())
}
