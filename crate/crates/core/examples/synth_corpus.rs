//! Generates a labelled synthetic corpus, writes it as JSON Lines and
//! reads it back.
//!
//!     cargo run --release --example synth_corpus -- [out.jsonl] [docs_per_class]

use selfdoc::data::{load_corpus, save_corpus, synth_generate, GeneratorConfig};

fn main() -> selfdoc::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = args.next().unwrap_or_else(|| "synth.jsonl".into());
    let per_class: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(8);

    let cfg = GeneratorConfig::new(4, per_class, 16, 32, 7);
    let corpus = synth_generate(&cfg, 2)?;
    save_corpus(&out, &corpus)?;
    let back = load_corpus(&out)?;
    assert_eq!(back.documents, corpus.documents);

    let proposals: usize = corpus.documents.iter().map(|d| d.len()).sum();
    println!(
        "{} documents, {proposals} proposals, features {}/{} wide -> {out}",
        corpus.documents.len(),
        corpus.d_lang,
        corpus.d_visn
    );
    let doc = &corpus.documents[0];
    println!("first document `{}` (class {:?}):", doc.doc_id, doc.class_label);
    for p in &doc.proposals {
        println!(
            "  box {:?}  entity {:?}",
            p.bbox.map(|c| (c * 100.0).round() / 100.0),
            p.entity_label
        );
    }
    Ok(())
}
