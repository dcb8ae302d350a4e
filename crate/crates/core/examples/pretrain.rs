//! Pre-trains the tiny model on a 32-document synthetic corpus and prints
//! the loss curve. Pass an output directory to keep the checkpoint and
//! `metrics.csv`.
//!
//!     cargo run --release --example pretrain -- [out_dir] [iterations]

use std::time::Instant;

use selfdoc::config::Config;
use selfdoc::data::{synth_generate, GeneratorConfig};
use selfdoc::pretrain::{pretrain, PretrainOptions};

fn main() -> selfdoc::Result<()> {
    let mut args = std::env::args().skip(1);
    let out_dir = args.next().filter(|s| !s.is_empty()).map(Into::into);
    let iters: Option<usize> = args.next().and_then(|s| s.parse().ok());

    let mut cfg = Config::profile("tiny")?;
    if let Some(n) = iters {
        cfg.run.total_iters = n;
    }
    let corpus = synth_generate(&GeneratorConfig::new(4, 8, cfg.model.d_lang, cfg.model.d_visn, 7), 1)?;

    let started = Instant::now();
    let out = pretrain(
        &corpus,
        &cfg,
        &PretrainOptions {
            out_dir,
            ..Default::default()
        },
    )?;
    for s in out.log.iter().filter(|s| s.iter == 1 || s.iter % 100 == 0) {
        println!("iter {:5}  lr {:.2e}  loss {:.4}", s.iter, s.lr, s.loss_total);
    }
    println!(
        "{} iterations in {:.1}s",
        out.iteration,
        started.elapsed().as_secs_f64()
    );
    Ok(())
}
