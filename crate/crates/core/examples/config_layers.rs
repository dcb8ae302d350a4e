//! Builds a run configuration the way the command line does: a profile,
//! then a JSON file merged on top, then dotted-path overrides.
//!
//!     cargo run --example config_layers -- [key.path=value ...]

use selfdoc::config::{parse_override, Config};
use serde_json::json;

fn main() -> selfdoc::Result<()> {
    let file = json!({"run": {"seed": 11, "finetune": {"epochs": 5}}});
    let overrides = std::env::args()
        .skip(1)
        .map(|s| parse_override(&s))
        .collect::<selfdoc::Result<Vec<_>>>()?;

    let cfg = Config::layered("tiny", Some(&file), &overrides)?;
    println!("{}", serde_json::to_string_pretty(&cfg)?);

    let typo = [parse_override("run.finetune.epoch=3")?];
    if let Err(e) = Config::layered("tiny", None, &typo) {
        println!("unknown keys are rejected: {e}");
    }
    Ok(())
}
