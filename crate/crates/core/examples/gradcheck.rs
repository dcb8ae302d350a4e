//! Compares analytic gradients of the full tiny model with central finite
//! differences and prints the worst parameter tensors.
//!
//!     cargo run --release --example gradcheck -- [coords]

use selfdoc::cli::commands::gradcheck_model;
use selfdoc::config::ModelConfig;

fn main() -> selfdoc::Result<()> {
    let coords: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(200);
    let started = std::time::Instant::now();
    let report = gradcheck_model(&ModelConfig::tiny(), 0, coords, 1e-5)?;
    println!(
        "max relative error {:.2e} over {} coordinates in {} tensors ({:.1}s)",
        report.max_rel_err,
        report.coords_checked,
        report.per_group.len(),
        started.elapsed().as_secs_f64()
    );
    let mut worst: Vec<_> = report.per_group.iter().collect();
    worst.sort_by(|a, b| b.1.total_cmp(a.1));
    for (name, err) in worst.iter().take(5) {
        println!("  {name:32} {err:.2e}");
    }
    Ok(())
}
