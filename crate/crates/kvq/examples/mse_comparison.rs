//! Objective misalignment: a codebook that minimizes key reconstruction
//! error is not the one that minimizes score-approximation error once the
//! query second moment is anisotropic.
//!
//! ```bash
//! cargo run -p kvq --example mse_comparison
//! ```

use kvq::harness::{run_attention_mse, ExperimentConfig};

fn main() -> kvq::Result<()> {
    let cfg = ExperimentConfig::from_str_grammar(
        "
n = 2048
d = 32
codebook_size = 64
num_seeds = 5
query_cond = 32
seed = 1
",
    )?;
    let rows = run_attention_mse(&cfg)?;
    println!("{:<28} {:>10}", "metric", "value");
    for r in &rows {
        println!("{:<28} {:>10.4}", r.metric, r.value);
    }
    Ok(())
}
