//! End-to-end serving simulation: prefill a long context into the tiered
//! store, then run metered decode steps and print the ledger trail.
//!
//! ```bash
//! cargo run -p kvq --example serve_simulation
//! ```

use kvq::harness::{run_serve_sim, ExperimentConfig};

fn main() -> kvq::Result<()> {
    let cfg = ExperimentConfig::from_str_grammar(
        "
n = 8192
d = 128
heads = 2
codebook_size = 64
decode_steps = 4
topk_fraction = 0.03
sentinel_tokens = 4
recent_tokens = 64
seed = 1
",
    )?;
    let out = run_serve_sim(&cfg)?;
    for r in &out.rows {
        println!("{:<18} {:>12}", r.metric, format!("{:.6}", r.value));
    }
    println!("\nledger snapshots (cumulative, one line per decode step):");
    print!("{}", out.ledger_jsonl());
    Ok(())
}
