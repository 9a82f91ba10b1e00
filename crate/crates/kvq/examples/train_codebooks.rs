//! Codebook training: conventional vs query-aware, plus the binary file
//! format round trip.
//!
//! ```bash
//! cargo run -p kvq --example train_codebooks
//! ```

use kvq::codebook::{
    attention_mse, estimate_h, load_codebook, save_codebook, train_conventional_traced,
    train_query_aware_traced, TrainConfig,
};
use kvq::harness::synth;
use kvq::numerics::SeededRng;

fn main() -> kvq::Result<()> {
    let d = 16;
    let n = 2048;
    let params = synth::MixtureParams {
        components: 8,
        center_spread: 1.0,
        within_std: 0.5,
    };
    let root = SeededRng::new(7);
    let centers = synth::mixture_centers(&mut root.derive(1), &params, d)?;
    let keys = synth::mixture_tokens(&mut root.derive(2), &centers, params.within_std, n)?;

    // Anisotropic queries make the second-moment matrix H far from a
    // scaled identity, which is what the query-aware metric exploits.
    let queries = synth::anisotropic_queries(&mut root.derive(3), 2048, d, 50.0)?;
    let h = estimate_h(&queries, 1e-6)?;

    let tc = TrainConfig::new(root.derive(4)).with_codebook_size(32);
    let (conv, conv_trace) = train_conventional_traced(&keys, &tc)?;
    let (qa, qa_trace) = train_query_aware_traced(&keys, &h, &tc)?;

    println!(
        "conventional: {} iterations, objective {:.4} -> {:.4}",
        conv_trace.iterations,
        conv_trace.objective_per_iteration.first().unwrap(),
        conv_trace.objective_per_iteration.last().unwrap()
    );
    println!(
        "query-aware:  {} iterations, objective {:.4} -> {:.4} (z-space = score error)",
        qa_trace.iterations,
        qa_trace.objective_per_iteration.first().unwrap(),
        qa_trace.objective_per_iteration.last().unwrap()
    );

    // The objective that matters downstream: squared error of the score
    // approximation.
    let eval_queries = synth::anisotropic_queries(&mut root.derive(5), 512, d, 50.0)?;
    let eval_keys = synth::mixture_tokens(&mut root.derive(6), &centers, params.within_std, 512)?;
    let mse_conv = attention_mse(&eval_queries, &eval_keys, &conv)?;
    let mse_qa = attention_mse(&eval_queries, &eval_keys, &qa)?;
    println!("\nscore-approximation MSE: conventional {mse_conv:.4}, query-aware {mse_qa:.4}");

    // Binary round trip.
    let dir = std::env::temp_dir();
    let path = dir.join("example_codebook.kvqc");
    save_codebook(&path, &qa)?;
    let loaded = load_codebook(&path)?;
    println!(
        "\nsaved and reloaded {} ({} codewords, dim {}, kind {:?})",
        path.display(),
        loaded.size(),
        loaded.head_dim(),
        loaded.kind()
    );
    std::fs::remove_file(&path).ok();
    Ok(())
}
