//! The retrieval pipeline on one head: quantize keys, approximate scores
//! from codeword indices, select top-K, and run selective attention.
//!
//! ```bash
//! cargo run -p kvq --example score_approximation
//! ```

use kvq::attention::{
    approx_scores, exact_attention, recall_at_k, select_topk, selective_attention,
    RetrievalPolicy,
};
use kvq::codebook::{quantize, train_conventional, TrainConfig};
use kvq::harness::synth;
use kvq::numerics::{dot, sample_gaussian, Covariance, SeededRng};
use kvq::rope::{RopeConfig, RopeMode};

fn main() -> kvq::Result<()> {
    let d = 16;
    let n = 1024;
    let params = synth::MixtureParams {
        components: 8,
        center_spread: 1.0,
        within_std: 0.4,
    };
    let root = SeededRng::new(11);
    let centers = synth::mixture_centers(&mut root.derive(1), &params, d)?;
    let keys = synth::mixture_tokens(&mut root.derive(2), &centers, params.within_std, n)?;
    let values = sample_gaussian(&mut root.derive(3), n, d, 0.0, &Covariance::Scalar(1.0))?;
    // A query aligned with one content cluster: attention mass concentrates
    // on that cluster's tokens, which is the regime retrieval exploits.
    let noise = sample_gaussian(&mut root.derive(4), 1, d, 0.0, &Covariance::Scalar(0.05))?;
    let q: Vec<f64> = centers
        .row(0)
        .iter()
        .zip(noise.row(0))
        .map(|(c, e)| 3.0 * c + e)
        .collect();
    let q = q.as_slice();

    let exact: Vec<f64> = (0..n).map(|j| dot(q, keys.row(j))).collect();
    let policy = RetrievalPolicy::with_preservation(0.03, 4, 64)?;
    let k = ((0.03 * n as f64).ceil()) as usize;
    let rope = RopeConfig::new(d, RopeMode::Windowed)?;
    let full = exact_attention(q, &keys, &values, &rope)?;
    let full_norm: f64 = full.iter().map(|a| a * a).sum::<f64>().sqrt();
    let train_keys = synth::mixture_tokens(&mut root.derive(5), &centers, params.within_std, n)?;

    // Codebook size buys within-cluster resolution, and with it both
    // retrieval recall and output fidelity.
    println!("{:<14} {:>10} {:>14}", "codebook", "recall@K", "rel out err");
    for size in [32usize, 128, 512] {
        let tc = TrainConfig::new(root.derive(6)).with_codebook_size(size);
        let cb = train_conventional(&train_keys, &tc)?;
        let indices = quantize(&keys, &cb)?;
        // Decode path: scores from codewords alone — no key rows touched.
        let approx = approx_scores(q, &indices, &cb)?;
        let selection = select_topk(&approx, &policy);
        let out = selective_attention(q, &selection, &keys, &values, &rope)?;
        let err: f64 = out
            .iter()
            .zip(&full)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        println!(
            "{size:<14} {:>10.3} {:>14.3e}",
            recall_at_k(&approx, &exact, k)?,
            err / full_norm
        );
    }

    // The lossless endpoint: one codeword per distinct key recovers the
    // exact ranking, and full selection recovers the exact output.
    let lossless = kvq::codebook::Codebook::new_conventional(keys.clone())?;
    let indices = quantize(&keys, &lossless)?;
    let approx = approx_scores(q, &indices, &lossless)?;
    println!(
        "{:<14} {:>10.3}   (one codeword per key)",
        "lossless",
        recall_at_k(&approx, &exact, k)?
    );
    println!(
        "\nselected set per configuration: top-{k} plus 4 sentinel + 64 recent of {n} tokens"
    );
    Ok(())
}
