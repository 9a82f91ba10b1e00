//! The two-tier KV store: append tokens, decode with metered accesses,
//! and read the ledger.
//!
//! ```bash
//! cargo run -p kvq --example tiered_decode
//! ```

use kvq::attention::RetrievalPolicy;
use kvq::codebook::{train_conventional, TrainConfig};
use kvq::harness::synth;
use kvq::numerics::{sample_gaussian, Covariance, SeededRng};
use kvq::offload::{decode_step, AccessLedger, TierConfig, TieredKvStore};

fn main() -> kvq::Result<()> {
    let d = 32;
    let n = 4096;
    let heads = 4;
    let params = synth::MixtureParams {
        components: 8,
        center_spread: 1.0,
        within_std: 0.5,
    };
    let root = SeededRng::new(3);

    // One codebook per head, trained offline.
    let mut codebooks = Vec::new();
    for head in 0..heads {
        let hs = root.derive(head as u64);
        let centers = synth::mixture_centers(&mut hs.derive(1), &params, d)?;
        let train = synth::mixture_tokens(&mut hs.derive(2), &centers, params.within_std, 2048)?;
        codebooks.push(train_conventional(
            &train,
            &TrainConfig::new(hs.derive(3)).with_codebook_size(64),
        )?);
    }

    let mut store = TieredKvStore::new(1, heads, d, TierConfig::default(), codebooks)?;

    // Prefill: keys go to the slow tier, codeword indices to the fast tier.
    for t in 0..n {
        let mut k_rows = Vec::new();
        let mut v_rows = Vec::new();
        for head in 0..heads {
            let mut ts = root.derive(1000 + (t * heads + head) as u64);
            k_rows.push(
                sample_gaussian(&mut ts, 1, d, 0.0, &Covariance::Scalar(1.0))?
                    .row(0)
                    .to_vec(),
            );
            v_rows.push(
                sample_gaussian(&mut ts, 1, d, 0.0, &Covariance::Scalar(1.0))?
                    .row(0)
                    .to_vec(),
            );
        }
        store.append_token(&k_rows, &v_rows)?;
    }
    println!(
        "store: {} tokens x {} heads, slow tier {} KiB, fast-tier indices {} KiB, aux_mem {:.6}",
        store.context_len(),
        store.head_slots(),
        store.slow_tier_bytes() / 1024,
        store.fast_tier_index_bytes() / 1024,
        store.aux_mem_ratio()
    );

    // Metered decode steps.
    let ledger = AccessLedger::new();
    let policy = RetrievalPolicy::with_preservation(0.03, 4, 64)?;
    for step in 0..3 {
        let queries: Vec<Vec<f64>> = (0..heads)
            .map(|head| {
                let mut qs = root.derive(9000 + (step * heads + head) as u64);
                sample_gaussian(&mut qs, 1, d, 0.0, &Covariance::Scalar(1.0))
                    .map(|m| m.row(0).to_vec())
            })
            .collect::<kvq::Result<_>>()?;
        let report = decode_step(&store, &queries, &policy, Some(&ledger))?;
        println!(
            "step {step}: selected per head {:?}, sparsity {:.4}",
            report.selected_count, report.sparsity_ratio
        );
    }

    let snapshot = ledger.snapshot(store.aux_mem_ratio());
    println!(
        "\nledger: slow {} B, fast {} B, full-equivalent {} B, cumulative sparsity {:.4}",
        snapshot.slow_bytes, snapshot.fast_bytes, snapshot.full_equiv_bytes, snapshot.sparsity
    );
    println!("as json: {}", serde_json::to_string(&snapshot).unwrap());
    Ok(())
}
