use super::*;

fn tiny_cfg(text: &str) -> ExperimentConfig {
    ExperimentConfig::from_str_grammar(text).unwrap()
}

#[test]
fn similarity_rows_and_determinism() {
    let cfg = tiny_cfg("n = 256\ncodebook_size = 16\nd = 8\nheads = 2\nseed = 5");
    let rows = run_codebook_similarity(&cfg).unwrap();
    let again = run_codebook_similarity(&cfg).unwrap();
    assert_eq!(rows, again);
    assert!(rows.iter().any(|r| r.metric == "sim_gap"));
    let pre = rows.iter().find(|r| r.metric == "mean_sim_pre_pe").unwrap();
    let post = rows.iter().find(|r| r.metric == "mean_sim_post_pe").unwrap();
    assert!((-1.0..=1.0).contains(&pre.value));
    assert!((-1.0..=1.0).contains(&post.value));
}

#[test]
fn identical_samples_have_unit_self_similarity() {
    // The degenerate two-samples-coincide case, exercised at the library
    // level: same keys, same training seed, similarity exactly 1.
    let cfg = tiny_cfg("n = 128\ncodebook_size = 8\nd = 8");
    let stream = crate::numerics::SeededRng::new(9);
    let keys = resolve_keys(&cfg, &stream).unwrap();
    let tc = train_config(&cfg, stream.derive(7));
    let a = train_conventional(&keys, &tc).unwrap();
    let b = train_conventional(&keys, &tc).unwrap();
    assert!((codebook_similarity(&a, &b).unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn h_dump_isotropic_has_tiny_off_diagonal_energy() {
    let cfg = tiny_cfg("n = 20000\nd = 16\nheads = 1\nquery_offdiag = 0");
    let dir = tempfile::tempdir().unwrap();
    let rows = run_h_dump(&cfg, dir.path()).unwrap();
    let ratio = rows
        .iter()
        .find(|r| r.metric.starts_with("off_diag_energy_ratio"))
        .unwrap()
        .value;
    assert!(ratio < 0.02, "isotropic ratio {ratio}");
}

#[test]
fn h_dump_correlated_matches_generating_covariance() {
    let cfg = tiny_cfg("n = 20000\nd = 16\nheads = 1\nquery_offdiag = 0.5\nseed = 3");
    let dir = tempfile::tempdir().unwrap();
    let rows = run_h_dump(&cfg, dir.path()).unwrap();
    let got = rows
        .iter()
        .find(|r| r.metric.starts_with("off_diag_energy_ratio"))
        .unwrap()
        .value;
    // Analytic ratio of the equicorrelation covariance (1-rho)I + rho J.
    let (d, rho) = (16.0f64, 0.5f64);
    let expect = (d * (d - 1.0) * rho * rho) / (d + d * (d - 1.0) * rho * rho);
    assert!(
        (got - expect).abs() / expect < 0.1,
        "ratio {got} vs analytic {expect}"
    );
    // The written estimate survives its f32 CSV round trip.
    let h = data::read_matrix_csv(dir.path().join("h_head0.csv")).unwrap();
    assert_eq!(h.rows(), 16);
    assert_eq!(h.cols(), 16);
}

#[test]
fn mse_rows_present_and_deterministic() {
    let cfg = tiny_cfg("n = 512\ncodebook_size = 16\nd = 8\nnum_seeds = 2\nseed = 11");
    let rows = run_attention_mse(&cfg).unwrap();
    assert_eq!(rows, run_attention_mse(&cfg).unwrap());
    assert!(rows.iter().any(|r| r.metric == "mean_mse_conventional"));
    assert!(rows.iter().any(|r| r.metric == "mean_mse_query_aware"));
    for r in rows.iter().filter(|r| r.metric.starts_with("mse_")) {
        assert!(r.value >= 0.0);
    }
}

#[test]
fn ablation_full_selection_recovers_exact_outputs() {
    // With fraction 1.0 every arm's selective output equals its own exact
    // attention, so all output-error rows are exactly zero and recall is 1.
    let cfg = tiny_cfg(
        "n = 192\ncodebook_size = 16\nd = 8\nnum_seeds = 1\nqueries_per_seed = 4\ntopk_fraction = 1.0\nseed = 2",
    );
    let rows = run_ablation_grid(&cfg).unwrap();
    for r in rows.iter().filter(|r| r.metric.starts_with("output_err_")) {
        assert_eq!(r.value, 0.0, "{}", r.metric);
    }
    for r in rows.iter().filter(|r| r.metric.starts_with("recall_")) {
        assert_eq!(r.value, 1.0, "{}", r.metric);
    }
}

#[test]
fn ablation_rows_deterministic() {
    let cfg = tiny_cfg(
        "n = 192\ncodebook_size = 16\nd = 8\nnum_seeds = 1\nqueries_per_seed = 4\nseed = 8",
    );
    assert_eq!(run_ablation_grid(&cfg).unwrap(), run_ablation_grid(&cfg).unwrap());
}

#[test]
fn recall_sweep_is_monotone_in_fraction_on_average() {
    let cfg = tiny_cfg(
        "n = 256\ncodebook_size = 32\nd = 8\nnum_seeds = 1\nqueries_per_seed = 4\nseed = 4",
    );
    let rows = run_recall_sweep(&cfg).unwrap();
    assert_eq!(rows.len(), SWEEP_FRACTIONS.len());
    for r in &rows {
        assert!((0.0..=1.0).contains(&r.value), "{} = {}", r.metric, r.value);
    }
}

#[test]
fn serve_sim_full_fraction_has_unit_sparsity() {
    let cfg = tiny_cfg(
        "n = 128\ncodebook_size = 16\nd = 8\nheads = 2\ndecode_steps = 2\ntopk_fraction = 1.0\nsentinel_tokens = 0\nrecent_tokens = 0",
    );
    let out = run_serve_sim(&cfg).unwrap();
    for r in out.rows.iter().filter(|r| r.metric.starts_with("sparsity_step")) {
        assert_eq!(r.value, 1.0);
    }
}

#[test]
fn serve_sim_deterministic_and_ledger_monotone() {
    let cfg = tiny_cfg(
        "n = 128\ncodebook_size = 16\nd = 8\nheads = 2\ndecode_steps = 3\nseed = 21",
    );
    let a = run_serve_sim(&cfg).unwrap();
    let b = run_serve_sim(&cfg).unwrap();
    assert_eq!(a.rows, b.rows);
    assert_eq!(a.ledger_lines, b.ledger_lines);
    assert_eq!(a.ledger_lines.len(), 3);
    for w in a.ledger_lines.windows(2) {
        assert!(w[1].slow_bytes > w[0].slow_bytes);
        assert!(w[1].fast_bytes > w[0].fast_bytes);
        assert!(w[1].steps == w[0].steps + 1);
    }
    assert_eq!(a.ledger_jsonl(), b.ledger_jsonl());
}

#[test]
fn train_and_quantize_round_trip_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let cb_path = dir.path().join("head.kvqc");
    let cfg = tiny_cfg("n = 256\ncodebook_size = 16\nd = 8\nvq_kind = query_aware\nseed = 13");
    let cb = build_codebook(&cfg).unwrap();
    crate::codebook::save_codebook(&cb_path, &cb).unwrap();

    let qcfg = tiny_cfg(&format!(
        "n = 64\nd = 8\ncodebook_path = {}\nseed = 14",
        cb_path.display()
    ));
    let (indices, csv) = run_quantize(&qcfg).unwrap();
    assert_eq!(indices.len(), 64);
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "token,codeword");
    assert_eq!(csv.lines().count(), 65);
    indices
        .validate(&crate::codebook::load_codebook(&cb_path).unwrap())
        .unwrap();
}

#[test]
fn quantize_requires_codebook_path() {
    let cfg = tiny_cfg("n = 16\nd = 8");
    assert!(matches!(run_quantize(&cfg), Err(Error::InvalidConfig(_))));
}

#[test]
fn keydump_source_feeds_training() {
    let dir = tempfile::tempdir().unwrap();
    let dump = dir.path().join("keys.kvqd");
    let mut rng = SeededRng::new(33);
    let keys = sample_gaussian(&mut rng, 128, 8, 0.0, &Covariance::Scalar(1.0)).unwrap();
    data::save_key_dump(&dump, &keys).unwrap();
    let cfg = tiny_cfg(&format!(
        "n = 128\nd = 8\ncodebook_size = 8\nvq_kind = conventional\ndata = keydump:{}",
        dump.display()
    ));
    let cb = build_codebook(&cfg).unwrap();
    assert_eq!(cb.size(), 8);
    assert_eq!(cb.head_dim(), 8);
}
