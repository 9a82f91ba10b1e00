//! Experiment drivers behind the `kvq` command-line tool.
//!
//! Every run is a pure function of (configuration, seed): random streams
//! are derived from the seed with fixed salts, parallel sections preserve
//! order, and report files are deterministic byte-for-byte.

mod config;
pub mod data;
mod report;
pub mod synth;

pub use config::{DataSource, ExperimentConfig, ExperimentId};
pub use report::{rows_to_csv, rows_to_jsonl, write_csv, write_jsonl, ReportRow, CSV_HEADER, REPORT_SCHEMA};

use std::path::{Path, PathBuf};

use crate::attention::{self, exact_attention, recall_at_k, selective_attention};
use crate::codebook::{
    attention_mse, codebook_similarity, estimate_h, quantize, train_conventional,
    train_query_aware, Codebook, CodebookKind, CodeIndexVector, TrainConfig,
};
use crate::error::{Error, Result};
use crate::numerics::{dot, norm, sample_gaussian, Covariance, Matrix, SeededRng};
use crate::offload::{decode_step, AccessLedger, LedgerSnapshot, TierConfig, TieredKvStore};
use crate::rope::{apply_rotation, RopeConfig, RopeMode};
use synth::MixtureParams;

/// Query sample size used to estimate H inside experiments.
const H_SAMPLE: usize = 2048;
/// Held-out query sample for MSE evaluation.
const MSE_EVAL_QUERIES: usize = 512;
/// Fraction grid of the recall sweep.
const SWEEP_FRACTIONS: [f64; 7] = [0.005, 0.01, 0.02, 0.03, 0.05, 0.1, 0.2];

/// The four ablation arms: (name, rope mode, quantization kind).
pub const ABLATION_ARMS: [(&str, RopeMode, CodebookKind); 4] = [
    ("baseline", RopeMode::Standard, CodebookKind::Conventional),
    ("wrope", RopeMode::Windowed, CodebookKind::Conventional),
    ("qavq", RopeMode::Standard, CodebookKind::QueryAware),
    ("full", RopeMode::Windowed, CodebookKind::QueryAware),
];

fn mixture_params(cfg: &ExperimentConfig) -> MixtureParams {
    MixtureParams {
        components: cfg.mixture_components,
        center_spread: cfg.center_spread,
        within_std: cfg.within_std,
    }
}

fn train_config(cfg: &ExperimentConfig, rng: SeededRng) -> TrainConfig {
    TrainConfig::new(rng)
        .with_codebook_size(cfg.codebook_size)
        .with_max_iters(cfg.max_iters)
}

/// Rotates every row by the row-index position (standard mode) or returns
/// the tensor unchanged (windowed mode, where post-PE keys are raw).
fn post_pe_keys(keys: &Matrix, rope: &RopeConfig) -> Result<Matrix> {
    match rope.mode() {
        RopeMode::Standard => {
            let positions: Vec<i64> = (0..keys.rows() as i64).collect();
            synth::rotate_rows_at_positions(keys, &positions, rope)
        }
        RopeMode::Windowed => Ok(keys.clone()),
    }
}

/// Rotates query rows for decoding: standard mode rotates by the supplied
/// positions, windowed mode applies the single bridge rotation.
fn post_pe_queries(queries: &Matrix, positions: &[i64], rope: &RopeConfig) -> Result<Matrix> {
    match rope.mode() {
        RopeMode::Standard => synth::rotate_rows_at_positions(queries, positions, rope),
        RopeMode::Windowed => {
            let b = rope.bridge_offset();
            let bridged: Vec<i64> = vec![b; queries.rows()];
            synth::rotate_rows_at_positions(queries, &bridged, rope)
        }
    }
}

/// Keys for training or evaluation, from the configured data source. File
/// dumps hold pre-embedding states; synthetic keys come from the shared
/// Gaussian mixture.
pub fn resolve_keys(cfg: &ExperimentConfig, stream: &SeededRng) -> Result<Matrix> {
    match &cfg.data {
        DataSource::Synthetic => {
            let params = mixture_params(cfg);
            let centers = synth::mixture_centers(&mut stream.derive(1), &params, cfg.d)?;
            synth::mixture_tokens(&mut stream.derive(2), &centers, params.within_std, cfg.n)
        }
        DataSource::KeyDump(path) => {
            let keys = data::load_key_dump(path)?;
            if keys.cols() != cfg.d {
                return Err(Error::Dimension(format!(
                    "key dump dim {} vs configured d {}",
                    keys.cols(),
                    cfg.d
                )));
            }
            Ok(keys)
        }
    }
}

/// Post-embedding queries for H estimation: loaded from a dump (used
/// as-is) or synthesized with the configured anisotropy and rotated
/// according to the mode.
fn resolve_h_queries(cfg: &ExperimentConfig, rope: &RopeConfig, stream: &SeededRng) -> Result<Matrix> {
    if let Some(path) = &cfg.query_dump {
        let q = data::load_key_dump(path)?;
        if q.cols() != cfg.d {
            return Err(Error::Dimension(format!(
                "query dump dim {} vs configured d {}",
                q.cols(),
                cfg.d
            )));
        }
        return Ok(q);
    }
    let raw = synth::anisotropic_queries(&mut stream.derive(3), H_SAMPLE, cfg.d, cfg.query_cond)?;
    let positions = synth::spread_positions(&mut stream.derive(4), H_SAMPLE, cfg.n.max(2) as i64);
    post_pe_queries(&raw, &positions, rope)
}

/// Trains one codebook from the configured data source — the
/// `train-codebook` subcommand.
pub fn build_codebook(cfg: &ExperimentConfig) -> Result<Codebook> {
    let rope = cfg.rope()?;
    let stream = SeededRng::new(cfg.seed);
    let raw_keys = resolve_keys(cfg, &stream)?;
    if raw_keys.rows() < cfg.codebook_size {
        return Err(Error::Training(format!(
            "{} keys for {} codewords",
            raw_keys.rows(),
            cfg.codebook_size
        )));
    }
    let keys = post_pe_keys(&raw_keys, &rope)?;
    let tc = train_config(cfg, stream.derive(7));
    match cfg.vq_kind {
        CodebookKind::Conventional => train_conventional(&keys, &tc),
        CodebookKind::QueryAware => {
            let queries = resolve_h_queries(cfg, &rope, &stream)?;
            let h = estimate_h(&queries, tc.h_regularization_eps)?;
            train_query_aware(&keys, &h, &tc)
        }
    }
}

/// Quantizes the configured data with a codebook file — the `quantize`
/// subcommand. Returns the indices and their CSV rendering.
pub fn run_quantize(cfg: &ExperimentConfig) -> Result<(CodeIndexVector, String)> {
    let path = cfg.codebook_path.as_ref().ok_or_else(|| {
        Error::InvalidConfig("quantize requires codebook_path in the config".into())
    })?;
    let cb = crate::codebook::load_codebook(path)?;
    if cb.head_dim() != cfg.d {
        return Err(Error::Dimension(format!(
            "codebook dim {} vs configured d {}",
            cb.head_dim(),
            cfg.d
        )));
    }
    let rope = cfg.rope()?;
    let raw = resolve_keys(cfg, &SeededRng::new(cfg.seed))?;
    let keys = post_pe_keys(&raw, &rope)?;
    let indices = quantize(&keys, &cb)?;
    let mut csv = String::from("token,codeword\n");
    for (t, ix) in indices.as_slice().iter().enumerate() {
        csv.push_str(&format!("{t},{ix}\n"));
    }
    Ok((indices, csv))
}

/// Pre- vs post-embedding codebook transferability across two independent
/// samples of the same content distribution.
///
/// Two key samples share mixture centers; per head, conventional codebooks
/// are trained on the raw keys and on keys rotated at positions spread
/// over `max_position`. The emitted gap `sim_pre_pe - sim_post_pe` is
/// positive when rotation is what breaks codebook sharing.
pub fn run_codebook_similarity(cfg: &ExperimentConfig) -> Result<Vec<ReportRow>> {
    let id = ExperimentId::CodebookSimilarity.as_str();
    let hash = cfg.config_hash();
    if cfg.n < cfg.codebook_size {
        return Err(Error::Training(format!(
            "n = {} tokens cannot train {} codewords",
            cfg.n, cfg.codebook_size
        )));
    }
    let rope = cfg.rope()?.with_mode(RopeMode::Standard);
    let params = mixture_params(cfg);
    let mut rows = Vec::new();
    let mut pre_sum = 0.0;
    let mut post_sum = 0.0;
    for head in 0..cfg.heads {
        let hs = SeededRng::new(cfg.seed).derive(1000 + head as u64);
        let centers = synth::mixture_centers(&mut hs.derive(1), &params, cfg.d)?;
        let keys_a = synth::mixture_tokens(&mut hs.derive(2), &centers, params.within_std, cfg.n)?;
        let keys_b = synth::mixture_tokens(&mut hs.derive(3), &centers, params.within_std, cfg.n)?;
        let pos_a = synth::spread_positions(&mut hs.derive(4), cfg.n, cfg.max_position);
        let pos_b = synth::spread_positions(&mut hs.derive(5), cfg.n, cfg.max_position);
        let post_a = synth::rotate_rows_at_positions(&keys_a, &pos_a, &rope)?;
        let post_b = synth::rotate_rows_at_positions(&keys_b, &pos_b, &rope)?;

        let cb = |keys: &Matrix, salt: u64| -> Result<Codebook> {
            train_conventional(keys, &train_config(cfg, hs.derive(salt)))
        };
        let sim_pre = codebook_similarity(&cb(&keys_a, 6)?, &cb(&keys_b, 7)?)?;
        let sim_post = codebook_similarity(&cb(&post_a, 8)?, &cb(&post_b, 9)?)?;
        pre_sum += sim_pre;
        post_sum += sim_post;
        rows.push(ReportRow::new(id, &hash, format!("sim_pre_pe_head{head}"), sim_pre, "cosine"));
        rows.push(ReportRow::new(id, &hash, format!("sim_post_pe_head{head}"), sim_post, "cosine"));
    }
    let pre = pre_sum / cfg.heads as f64;
    let post = post_sum / cfg.heads as f64;
    rows.push(ReportRow::new(id, &hash, "mean_sim_pre_pe", pre, "cosine"));
    rows.push(ReportRow::new(id, &hash, "mean_sim_post_pe", post, "cosine"));
    rows.push(ReportRow::new(id, &hash, "sim_gap", pre - post, "cosine"));
    Ok(rows)
}

/// Estimates the query second-moment matrix per head and writes it to
/// `out_dir/h_head<i>.csv` at f32 precision. Emits the off-diagonal energy
/// ratio of each estimate; on anisotropic synthetic queries the ratio must
/// be strictly positive, which is the "H is not a scaled identity" check.
pub fn run_h_dump(cfg: &ExperimentConfig, out_dir: &Path) -> Result<Vec<ReportRow>> {
    let id = ExperimentId::HMatrixDump.as_str();
    let hash = cfg.config_hash();
    std::fs::create_dir_all(out_dir)?;
    let mut rows = Vec::new();
    for head in 0..cfg.heads {
        let hs = SeededRng::new(cfg.seed).derive(3000 + head as u64);
        let queries =
            synth::equicorrelated_queries(&mut hs.derive(1), cfg.n, cfg.d, cfg.query_offdiag)?;
        let h = estimate_h(&queries, 1e-6)?;
        let path = out_dir.join(format!("h_head{head}.csv"));
        data::write_matrix_csv(&path, &h.to_matrix())?;

        let mut off = 0.0;
        let mut total = 0.0;
        for r in 0..cfg.d {
            for c in 0..cfg.d {
                let v = h.get(r, c) * h.get(r, c);
                total += v;
                if r != c {
                    off += v;
                }
            }
        }
        let ratio = off / total;
        if cfg.query_offdiag != 0.0 && !(ratio > 0.0) {
            return Err(Error::Experiment(format!(
                "head {head}: H estimate is a scaled identity despite correlated queries"
            )));
        }
        rows.push(ReportRow::new(
            id,
            &hash,
            format!("off_diag_energy_ratio_head{head}"),
            ratio,
            "ratio",
        ));
    }
    Ok(rows)
}

/// Trains both codebook kinds on identical keys and seeds, then compares
/// the mean squared score-approximation error on held-out queries, over
/// `num_seeds` replicates.
pub fn run_attention_mse(cfg: &ExperimentConfig) -> Result<Vec<ReportRow>> {
    let id = ExperimentId::AttentionMse.as_str();
    let hash = cfg.config_hash();
    let params = mixture_params(cfg);
    let eval_keys_count = (cfg.n / 4).max(64);
    let mut rows = Vec::new();
    let mut conv_sum = 0.0;
    let mut qa_sum = 0.0;
    let mut qa_wins = 0usize;
    for s in 0..cfg.num_seeds {
        let hs = SeededRng::new(cfg.seed).derive(2000 + s as u64);
        let centers = synth::mixture_centers(&mut hs.derive(1), &params, cfg.d)?;
        let train_keys =
            synth::mixture_tokens(&mut hs.derive(2), &centers, params.within_std, cfg.n)?;
        let eval_keys =
            synth::mixture_tokens(&mut hs.derive(3), &centers, params.within_std, eval_keys_count)?;
        let h_queries =
            synth::anisotropic_queries(&mut hs.derive(4), H_SAMPLE, cfg.d, cfg.query_cond)?;
        let eval_queries = synth::anisotropic_queries(
            &mut hs.derive(5),
            MSE_EVAL_QUERIES,
            cfg.d,
            cfg.query_cond,
        )?;
        let tc = train_config(cfg, hs.derive(6));
        let h = estimate_h(&h_queries, tc.h_regularization_eps)?;
        let cb_conv = train_conventional(&train_keys, &tc)?;
        let cb_qa = train_query_aware(&train_keys, &h, &tc)?;
        let mse_conv = attention_mse(&eval_queries, &eval_keys, &cb_conv)?;
        let mse_qa = attention_mse(&eval_queries, &eval_keys, &cb_qa)?;
        conv_sum += mse_conv;
        qa_sum += mse_qa;
        if mse_qa < mse_conv {
            qa_wins += 1;
        }
        rows.push(ReportRow::new(id, &hash, format!("mse_conventional_seed{s}"), mse_conv, "score_sq"));
        rows.push(ReportRow::new(id, &hash, format!("mse_query_aware_seed{s}"), mse_qa, "score_sq"));
    }
    let seeds = cfg.num_seeds as f64;
    rows.push(ReportRow::new(id, &hash, "mean_mse_conventional", conv_sum / seeds, "score_sq"));
    rows.push(ReportRow::new(id, &hash, "mean_mse_query_aware", qa_sum / seeds, "score_sq"));
    rows.push(ReportRow::new(id, &hash, "qa_win_fraction", qa_wins as f64 / seeds, "fraction"));
    Ok(rows)
}

/// One fully built decode trace: a quantized context plus decode queries
/// with their exact reference scores under the arm's own semantics.
pub struct DecodeScenario {
    pub rope: RopeConfig,
    pub post_pe_keys: Matrix,
    pub values: Matrix,
    pub codebook: Codebook,
    pub indices: CodeIndexVector,
    pub post_pe_queries: Matrix,
    /// Per query: exact pre-softmax scores over the whole context.
    pub exact_scores: Vec<Vec<f64>>,
}

/// Builds the shared-data decode scenario for one (mode, kind) arm.
/// `stream` must be identical across arms so they see identical data.
pub fn build_decode_scenario(
    cfg: &ExperimentConfig,
    mode: RopeMode,
    kind: CodebookKind,
    stream: &SeededRng,
) -> Result<DecodeScenario> {
    let rope = cfg.rope()?.with_mode(mode);
    let params = mixture_params(cfg);
    if cfg.n < cfg.codebook_size {
        return Err(Error::Training(format!(
            "n = {} tokens cannot train {} codewords",
            cfg.n, cfg.codebook_size
        )));
    }
    let centers = synth::mixture_centers(&mut stream.derive(1), &params, cfg.d)?;
    let train_raw = synth::mixture_tokens(&mut stream.derive(2), &centers, params.within_std, cfg.n)?;
    let eval_raw = synth::mixture_tokens(&mut stream.derive(3), &centers, params.within_std, cfg.n)?;
    let values = sample_gaussian(&mut stream.derive(4), cfg.n, cfg.d, 0.0, &Covariance::Scalar(1.0))?;

    let train_keys = post_pe_keys(&train_raw, &rope)?;
    let h_raw = synth::anisotropic_queries(&mut stream.derive(5), H_SAMPLE, cfg.d, cfg.query_cond)?;
    let h_positions = synth::spread_positions(&mut stream.derive(6), H_SAMPLE, cfg.n as i64);
    let h_queries = post_pe_queries(&h_raw, &h_positions, &rope)?;

    let tc = train_config(cfg, stream.derive(7));
    let codebook = match kind {
        CodebookKind::Conventional => train_conventional(&train_keys, &tc)?,
        CodebookKind::QueryAware => {
            let h = estimate_h(&h_queries, tc.h_regularization_eps)?;
            train_query_aware(&train_keys, &h, &tc)?
        }
    };

    let context_keys = post_pe_keys(&eval_raw, &rope)?;
    let indices = quantize(&context_keys, &codebook)?;

    let q_raw = synth::anisotropic_queries(&mut stream.derive(8), cfg.queries_per_seed, cfg.d, cfg.query_cond)?;
    let decode_positions: Vec<i64> = vec![cfg.n as i64; cfg.queries_per_seed];
    let queries = post_pe_queries(&q_raw, &decode_positions, &rope)?;

    let mut exact_scores = Vec::with_capacity(queries.rows());
    for i in 0..queries.rows() {
        let q = queries.row(i);
        exact_scores.push((0..context_keys.rows()).map(|j| dot(q, context_keys.row(j))).collect());
    }

    Ok(DecodeScenario {
        rope,
        post_pe_keys: context_keys,
        values,
        codebook,
        indices,
        post_pe_queries: queries,
        exact_scores,
    })
}

/// Mean recall@K of approximate scores against the scenario's exact
/// scores, with `K = ceil(fraction * n)`.
fn scenario_recall(sc: &DecodeScenario, fraction: f64) -> Result<f64> {
    let n = sc.post_pe_keys.rows();
    let k = ((fraction * n as f64).ceil() as usize).clamp(1, n);
    let mut total = 0.0;
    for i in 0..sc.post_pe_queries.rows() {
        let approx = attention::approx_scores(sc.post_pe_queries.row(i), &sc.indices, &sc.codebook)?;
        total += recall_at_k(&approx, &sc.exact_scores[i], k)?;
    }
    Ok(total / sc.post_pe_queries.rows() as f64)
}

/// Mean relative L2 error of the retrieval pipeline's output against full
/// attention, under the scenario's own semantics.
fn scenario_output_error(sc: &DecodeScenario, cfg: &ExperimentConfig) -> Result<f64> {
    let policy = cfg.policy()?;
    let mut total = 0.0;
    for i in 0..sc.post_pe_queries.rows() {
        let q = sc.post_pe_queries.row(i);
        let approx = attention::approx_scores(q, &sc.indices, &sc.codebook)?;
        let selection = attention::select_topk(&approx, &policy);
        let out = selective_attention(q, &selection, &sc.post_pe_keys, &sc.values, &sc.rope)?;
        let exact = exact_attention(q, &sc.post_pe_keys, &sc.values, &sc.rope)?;
        let err: f64 = out
            .iter()
            .zip(&exact)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        total += err / norm(&exact).max(f64::MIN_POSITIVE);
    }
    Ok(total / sc.post_pe_queries.rows() as f64)
}

/// The 2x2 ablation grid: {standard, windowed} x {conventional,
/// query-aware}, all four arms on identical per-seed data. Emits per-seed
/// and mean recall@K plus output error per arm.
pub fn run_ablation_grid(cfg: &ExperimentConfig) -> Result<Vec<ReportRow>> {
    let id = ExperimentId::AblationGrid.as_str();
    let hash = cfg.config_hash();
    let mut rows = Vec::new();
    let mut recall_sums = [0.0f64; 4];
    let mut err_sums = [0.0f64; 4];
    for s in 0..cfg.num_seeds {
        let stream = SeededRng::new(cfg.seed).derive(4000 + s as u64);
        for (arm, (name, mode, kind)) in ABLATION_ARMS.iter().enumerate() {
            let sc = build_decode_scenario(cfg, *mode, *kind, &stream)?;
            let recall = scenario_recall(&sc, cfg.topk_fraction)?;
            let err = scenario_output_error(&sc, cfg)?;
            recall_sums[arm] += recall;
            err_sums[arm] += err;
            rows.push(ReportRow::new(id, &hash, format!("recall_{name}_seed{s}"), recall, "fraction"));
            rows.push(ReportRow::new(id, &hash, format!("output_err_{name}_seed{s}"), err, "ratio"));
        }
    }
    let seeds = cfg.num_seeds as f64;
    for (arm, (name, _, _)) in ABLATION_ARMS.iter().enumerate() {
        rows.push(ReportRow::new(id, &hash, format!("mean_recall_{name}"), recall_sums[arm] / seeds, "fraction"));
        rows.push(ReportRow::new(id, &hash, format!("mean_output_err_{name}"), err_sums[arm] / seeds, "ratio"));
    }
    Ok(rows)
}

/// Recall of the configured (mode, kind) arm across a fixed grid of top-K
/// fractions.
pub fn run_recall_sweep(cfg: &ExperimentConfig) -> Result<Vec<ReportRow>> {
    let id = ExperimentId::RecallSweep.as_str();
    let hash = cfg.config_hash();
    let mut rows = Vec::new();
    for fraction in SWEEP_FRACTIONS {
        let mut total = 0.0;
        for s in 0..cfg.num_seeds {
            let stream = SeededRng::new(cfg.seed).derive(5000 + s as u64);
            let sc = build_decode_scenario(cfg, cfg.rope_mode, cfg.vq_kind, &stream)?;
            total += scenario_recall(&sc, fraction)?;
        }
        rows.push(ReportRow::new(
            id,
            &hash,
            format!("recall_frac_{fraction}"),
            total / cfg.num_seeds as f64,
            "fraction",
        ));
    }
    Ok(rows)
}

/// Report rows plus the per-step ledger snapshots of a serving simulation.
pub struct ServeSimOutput {
    pub rows: Vec<ReportRow>,
    pub ledger_lines: Vec<LedgerSnapshot>,
}

impl ServeSimOutput {
    pub fn ledger_jsonl(&self) -> String {
        let mut out = String::new();
        for line in &self.ledger_lines {
            out.push_str(&serde_json::to_string(line).expect("plain struct serializes"));
            out.push('\n');
        }
        out
    }
}

/// Multi-step decode over a tiered store: prefill `n` tokens, then
/// alternate metered decode steps and appends. Emits per-step sparsity,
/// the auxiliary-memory ratio, and cumulative ledger snapshots.
pub fn run_serve_sim(cfg: &ExperimentConfig) -> Result<ServeSimOutput> {
    let id = ExperimentId::ServeSim.as_str();
    let hash = cfg.config_hash();
    let rope = cfg.rope()?;
    let policy = cfg.policy()?;
    let params = mixture_params(cfg);
    let slots = cfg.layers * cfg.heads;

    // Per-slot training and context data.
    let mut codebooks = Vec::with_capacity(slots);
    let mut contexts = Vec::with_capacity(slots);
    for slot in 0..slots {
        let ss = SeededRng::new(cfg.seed).derive(6000 + slot as u64);
        let centers = synth::mixture_centers(&mut ss.derive(1), &params, cfg.d)?;
        let train_raw =
            synth::mixture_tokens(&mut ss.derive(2), &centers, params.within_std, cfg.codebook_size.max(cfg.n / 4))?;
        let train_keys = post_pe_keys(&train_raw, &rope)?;
        let tc = train_config(cfg, ss.derive(7));
        let cb = match cfg.vq_kind {
            CodebookKind::Conventional => train_conventional(&train_keys, &tc)?,
            CodebookKind::QueryAware => {
                let h_raw = synth::anisotropic_queries(&mut ss.derive(3), H_SAMPLE, cfg.d, cfg.query_cond)?;
                let h_pos = synth::spread_positions(&mut ss.derive(4), H_SAMPLE, cfg.n as i64);
                let h = estimate_h(&post_pe_queries(&h_raw, &h_pos, &rope)?, tc.h_regularization_eps)?;
                train_query_aware(&train_keys, &h, &tc)?
            }
        };
        codebooks.push(cb);
        // Context keys/values plus extra tokens appended during decoding.
        let total = cfg.n + cfg.decode_steps;
        let keys_raw = synth::mixture_tokens(&mut ss.derive(5), &centers, params.within_std, total)?;
        let values = sample_gaussian(&mut ss.derive(6), total, cfg.d, 0.0, &Covariance::Scalar(1.0))?;
        contexts.push((keys_raw, values));
    }

    let tier = TierConfig {
        element_width_bytes: cfg.element_width_bytes,
        index_width_bytes: cfg.index_width_bytes,
    };
    let mut store = TieredKvStore::new(cfg.layers, cfg.heads, cfg.d, tier, codebooks)?;

    let append_position = |store: &mut TieredKvStore, contexts: &[(Matrix, Matrix)], t: usize| -> Result<()> {
        let mut k_rows = Vec::with_capacity(slots);
        let mut v_rows = Vec::with_capacity(slots);
        for (keys_raw, values) in contexts {
            let key = match rope.mode() {
                RopeMode::Standard => apply_rotation(keys_raw.row(t), t as i64, &rope)?,
                RopeMode::Windowed => keys_raw.row(t).to_vec(),
            };
            k_rows.push(key);
            v_rows.push(values.row(t).to_vec());
        }
        store.append_token(&k_rows, &v_rows)
    };

    for t in 0..cfg.n {
        append_position(&mut store, &contexts, t)?;
    }

    let ledger = AccessLedger::new();
    let mut rows = Vec::new();
    let mut ledger_lines = Vec::new();
    let mut sparsity_sum = 0.0;
    for step in 0..cfg.decode_steps {
        let mut queries = Vec::with_capacity(slots);
        for slot in 0..slots {
            let mut qs = SeededRng::new(cfg.seed).derive(7000 + (step * slots + slot) as u64);
            let raw = synth::anisotropic_queries(&mut qs, 1, cfg.d, cfg.query_cond)?;
            let position = vec![store.context_len() as i64];
            queries.push(post_pe_queries(&raw, &position, &rope)?.row(0).to_vec());
        }
        let report = decode_step(&store, &queries, &policy, Some(&ledger))?;
        sparsity_sum += report.sparsity_ratio;
        rows.push(ReportRow::new(id, &hash, format!("sparsity_step{step}"), report.sparsity_ratio, "ratio"));
        ledger_lines.push(ledger.snapshot(store.aux_mem_ratio()));
        append_position(&mut store, &contexts, cfg.n + step)?;
    }
    rows.push(ReportRow::new(id, &hash, "mean_sparsity", sparsity_sum / cfg.decode_steps as f64, "ratio"));
    rows.push(ReportRow::new(id, &hash, "aux_mem", store.aux_mem_ratio(), "ratio"));
    rows.push(ReportRow::new(id, &hash, "transfer_events", ledger.transfer_events() as f64, "count"));
    Ok(ServeSimOutput { rows, ledger_lines })
}

/// Resolves the `--out` path convention: `dump-h` writes its matrix files
/// next to the report.
pub fn default_h_dir(out: &Path) -> PathBuf {
    out.with_extension("d")
}

#[cfg(test)]
mod tests;
