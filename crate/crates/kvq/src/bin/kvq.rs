//! Command-line harness: one thin binary over the library experiments.
//!
//! Every subcommand takes a flat key-value config file plus `--seed` and
//! `--out` overrides; results go to `--out` as CSV (or stdout when no path
//! is given). Exit code 0 on success, nonzero with a diagnostic on stderr.

use std::path::PathBuf;

use anyhow::Context;
use clap::{Parser, Subcommand};

use kvq::codebook::save_codebook;
use kvq::harness::{
    self, default_h_dir, rows_to_csv, write_csv, ExperimentConfig, ExperimentId, ReportRow,
};

#[derive(Parser)]
#[command(name = "kvq", version, about = "Quantized-KV retrieval experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Flat key-value config file.
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Report CSV path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train one codebook and write it as a codebook binary file.
    TrainCodebook {
        #[command(flatten)]
        common: Common,
    },
    /// Quantize keys with an existing codebook (config key codebook_path).
    Quantize {
        #[command(flatten)]
        common: Common,
    },
    /// Pre- vs post-embedding codebook similarity across samples.
    SimCodebooks {
        #[command(flatten)]
        common: Common,
    },
    /// Estimate and dump per-head query second-moment matrices.
    DumpH {
        #[command(flatten)]
        common: Common,
        /// Directory for the H matrix CSV files; defaults next to --out.
        #[arg(long)]
        h_dir: Option<PathBuf>,
    },
    /// Conventional vs query-aware score-approximation error.
    MseCompare {
        #[command(flatten)]
        common: Common,
    },
    /// The 2x2 {rope mode} x {quantization kind} ablation grid.
    Ablate {
        #[command(flatten)]
        common: Common,
    },
    /// Recall of the configured arm across a grid of top-K fractions.
    RecallSweep {
        #[command(flatten)]
        common: Common,
    },
    /// Multi-step metered decode over the tiered KV store.
    ServeSim {
        #[command(flatten)]
        common: Common,
        /// Ledger snapshot JSON-lines path; defaults next to --out.
        #[arg(long)]
        ledger: Option<PathBuf>,
    },
}

fn load_config(common: &Common, experiment: ExperimentId) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::from_file(&common.config)
        .with_context(|| format!("loading {}", common.config.display()))?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.experiment = Some(experiment);
    Ok(cfg)
}

fn emit(common: &Common, rows: &[ReportRow]) -> anyhow::Result<()> {
    match &common.out {
        Some(path) => write_csv(path, rows)
            .with_context(|| format!("writing {}", path.display()))?,
        None => print!("{}", rows_to_csv(rows)),
    }
    Ok(())
}

fn main() -> anyhow::Result<()> {
    env_logger::init();
    let cli = Cli::parse();
    match cli.command {
        Command::TrainCodebook { common } => {
            let cfg = load_config(&common, ExperimentId::AblationGrid)?;
            let out = common
                .out
                .as_ref()
                .context("train-codebook requires --out <codebook file>")?;
            let cb = harness::build_codebook(&cfg)?;
            save_codebook(out, &cb)?;
            eprintln!(
                "wrote {} ({} codewords, dim {})",
                out.display(),
                cb.size(),
                cb.head_dim()
            );
        }
        Command::Quantize { common } => {
            let cfg = load_config(&common, ExperimentId::AblationGrid)?;
            let (_, csv) = harness::run_quantize(&cfg)?;
            match &common.out {
                Some(path) => std::fs::write(path, csv)
                    .with_context(|| format!("writing {}", path.display()))?,
                None => print!("{csv}"),
            }
        }
        Command::SimCodebooks { common } => {
            let cfg = load_config(&common, ExperimentId::CodebookSimilarity)?;
            emit(&common, &harness::run_codebook_similarity(&cfg)?)?;
        }
        Command::DumpH { common, h_dir } => {
            let cfg = load_config(&common, ExperimentId::HMatrixDump)?;
            let dir = h_dir.unwrap_or_else(|| {
                common
                    .out
                    .as_ref()
                    .map(|o| default_h_dir(o))
                    .unwrap_or_else(|| PathBuf::from("h_matrices"))
            });
            emit(&common, &harness::run_h_dump(&cfg, &dir)?)?;
        }
        Command::MseCompare { common } => {
            let cfg = load_config(&common, ExperimentId::AttentionMse)?;
            emit(&common, &harness::run_attention_mse(&cfg)?)?;
        }
        Command::Ablate { common } => {
            let cfg = load_config(&common, ExperimentId::AblationGrid)?;
            emit(&common, &harness::run_ablation_grid(&cfg)?)?;
        }
        Command::RecallSweep { common } => {
            let cfg = load_config(&common, ExperimentId::RecallSweep)?;
            emit(&common, &harness::run_recall_sweep(&cfg)?)?;
        }
        Command::ServeSim { common, ledger } => {
            let cfg = load_config(&common, ExperimentId::ServeSim)?;
            let output = harness::run_serve_sim(&cfg)?;
            emit(&common, &output.rows)?;
            let ledger_path = ledger.or_else(|| {
                common
                    .out
                    .as_ref()
                    .map(|o| o.with_extension("jsonl"))
            });
            match ledger_path {
                Some(path) => std::fs::write(&path, output.ledger_jsonl())
                    .with_context(|| format!("writing {}", path.display()))?,
                None => print!("{}", output.ledger_jsonl()),
            }
        }
    }
    Ok(())
}
