//! Flat key-value experiment configuration.
//!
//! Grammar, one directive per line:
//!
//! ```text
//! file    := line*
//! line    := ws* (pair | comment | empty)
//! pair    := key ws* "=" ws* value (ws* comment)?
//! comment := "#" any*
//! key     := [a-z_]+
//! value   := token without '#' (trimmed)
//! ```
//!
//! Unknown keys are rejected. Every field has a default, so an empty file
//! is a valid configuration. The configuration hash covers the effective
//! value of every field in a fixed canonical order, which makes it stable
//! under line reordering.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::attention::RetrievalPolicy;
use crate::codebook::CodebookKind;
use crate::error::{Error, Result};
use crate::rope::{RopeConfig, RopeMode};

/// Which experiment a configuration drives; also the CLI subcommand names.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExperimentId {
    CodebookSimilarity,
    HMatrixDump,
    AttentionMse,
    RecallSweep,
    AblationGrid,
    ServeSim,
}

impl ExperimentId {
    pub fn as_str(&self) -> &'static str {
        match self {
            ExperimentId::CodebookSimilarity => "sim-codebooks",
            ExperimentId::HMatrixDump => "dump-h",
            ExperimentId::AttentionMse => "mse-compare",
            ExperimentId::RecallSweep => "recall-sweep",
            ExperimentId::AblationGrid => "ablate",
            ExperimentId::ServeSim => "serve-sim",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sim-codebooks" => Ok(ExperimentId::CodebookSimilarity),
            "dump-h" => Ok(ExperimentId::HMatrixDump),
            "mse-compare" => Ok(ExperimentId::AttentionMse),
            "recall-sweep" => Ok(ExperimentId::RecallSweep),
            "ablate" => Ok(ExperimentId::AblationGrid),
            "serve-sim" => Ok(ExperimentId::ServeSim),
            other => Err(Error::InvalidConfig(format!(
                "unknown experiment {other:?}"
            ))),
        }
    }
}

/// Where key states come from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DataSource {
    /// Gaussian-mixture generator driven by the mixture_* keys.
    Synthetic,
    /// Key-dump file (magic "KVQD").
    KeyDump(PathBuf),
}

/// Everything an experiment run needs, with desk-scale defaults.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub experiment: Option<ExperimentId>,
    pub rope_mode: RopeMode,
    pub vq_kind: CodebookKind,
    /// Context length.
    pub n: usize,
    /// Head dimension.
    pub d: usize,
    pub heads: usize,
    pub layers: usize,
    pub codebook_size: usize,
    pub max_iters: usize,
    pub topk_fraction: f64,
    pub sentinel_tokens: usize,
    pub recent_tokens: usize,
    pub seed: u64,
    pub data: DataSource,
    /// Optional query dump for H estimation when keys come from a file.
    pub query_dump: Option<PathBuf>,
    /// Codebook file consumed by the quantize subcommand.
    pub codebook_path: Option<PathBuf>,
    pub mixture_components: usize,
    pub center_spread: f64,
    pub within_std: f64,
    /// Condition number of the synthetic query covariance.
    pub query_cond: f64,
    /// Equicorrelation coefficient of the query covariance (dump-h).
    pub query_offdiag: f64,
    /// Positional span for the similarity experiment.
    pub max_position: i64,
    pub decode_steps: usize,
    pub queries_per_seed: usize,
    pub num_seeds: usize,
    pub window: usize,
    pub bridge_offset: i64,
    pub theta_base: f64,
    pub element_width_bytes: usize,
    pub index_width_bytes: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            experiment: None,
            rope_mode: RopeMode::Windowed,
            vq_kind: CodebookKind::QueryAware,
            n: 4096,
            d: 32,
            heads: 2,
            layers: 1,
            codebook_size: 256,
            max_iters: 25,
            topk_fraction: 0.03,
            sentinel_tokens: 4,
            recent_tokens: 64,
            seed: 0,
            data: DataSource::Synthetic,
            query_dump: None,
            codebook_path: None,
            mixture_components: 8,
            center_spread: 1.0,
            within_std: 0.5,
            query_cond: 100.0,
            query_offdiag: 0.0,
            max_position: 32_768,
            decode_steps: 8,
            queries_per_seed: 32,
            num_seeds: 10,
            window: 64,
            bridge_offset: 2048,
            theta_base: 10_000.0,
            element_width_bytes: 2,
            index_width_bytes: 2,
        }
    }
}

impl ExperimentConfig {
    pub fn from_file<P: AsRef<Path>>(path: P) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref()).map_err(|e| {
            Error::InvalidConfig(format!("cannot read {}: {e}", path.as_ref().display()))
        })?;
        Self::from_str_grammar(&text)
    }

    /// Parses the flat key-value grammar described in the module docs.
    pub fn from_str_grammar(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::InvalidConfig(format!("line {}: expected key = value", lineno + 1))
            })?;
            cfg.apply(key.trim(), value.trim())
                .map_err(|e| Error::InvalidConfig(format!("line {}: {e}", lineno + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::InvalidConfig(format!("{key}: cannot parse {value:?}")))
        }
        match key {
            "experiment" => self.experiment = Some(ExperimentId::parse(value)?),
            "rope_mode" => {
                self.rope_mode = match value {
                    "standard" => RopeMode::Standard,
                    "windowed" => RopeMode::Windowed,
                    other => {
                        return Err(Error::InvalidConfig(format!(
                            "rope_mode must be standard|windowed, got {other:?}"
                        )))
                    }
                }
            }
            "vq_kind" => {
                self.vq_kind = match value {
                    "conventional" => CodebookKind::Conventional,
                    "query_aware" => CodebookKind::QueryAware,
                    other => {
                        return Err(Error::InvalidConfig(format!(
                            "vq_kind must be conventional|query_aware, got {other:?}"
                        )))
                    }
                }
            }
            "n" => self.n = num(key, value)?,
            "d" => self.d = num(key, value)?,
            "heads" => self.heads = num(key, value)?,
            "layers" => self.layers = num(key, value)?,
            "codebook_size" => self.codebook_size = num(key, value)?,
            "max_iters" => self.max_iters = num(key, value)?,
            "topk_fraction" => self.topk_fraction = num(key, value)?,
            "sentinel_tokens" => self.sentinel_tokens = num(key, value)?,
            "recent_tokens" => self.recent_tokens = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "data" => {
                self.data = if value == "synthetic" {
                    DataSource::Synthetic
                } else if let Some(path) = value.strip_prefix("keydump:") {
                    DataSource::KeyDump(PathBuf::from(path))
                } else {
                    return Err(Error::InvalidConfig(format!(
                        "data must be synthetic or keydump:<path>, got {value:?}"
                    )));
                }
            }
            "query_dump" => self.query_dump = Some(PathBuf::from(value)),
            "codebook_path" => self.codebook_path = Some(PathBuf::from(value)),
            "mixture_components" => self.mixture_components = num(key, value)?,
            "center_spread" => self.center_spread = num(key, value)?,
            "within_std" => self.within_std = num(key, value)?,
            "query_cond" => self.query_cond = num(key, value)?,
            "query_offdiag" => self.query_offdiag = num(key, value)?,
            "max_position" => self.max_position = num(key, value)?,
            "decode_steps" => self.decode_steps = num(key, value)?,
            "queries_per_seed" => self.queries_per_seed = num(key, value)?,
            "num_seeds" => self.num_seeds = num(key, value)?,
            "window" => self.window = num(key, value)?,
            "bridge_offset" => self.bridge_offset = num(key, value)?,
            "theta_base" => self.theta_base = num(key, value)?,
            "element_width_bytes" => self.element_width_bytes = num(key, value)?,
            "index_width_bytes" => self.index_width_bytes = num(key, value)?,
            other => {
                return Err(Error::InvalidConfig(format!("unknown key {other:?}")));
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("n", self.n),
            ("d", self.d),
            ("heads", self.heads),
            ("layers", self.layers),
            ("codebook_size", self.codebook_size),
            ("max_iters", self.max_iters),
            ("mixture_components", self.mixture_components),
            ("decode_steps", self.decode_steps),
            ("queries_per_seed", self.queries_per_seed),
            ("num_seeds", self.num_seeds),
        ] {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be positive")));
            }
        }
        // Fail early on nonsense; RopeConfig/RetrievalPolicy re-validate.
        self.rope()?;
        self.policy()?;
        if let DataSource::KeyDump(p) = &self.data {
            if !p.exists() {
                return Err(Error::InvalidConfig(format!(
                    "key dump {} does not exist",
                    p.display()
                )));
            }
        }
        Ok(())
    }

    pub fn rope(&self) -> Result<RopeConfig> {
        RopeConfig::with_params(
            self.d,
            self.theta_base,
            self.window,
            self.bridge_offset,
            self.rope_mode,
        )
    }

    pub fn policy(&self) -> Result<RetrievalPolicy> {
        RetrievalPolicy::with_preservation(
            self.topk_fraction,
            self.sentinel_tokens,
            self.recent_tokens,
        )
    }

    /// Canonical field map used for hashing; reordering config lines cannot
    /// change it.
    fn canonical_fields(&self) -> BTreeMap<&'static str, String> {
        let mut m = BTreeMap::new();
        m.insert(
            "experiment",
            self.experiment.map(|e| e.as_str().to_string()).unwrap_or_default(),
        );
        m.insert(
            "rope_mode",
            match self.rope_mode {
                RopeMode::Standard => "standard".into(),
                RopeMode::Windowed => "windowed".into(),
            },
        );
        m.insert(
            "vq_kind",
            match self.vq_kind {
                CodebookKind::Conventional => "conventional".into(),
                CodebookKind::QueryAware => "query_aware".into(),
            },
        );
        m.insert("n", self.n.to_string());
        m.insert("d", self.d.to_string());
        m.insert("heads", self.heads.to_string());
        m.insert("layers", self.layers.to_string());
        m.insert("codebook_size", self.codebook_size.to_string());
        m.insert("max_iters", self.max_iters.to_string());
        m.insert("topk_fraction", self.topk_fraction.to_string());
        m.insert("sentinel_tokens", self.sentinel_tokens.to_string());
        m.insert("recent_tokens", self.recent_tokens.to_string());
        m.insert("seed", self.seed.to_string());
        m.insert(
            "data",
            match &self.data {
                DataSource::Synthetic => "synthetic".into(),
                DataSource::KeyDump(p) => format!("keydump:{}", p.display()),
            },
        );
        m.insert(
            "query_dump",
            self.query_dump
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default(),
        );
        m.insert(
            "codebook_path",
            self.codebook_path
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default(),
        );
        m.insert("mixture_components", self.mixture_components.to_string());
        m.insert("center_spread", self.center_spread.to_string());
        m.insert("within_std", self.within_std.to_string());
        m.insert("query_cond", self.query_cond.to_string());
        m.insert("query_offdiag", self.query_offdiag.to_string());
        m.insert("max_position", self.max_position.to_string());
        m.insert("decode_steps", self.decode_steps.to_string());
        m.insert("queries_per_seed", self.queries_per_seed.to_string());
        m.insert("num_seeds", self.num_seeds.to_string());
        m.insert("window", self.window.to_string());
        m.insert("bridge_offset", self.bridge_offset.to_string());
        m.insert("theta_base", self.theta_base.to_string());
        m.insert("element_width_bytes", self.element_width_bytes.to_string());
        m.insert("index_width_bytes", self.index_width_bytes.to_string());
        m
    }

    /// 16-hex-digit digest of the canonical field map.
    pub fn config_hash(&self) -> String {
        let mut canon = String::new();
        for (k, v) in self.canonical_fields() {
            let _ = writeln!(canon, "{k}={v}");
        }
        let digest = Sha256::digest(canon.as_bytes());
        let mut hex = String::with_capacity(16);
        for byte in &digest[..8] {
            let _ = write!(hex, "{byte:02x}");
        }
        hex
    }
}
