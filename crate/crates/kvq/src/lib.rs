//! Desk-scale engine for approximate-attention token retrieval.
//!
//! During decoding, reading the whole KV cache for every generated token is
//! the bandwidth bottleneck of long-context serving. This crate implements
//! the retrieval-based alternative end to end, on synthetic data and a
//! simulated memory hierarchy:
//!
//! - [`rope`] — rotary position embedding, plus the windowed variant that
//!   rotates queries by one fixed bridge offset and leaves keys raw, which
//!   removes the positional spread that defeats shared codebooks;
//! - [`codebook`] — k-means++ codebook training over key states, either
//!   under the plain Euclidean metric or under the query-aware quadratic
//!   form `(k - c) H (k - c)^T` (via a Cholesky change of basis), plus
//!   quantization and the inter-codebook similarity metric;
//! - [`attention`] — exact softmax attention, codeword-based score
//!   approximation, and the top-K selection policy with statically
//!   preserved sentinel/recent tokens;
//! - [`offload`] — a simulated two-tier KV store (fast tier: codebooks and
//!   indices; slow tier: full KV) where every byte crossing a tier is
//!   metered, yielding sparsity and auxiliary-memory ratios;
//! - [`harness`] — synthetic-data experiments and report plumbing behind
//!   the `kvq` command-line tool.
//!
//! Everything is deterministic for a fixed seed: ChaCha random streams,
//! left-to-right reductions, lowest-index tie-breaks, and order-preserving
//! parallelism.
//!
//! See the crate examples for one runnable walkthrough per capability.

pub mod attention;
mod bytes;
pub mod codebook;
mod error;
pub mod harness;
pub mod numerics;
pub mod offload;
pub mod rope;

pub use error::{Error, Result};
