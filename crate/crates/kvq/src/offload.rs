//! Simulated two-tier memory system with exact access accounting.
//!
//! The fast tier holds per-head codebooks and codeword indices; the slow
//! tier holds the full key/value tensors. Both live in one address space —
//! what the simulation preserves is the access contract: the attention path
//! can only reach keys and values through gather-by-index reads, and every
//! byte that crosses a tier is counted. Metering never changes numerical
//! results; every metered entry point accepts `Option<&AccessLedger>`.
//!
//! Byte model: stored elements are `element_width_bytes` wide (default 2,
//! emulating 16-bit storage) and codeword indices are `index_width_bytes`
//! wide (default 2). One decode step against a context of `n` tokens per
//! head reads `L*d*elem + n*index` fast-tier bytes for scoring and
//! `2*|selected|*d*elem` slow-tier bytes for selective attention, against a
//! full-attention equivalent of `2*n*d*elem`.

use std::sync::atomic::{AtomicU64, Ordering};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::{self, RetrievalPolicy, SelectionResult};
use crate::codebook::{CodeIndexVector, Codebook};
use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Storage widths of the simulated tiers.
#[derive(Debug, Clone, Copy)]
pub struct TierConfig {
    pub element_width_bytes: usize,
    pub index_width_bytes: usize,
}

impl Default for TierConfig {
    fn default() -> Self {
        Self {
            element_width_bytes: 2,
            index_width_bytes: 2,
        }
    }
}

/// Monotone byte counters, shared across threads. Reset only by explicit
/// request.
#[derive(Debug, Default)]
pub struct AccessLedger {
    slow_tier_bytes_read: AtomicU64,
    fast_tier_bytes_read: AtomicU64,
    full_attention_equivalent_bytes: AtomicU64,
    transfer_events: AtomicU64,
    steps: AtomicU64,
}

/// Serializable point-in-time view of a ledger.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerSnapshot {
    pub slow_bytes: u64,
    pub fast_bytes: u64,
    pub full_equiv_bytes: u64,
    pub sparsity: f64,
    pub aux_mem: f64,
    pub steps: u64,
}

impl AccessLedger {
    pub fn new() -> Self {
        Self::default()
    }

    fn add_slow(&self, bytes: u64) {
        self.slow_tier_bytes_read.fetch_add(bytes, Ordering::Relaxed);
    }

    fn add_fast(&self, bytes: u64) {
        self.fast_tier_bytes_read.fetch_add(bytes, Ordering::Relaxed);
    }

    fn add_full_equivalent(&self, bytes: u64) {
        self.full_attention_equivalent_bytes
            .fetch_add(bytes, Ordering::Relaxed);
    }

    fn add_transfer(&self) {
        self.transfer_events.fetch_add(1, Ordering::Relaxed);
    }

    fn add_step(&self) {
        self.steps.fetch_add(1, Ordering::Relaxed);
    }

    pub fn slow_tier_bytes_read(&self) -> u64 {
        self.slow_tier_bytes_read.load(Ordering::Relaxed)
    }

    pub fn fast_tier_bytes_read(&self) -> u64 {
        self.fast_tier_bytes_read.load(Ordering::Relaxed)
    }

    pub fn full_attention_equivalent_bytes(&self) -> u64 {
        self.full_attention_equivalent_bytes.load(Ordering::Relaxed)
    }

    pub fn transfer_events(&self) -> u64 {
        self.transfer_events.load(Ordering::Relaxed)
    }

    pub fn steps(&self) -> u64 {
        self.steps.load(Ordering::Relaxed)
    }

    pub fn reset(&self) {
        self.slow_tier_bytes_read.store(0, Ordering::Relaxed);
        self.fast_tier_bytes_read.store(0, Ordering::Relaxed);
        self.full_attention_equivalent_bytes
            .store(0, Ordering::Relaxed);
        self.transfer_events.store(0, Ordering::Relaxed);
        self.steps.store(0, Ordering::Relaxed);
    }

    /// Cumulative sparsity is slow-tier bytes over the full-attention
    /// equivalent; `aux_mem` comes from the store, see
    /// [`TieredKvStore::aux_mem_ratio`].
    pub fn snapshot(&self, aux_mem: f64) -> LedgerSnapshot {
        let slow = self.slow_tier_bytes_read();
        let full = self.full_attention_equivalent_bytes();
        LedgerSnapshot {
            slow_bytes: slow,
            fast_bytes: self.fast_tier_bytes_read(),
            full_equiv_bytes: full,
            sparsity: if full == 0 {
                0.0
            } else {
                slow as f64 / full as f64
            },
            aux_mem,
            steps: self.steps(),
        }
    }
}

struct HeadSlot {
    keys: Vec<f64>,   // n x d, slow tier
    values: Vec<f64>, // n x d, slow tier
    indices: CodeIndexVector, // fast tier
    codebook: Codebook,       // fast tier
}

/// Two-tier KV store for `layers * heads_per_layer` independent head slots,
/// all sharing one context length.
pub struct TieredKvStore {
    layers: usize,
    heads_per_layer: usize,
    head_dim: usize,
    context_len: usize,
    tier: TierConfig,
    slots: Vec<HeadSlot>,
}

/// Per-step decode outcome.
#[derive(Debug, Clone)]
pub struct DecodeStepReport {
    /// Selected token count for each head slot.
    pub selected_count: Vec<usize>,
    /// This step's slow-tier selective bytes over the full-attention
    /// equivalent, which reduces to `mean(selected) / n`.
    pub sparsity_ratio: f64,
    pub aux_mem_ratio: f64,
    /// One attention output row per head slot.
    pub outputs: Vec<Vec<f64>>,
}

/// One unit of work for the selective-attention executor.
#[derive(Debug, Clone)]
pub struct ExecutionItem {
    pub slot: usize,
    pub query: Vec<f64>,
    pub selection: SelectionResult,
}

impl TieredKvStore {
    /// `codebooks` supplies one codebook per head slot, layer-major
    /// (slot = layer * heads_per_layer + head).
    pub fn new(
        layers: usize,
        heads_per_layer: usize,
        head_dim: usize,
        tier: TierConfig,
        codebooks: Vec<Codebook>,
    ) -> Result<Self> {
        let slot_count = layers * heads_per_layer;
        if slot_count == 0 {
            return Err(Error::InvalidConfig(
                "store needs at least one layer and one head".into(),
            ));
        }
        if tier.element_width_bytes == 0 {
            return Err(Error::InvalidConfig(
                "element_width_bytes must be >= 1".into(),
            ));
        }
        if codebooks.len() != slot_count {
            return Err(Error::Dimension(format!(
                "{} codebooks for {} head slots",
                codebooks.len(),
                slot_count
            )));
        }
        if let Some(bad) = codebooks.iter().position(|cb| cb.head_dim() != head_dim) {
            return Err(Error::Dimension(format!(
                "codebook {bad} has dim {}, store has {head_dim}",
                codebooks[bad].head_dim()
            )));
        }
        let slots = codebooks
            .into_iter()
            .map(|codebook| HeadSlot {
                keys: Vec::new(),
                values: Vec::new(),
                indices: CodeIndexVector::empty(),
                codebook,
            })
            .collect();
        Ok(Self {
            layers,
            heads_per_layer,
            head_dim,
            context_len: 0,
            tier,
            slots,
        })
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn heads_per_layer(&self) -> usize {
        self.heads_per_layer
    }

    pub fn head_slots(&self) -> usize {
        self.slots.len()
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn context_len(&self) -> usize {
        self.context_len
    }

    pub fn tier_config(&self) -> TierConfig {
        self.tier
    }

    pub fn codebook(&self, slot: usize) -> &Codebook {
        &self.slots[slot].codebook
    }

    pub fn code_indices(&self, slot: usize) -> &CodeIndexVector {
        &self.slots[slot].indices
    }

    /// Bytes currently resident in the fast tier for codeword indices.
    pub fn fast_tier_index_bytes(&self) -> u64 {
        (self.context_len * self.slots.len() * self.tier.index_width_bytes) as u64
    }

    /// Bytes currently resident in the slow tier (keys and values).
    pub fn slow_tier_bytes(&self) -> u64 {
        (2 * self.context_len * self.slots.len() * self.head_dim * self.tier.element_width_bytes)
            as u64
    }

    /// Extra metadata per token per head relative to the key cache:
    /// `index_width / (d * element_width)`.
    pub fn aux_mem_ratio(&self) -> f64 {
        self.tier.index_width_bytes as f64
            / (self.head_dim * self.tier.element_width_bytes) as f64
    }

    /// Appends one token: KV rows go to the slow tier, the quantized
    /// codeword index goes to the fast tier of every head slot.
    pub fn append_token(&mut self, keys: &[Vec<f64>], values: &[Vec<f64>]) -> Result<()> {
        if keys.len() != self.slots.len() || values.len() != self.slots.len() {
            return Err(Error::Dimension(format!(
                "append of {} key rows / {} value rows into {} head slots",
                keys.len(),
                values.len(),
                self.slots.len()
            )));
        }
        for (slot, (k, v)) in keys.iter().zip(values).enumerate() {
            if k.len() != self.head_dim || v.len() != self.head_dim {
                return Err(Error::Dimension(format!(
                    "slot {slot}: key len {} / value len {} vs head_dim {}",
                    k.len(),
                    v.len(),
                    self.head_dim
                )));
            }
        }
        // Validate everything first so a failed append cannot leave slots
        // with unequal lengths.
        let mut new_indices = Vec::with_capacity(self.slots.len());
        for (slot, k) in keys.iter().enumerate() {
            new_indices.push(self.slots[slot].codebook.quantize_row(k)?);
        }
        for (slot, ix) in new_indices.into_iter().enumerate() {
            self.slots[slot].keys.extend_from_slice(&keys[slot]);
            self.slots[slot].values.extend_from_slice(&values[slot]);
            self.slots[slot].indices.push(ix);
        }
        self.context_len += 1;
        Ok(())
    }

    /// Fast-tier score approximation for one head slot. Meters the codebook
    /// read (`L*d*elem`) and the index-vector read (`n*index`).
    pub fn approx_scores_fast_tier(
        &self,
        slot: usize,
        post_pe_query: &[f64],
        ledger: Option<&AccessLedger>,
    ) -> Result<Vec<f64>> {
        let s = &self.slots[slot];
        if let Some(l) = ledger {
            let codebook_bytes =
                s.codebook.size() * self.head_dim * self.tier.element_width_bytes;
            let index_bytes = self.context_len * self.tier.index_width_bytes;
            l.add_fast((codebook_bytes + index_bytes) as u64);
        }
        attention::approx_scores(post_pe_query, &s.indices, &s.codebook)
    }

    /// Gather-by-index read of selected KV rows — the only route from the
    /// attention path to the slow tier. Meters `2*|indices|*d*elem`.
    pub fn gather_kv(
        &self,
        slot: usize,
        indices: &[usize],
        ledger: Option<&AccessLedger>,
    ) -> Result<(Matrix, Matrix)> {
        let s = &self.slots[slot];
        if let Some(&bad) = indices.iter().find(|&&ix| ix >= self.context_len) {
            return Err(Error::IndexOutOfRange {
                index: bad,
                size: self.context_len,
            });
        }
        if let Some(l) = ledger {
            l.add_slow((2 * indices.len() * self.head_dim * self.tier.element_width_bytes) as u64);
        }
        let d = self.head_dim;
        let mut k = Vec::with_capacity(indices.len() * d);
        let mut v = Vec::with_capacity(indices.len() * d);
        for &ix in indices {
            k.extend_from_slice(&s.keys[ix * d..(ix + 1) * d]);
            v.extend_from_slice(&s.values[ix * d..(ix + 1) * d]);
        }
        Ok((
            Matrix::from_vec(indices.len(), d, k)?,
            Matrix::from_vec(indices.len(), d, v)?,
        ))
    }
}

/// One decode step over every head slot: approximate scores from the fast
/// tier, select top-K under `policy`, then selective attention reading only
/// the selected rows from the slow tier. `post_pe_queries` holds one
/// already-rotated query row per head slot.
///
/// Concurrent decode steps may share the store immutably; appends require
/// exclusive access (enforced by the borrow checker).
pub fn decode_step(
    store: &TieredKvStore,
    post_pe_queries: &[Vec<f64>],
    policy: &RetrievalPolicy,
    ledger: Option<&AccessLedger>,
) -> Result<DecodeStepReport> {
    let n = store.context_len();
    if n == 0 {
        return Err(Error::Empty("decode over empty store".into()));
    }
    if post_pe_queries.len() != store.head_slots() {
        return Err(Error::Dimension(format!(
            "{} queries for {} head slots",
            post_pe_queries.len(),
            store.head_slots()
        )));
    }
    let mut items = Vec::with_capacity(store.head_slots());
    for (slot, q) in post_pe_queries.iter().enumerate() {
        let scores = store.approx_scores_fast_tier(slot, q, ledger)?;
        let selection = attention::select_topk(&scores, policy);
        if let Some(l) = ledger {
            l.add_full_equivalent(
                (2 * n * store.head_dim() * store.tier_config().element_width_bytes) as u64,
            );
            l.add_transfer();
        }
        items.push(ExecutionItem {
            slot,
            query: q.clone(),
            selection,
        });
    }
    let outputs: Vec<Vec<f64>> = selective_attention_executor(store, &items, 0, ledger)
        .into_iter()
        .collect::<Result<_>>()?;
    if let Some(l) = ledger {
        l.add_step();
    }
    let selected_count: Vec<usize> = items.iter().map(|it| it.selection.selected_count()).collect();
    let total_selected: usize = selected_count.iter().sum();
    Ok(DecodeStepReport {
        sparsity_ratio: total_selected as f64 / (store.head_slots() * n) as f64,
        aux_mem_ratio: store.aux_mem_ratio(),
        selected_count,
        outputs,
    })
}

/// Runs a batch of selective-attention items across `workers` threads
/// (0 = the ambient rayon pool). Per-item results are independent, so
/// outputs are bitwise identical for every worker count, and one failing
/// item does not poison the batch.
pub fn selective_attention_executor(
    store: &TieredKvStore,
    batch: &[ExecutionItem],
    workers: usize,
    ledger: Option<&AccessLedger>,
) -> Vec<Result<Vec<f64>>> {
    let run = |item: &ExecutionItem| -> Result<Vec<f64>> {
        if item.slot >= store.head_slots() {
            return Err(Error::IndexOutOfRange {
                index: item.slot,
                size: store.head_slots(),
            });
        }
        if item.query.len() != store.head_dim() {
            return Err(Error::Dimension(format!(
                "query len {} vs head_dim {}",
                item.query.len(),
                store.head_dim()
            )));
        }
        if item.selection.selected_indices.is_empty() {
            return Err(Error::Empty("selection".into()));
        }
        let (keys, values) = store.gather_kv(item.slot, &item.selection.selected_indices, ledger)?;
        let inv_sqrt_d = 1.0 / (store.head_dim() as f64).sqrt();
        Ok(attention::attend_all(&item.query, &keys, &values, inv_sqrt_d))
    };
    if workers == 0 {
        batch.par_iter().map(run).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .expect("thread pool construction");
        pool.install(|| batch.par_iter().map(run).collect())
    }
}
