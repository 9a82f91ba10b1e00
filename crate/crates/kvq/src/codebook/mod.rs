//! Codebook construction and quantization of key states.
//!
//! Two training routes share one k-means core:
//! - conventional: k-means++ and Lloyd iterations directly on key states,
//!   minimizing the mean squared key reconstruction error;
//! - query-aware: the same algorithm on transformed states `z = k L`,
//!   where `L` is the Cholesky factor of the query second-moment matrix
//!   `H`, so that Euclidean error in z-space equals the quadratic-form
//!   score error `(k - c) H (k - c)^T` in the original space. Trained
//!   codewords are mapped back through `C = C_z L^{-1}`.
//!
//! Quantization of a key follows the same metric its codebook was trained
//! under; ties always resolve to the lowest codeword index.

mod io;

pub use io::{load_codebook, save_codebook};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::numerics::{cholesky, dot, CholeskyFactor, Matrix, SeededRng, SpdMatrix};

/// Which metric a codebook was trained under.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CodebookKind {
    Conventional,
    QueryAware,
}

/// Frozen set of codewords plus, for query-aware codebooks, the metric that
/// produced them.
#[derive(Debug, Clone)]
pub struct Codebook {
    kind: CodebookKind,
    codewords: Matrix,
    transform: Option<CholeskyFactor>,
    h_matrix: Option<SpdMatrix>,
    // codewords * transform, cached so per-token quantization never
    // re-multiplies the codebook.
    codewords_z: Option<Matrix>,
}

/// Relative Frobenius tolerance for `L L^T = H` on freshly built factors.
const FACTOR_MATCH_TOL: f64 = 1e-7;
/// Looser tolerance applied after an f32 round trip through the file format.
const FACTOR_MATCH_TOL_F32: f64 = 1e-5;

impl Codebook {
    pub fn new_conventional(codewords: Matrix) -> Result<Self> {
        if codewords.rows() == 0 {
            return Err(Error::Empty("codebook".into()));
        }
        Ok(Self {
            kind: CodebookKind::Conventional,
            codewords,
            transform: None,
            h_matrix: None,
            codewords_z: None,
        })
    }

    pub fn new_query_aware(
        codewords: Matrix,
        transform: CholeskyFactor,
        h_matrix: SpdMatrix,
    ) -> Result<Self> {
        Self::assemble_query_aware(codewords, transform, h_matrix, FACTOR_MATCH_TOL)
    }

    pub(crate) fn from_file_parts(
        kind: CodebookKind,
        codewords: Matrix,
        transform: Option<CholeskyFactor>,
        h_matrix: Option<SpdMatrix>,
    ) -> Result<Self> {
        match kind {
            CodebookKind::Conventional => Self::new_conventional(codewords),
            CodebookKind::QueryAware => {
                let (t, h) = match (transform, h_matrix) {
                    (Some(t), Some(h)) => (t, h),
                    _ => {
                        return Err(Error::Format(
                            "query-aware codebook file missing H or factor".into(),
                        ))
                    }
                };
                Self::assemble_query_aware(codewords, t, h, FACTOR_MATCH_TOL_F32)
            }
        }
    }

    fn assemble_query_aware(
        codewords: Matrix,
        transform: CholeskyFactor,
        h_matrix: SpdMatrix,
        tol: f64,
    ) -> Result<Self> {
        if codewords.rows() == 0 {
            return Err(Error::Empty("codebook".into()));
        }
        if codewords.cols() != transform.dim() || transform.dim() != h_matrix.dim() {
            return Err(Error::Dimension(format!(
                "codeword dim {}, factor dim {}, H dim {}",
                codewords.cols(),
                transform.dim(),
                h_matrix.dim()
            )));
        }
        let rec = transform.reconstruct();
        let h_dense = h_matrix.to_matrix();
        let mut num = 0.0;
        for r in 0..h_dense.rows() {
            for c in 0..h_dense.cols() {
                let d = rec.get(r, c) - h_dense.get(r, c);
                num += d * d;
            }
        }
        let rel = num.sqrt() / h_dense.frobenius_norm().max(f64::MIN_POSITIVE);
        if rel > tol {
            return Err(Error::Format(format!(
                "factor does not reproduce H: relative Frobenius error {rel:e} > {tol:e}"
            )));
        }
        let codewords_z = codewords.matmul(&transform.to_matrix())?;
        Ok(Self {
            kind: CodebookKind::QueryAware,
            codewords,
            transform: Some(transform),
            h_matrix: Some(h_matrix),
            codewords_z: Some(codewords_z),
        })
    }

    pub fn kind(&self) -> CodebookKind {
        self.kind
    }

    /// Number of codewords.
    pub fn size(&self) -> usize {
        self.codewords.rows()
    }

    pub fn head_dim(&self) -> usize {
        self.codewords.cols()
    }

    /// Codewords in the original key space.
    pub fn codewords(&self) -> &Matrix {
        &self.codewords
    }

    pub fn transform(&self) -> Option<&CholeskyFactor> {
        self.transform.as_ref()
    }

    pub fn h_matrix(&self) -> Option<&SpdMatrix> {
        self.h_matrix.as_ref()
    }

    /// Codeword row `i`.
    pub fn codeword(&self, i: usize) -> &[f64] {
        self.codewords.row(i)
    }

    /// Quantizes one key row under this codebook's metric; ties resolve to
    /// the lowest index.
    pub fn quantize_row(&self, key: &[f64]) -> Result<u32> {
        if key.len() != self.head_dim() {
            return Err(Error::Dimension(format!(
                "key len {} vs codebook dim {}",
                key.len(),
                self.head_dim()
            )));
        }
        Ok(self.quantize_row_inner(key))
    }

    fn quantize_row_inner(&self, key: &[f64]) -> u32 {
        match self.kind {
            CodebookKind::Conventional => nearest(key, &self.codewords).0,
            CodebookKind::QueryAware => {
                let t = self.transform.as_ref().expect("query-aware invariant");
                let d = self.head_dim();
                // z = key * L, accumulated over the full column like the
                // dense matmul so batch and single-row paths agree bitwise.
                let mut z = vec![0.0; d];
                for (j, zj) in z.iter_mut().enumerate() {
                    let mut acc = 0.0;
                    for (i, k) in key.iter().enumerate() {
                        acc += k * t.get(i, j);
                    }
                    *zj = acc;
                }
                nearest(&z, self.codewords_z.as_ref().expect("query-aware invariant")).0
            }
        }
    }
}

/// Per-token codeword indices; the compressed stand-in for the key cache.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodeIndexVector {
    indices: Vec<u32>,
}

impl CodeIndexVector {
    pub fn new(indices: Vec<u32>) -> Self {
        Self { indices }
    }

    pub fn empty() -> Self {
        Self {
            indices: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn get(&self, i: usize) -> u32 {
        self.indices[i]
    }

    pub fn push(&mut self, index: u32) {
        self.indices.push(index);
    }

    pub fn as_slice(&self) -> &[u32] {
        &self.indices
    }

    /// Checks every index against the codebook size.
    pub fn validate(&self, cb: &Codebook) -> Result<()> {
        for &ix in &self.indices {
            if ix as usize >= cb.size() {
                return Err(Error::IndexOutOfRange {
                    index: ix as usize,
                    size: cb.size(),
                });
            }
        }
        Ok(())
    }
}

/// What to do when a Lloyd iteration leaves a cluster empty.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmptyClusterPolicy {
    /// Re-seed the empty centroid with the farthest member of the largest
    /// cluster. Keeps the codebook size exact and is fully deterministic.
    SplitLargest,
    /// Re-seed with a random training point.
    Resample,
}

/// Training knobs for both codebook kinds.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub codebook_size: usize,
    pub max_iters: usize,
    /// Stop when the relative objective improvement falls below this.
    pub convergence_tol: f64,
    pub rng: SeededRng,
    pub empty_cluster_policy: EmptyClusterPolicy,
    /// Jitter scale for `H <- H + eps * (tr(H)/d) * I` before factorization.
    pub h_regularization_eps: f64,
}

impl TrainConfig {
    pub fn new(rng: SeededRng) -> Self {
        Self {
            codebook_size: 4096,
            max_iters: 50,
            convergence_tol: 1e-9,
            rng,
            empty_cluster_policy: EmptyClusterPolicy::SplitLargest,
            h_regularization_eps: 1e-6,
        }
    }

    pub fn with_codebook_size(mut self, size: usize) -> Self {
        self.codebook_size = size;
        self
    }

    pub fn with_max_iters(mut self, iters: usize) -> Self {
        self.max_iters = iters;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.codebook_size < 2 {
            return Err(Error::InvalidConfig(format!(
                "codebook_size must be >= 2, got {}",
                self.codebook_size
            )));
        }
        if self.max_iters < 1 {
            return Err(Error::InvalidConfig("max_iters must be >= 1".into()));
        }
        if self.convergence_tol < 0.0 || self.h_regularization_eps < 0.0 {
            return Err(Error::InvalidConfig(
                "tolerances must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Objective history of one training run. For query-aware training the
/// objective is measured in z-space, which equals the quadratic-form score
/// error in the original space.
#[derive(Debug, Clone)]
pub struct TrainTrace {
    /// Mean squared quantization error after each assignment pass.
    pub objective_per_iteration: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// Estimates the query second-moment matrix `H = (1/m) sum q^T q`, plus the
/// scale-invariant jitter `eps * (tr/d) * I` that keeps rank-deficient
/// estimates factorable.
pub fn estimate_h(post_pe_queries: &Matrix, eps: f64) -> Result<SpdMatrix> {
    let m = post_pe_queries.rows();
    let d = post_pe_queries.cols();
    if m == 0 {
        return Err(Error::Empty("query sample for H estimation".into()));
    }
    if eps < 0.0 {
        return Err(Error::InvalidConfig(format!("eps {eps} is negative")));
    }
    if m < d {
        log::warn!("estimating a {d}x{d} second moment from only {m} queries; expect rank deficiency");
    }
    let qt = post_pe_queries.transpose();
    let mut h = qt.matmul(post_pe_queries)?;
    let inv_m = 1.0 / m as f64;
    let mut scaled = Vec::with_capacity(d * d);
    for v in h.data() {
        scaled.push(v * inv_m);
    }
    h = Matrix::from_vec(d, d, scaled)?;
    let base = SpdMatrix::from_matrix(&h)?;
    Ok(base.regularized(eps))
}

/// Conventional codebook: k-means++ seeding and Lloyd iterations on the key
/// states themselves.
pub fn train_conventional(keys: &Matrix, cfg: &TrainConfig) -> Result<Codebook> {
    Ok(train_conventional_traced(keys, cfg)?.0)
}

/// Like [`train_conventional`] but also returns the objective history.
pub fn train_conventional_traced(
    keys: &Matrix,
    cfg: &TrainConfig,
) -> Result<(Codebook, TrainTrace)> {
    cfg.validate()?;
    let outcome = kmeans(keys, cfg)?;
    Ok((
        Codebook::new_conventional(outcome.centroids)?,
        outcome.trace,
    ))
}

/// Query-aware codebook: k-means in the space transformed by the Cholesky
/// factor of (regularized) `H`, mapped back to key space afterwards.
pub fn train_query_aware(keys: &Matrix, h: &SpdMatrix, cfg: &TrainConfig) -> Result<Codebook> {
    Ok(train_query_aware_traced(keys, h, cfg)?.0)
}

/// Like [`train_query_aware`] but also returns the objective history; the
/// recorded objective is the z-space mean squared error, identical to the
/// quadratic-form score error.
pub fn train_query_aware_traced(
    keys: &Matrix,
    h: &SpdMatrix,
    cfg: &TrainConfig,
) -> Result<(Codebook, TrainTrace)> {
    cfg.validate()?;
    if h.dim() != keys.cols() {
        return Err(Error::Dimension(format!(
            "H dim {} vs key dim {}",
            h.dim(),
            keys.cols()
        )));
    }
    let h_reg = h.regularized(cfg.h_regularization_eps);
    let transform = cholesky(&h_reg)?;
    let z = keys.matmul(&transform.to_matrix())?;
    let outcome = kmeans(&z, cfg)?;
    let codewords = transform.right_solve(&outcome.centroids)?;
    Ok((
        Codebook::new_query_aware(codewords, transform, h_reg)?,
        outcome.trace,
    ))
}

/// Maps each key to its nearest codeword under the codebook's metric.
/// Query-aware codebooks quantize in the transformed space; both kinds
/// break ties toward the lowest index. Parallel over keys, deterministic.
pub fn quantize(keys: &Matrix, cb: &Codebook) -> Result<CodeIndexVector> {
    if keys.cols() != cb.head_dim() {
        return Err(Error::Dimension(format!(
            "key dim {} vs codebook dim {}",
            keys.cols(),
            cb.head_dim()
        )));
    }
    let indices: Vec<u32> = (0..keys.rows())
        .into_par_iter()
        .map(|i| cb.quantize_row_inner(keys.row(i)))
        .collect();
    Ok(CodeIndexVector::new(indices))
}

/// Symmetric average of per-codeword max cosine similarity, both directions.
pub fn codebook_similarity(c1: &Codebook, c2: &Codebook) -> Result<f64> {
    if c1.head_dim() != c2.head_dim() {
        return Err(Error::Dimension(format!(
            "codebook dims {} vs {}",
            c1.head_dim(),
            c2.head_dim()
        )));
    }
    let norms = |cb: &Codebook| -> Result<Vec<f64>> {
        (0..cb.size())
            .map(|i| {
                let n = crate::numerics::norm(cb.codeword(i));
                if n == 0.0 {
                    Err(Error::ZeroNormCodeword(i))
                } else {
                    Ok(n)
                }
            })
            .collect()
    };
    let n1 = norms(c1)?;
    let n2 = norms(c2)?;
    let directed = |a: &Codebook, na: &[f64], b: &Codebook, nb: &[f64]| -> f64 {
        let mut total = 0.0;
        for i in 0..a.size() {
            let mut best = f64::NEG_INFINITY;
            for j in 0..b.size() {
                let cos = dot(a.codeword(i), b.codeword(j)) / (na[i] * nb[j]);
                if cos > best {
                    best = cos;
                }
            }
            total += best;
        }
        total / a.size() as f64
    };
    Ok(0.5 * directed(c1, &n1, c2, &n2) + 0.5 * directed(c2, &n2, c1, &n1))
}

/// Mean squared error of the score approximation over all (query, key)
/// pairs: quantize the keys, then average `(q (k - c)^T)^2`.
pub fn attention_mse(queries: &Matrix, keys: &Matrix, cb: &Codebook) -> Result<f64> {
    if queries.rows() == 0 || keys.rows() == 0 {
        return Err(Error::Empty("attention_mse inputs".into()));
    }
    if queries.cols() != keys.cols() {
        return Err(Error::Dimension(format!(
            "query dim {} vs key dim {}",
            queries.cols(),
            keys.cols()
        )));
    }
    let s = quantize(keys, cb)?;
    let mut err_rows = Vec::with_capacity(keys.rows());
    for j in 0..keys.rows() {
        let c = cb.codeword(s.get(j) as usize);
        err_rows.push(
            keys.row(j)
                .iter()
                .zip(c.iter())
                .map(|(k, c)| k - c)
                .collect::<Vec<f64>>(),
        );
    }
    let mut total = 0.0;
    for i in 0..queries.rows() {
        let q = queries.row(i);
        for err in &err_rows {
            let e = dot(q, err);
            total += e * e;
        }
    }
    Ok(total / (queries.rows() as f64 * keys.rows() as f64))
}

struct KmeansOutcome {
    centroids: Matrix,
    trace: TrainTrace,
}

/// Nearest-centroid assignment; squared Euclidean distance, ties to the
/// lowest index. Parallel over points, deterministic because each point is
/// independent and the objective is reduced serially afterwards.
fn assign(points: &Matrix, centroids: &Matrix) -> (Vec<u32>, Vec<f64>) {
    let pairs: Vec<(u32, f64)> = (0..points.rows())
        .into_par_iter()
        .map(|i| nearest(points.row(i), centroids))
        .collect();
    let mut assignments = Vec::with_capacity(pairs.len());
    let mut dists = Vec::with_capacity(pairs.len());
    for (a, d) in pairs {
        assignments.push(a);
        dists.push(d);
    }
    (assignments, dists)
}

fn nearest(point: &[f64], centroids: &Matrix) -> (u32, f64) {
    let mut best = 0u32;
    let mut best_dist = f64::INFINITY;
    for c in 0..centroids.rows() {
        let dist = sq_dist(point, centroids.row(c));
        if dist < best_dist {
            best_dist = dist;
            best = c as u32;
        }
    }
    (best, best_dist)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for i in 0..a.len() {
        let d = a[i] - b[i];
        acc += d * d;
    }
    acc
}

/// k-means++ seeding: first center uniform, the rest sampled proportional
/// to squared distance from the chosen set.
fn seed_centroids(points: &Matrix, count: usize, rng: &mut SeededRng) -> Matrix {
    use rand::Rng;
    let n = points.rows();
    let d = points.cols();
    let mut chosen = Vec::with_capacity(count);
    chosen.push(rng.gen_range(0..n));
    let mut min_sq: Vec<f64> = (0..n)
        .map(|i| sq_dist(points.row(i), points.row(chosen[0])))
        .collect();
    while chosen.len() < count {
        let total: f64 = min_sq.iter().sum();
        let next = if total > 0.0 {
            let r = rng.gen::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &w) in min_sq.iter().enumerate() {
                acc += w;
                if acc > r {
                    pick = Some(i);
                    break;
                }
            }
            // Rounding can exhaust the walk; fall back to the last point
            // with positive weight.
            pick.unwrap_or_else(|| {
                min_sq
                    .iter()
                    .rposition(|&w| w > 0.0)
                    .expect("total > 0 implies a positive weight")
            })
        } else {
            // All remaining points coincide with chosen centers; take the
            // lowest index not yet used to keep the count exact.
            (0..n)
                .find(|i| !chosen.contains(i))
                .expect("count <= n checked by caller")
        };
        chosen.push(next);
        for i in 0..n {
            let dist = sq_dist(points.row(i), points.row(next));
            if dist < min_sq[i] {
                min_sq[i] = dist;
            }
        }
    }
    let mut data = Vec::with_capacity(count * d);
    for &ix in &chosen {
        data.extend_from_slice(points.row(ix));
    }
    Matrix::from_vec(count, d, data).expect("rows copied from a valid matrix")
}

fn kmeans(points: &Matrix, cfg: &TrainConfig) -> Result<KmeansOutcome> {
    let n = points.rows();
    let l = cfg.codebook_size;
    if n < l {
        return Err(Error::Training(format!(
            "{n} training vectors for {l} codewords"
        )));
    }
    let mut rng = cfg.rng.clone();
    let mut centroids = seed_centroids(points, l, &mut rng);
    let (mut assignments, dists) = assign(points, &centroids);
    let mut objective = vec![mean(&dists)];
    let mut converged = false;
    let mut iterations = 0;

    for _ in 0..cfg.max_iters {
        iterations += 1;
        centroids = update_centroids(points, &assignments, l, cfg, &mut rng);
        let (new_assignments, dists) = assign(points, &centroids);
        let j = mean(&dists);
        let j_prev = *objective.last().expect("seeded");
        objective.push(j);
        if new_assignments == assignments {
            converged = true;
            break;
        }
        assignments = new_assignments;
        if j_prev - j <= cfg.convergence_tol * j_prev.abs() {
            converged = true;
            break;
        }
    }

    Ok(KmeansOutcome {
        centroids,
        trace: TrainTrace {
            objective_per_iteration: objective,
            iterations,
            converged,
        },
    })
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Cluster means in data order; empty clusters are repaired per policy.
fn update_centroids(
    points: &Matrix,
    assignments: &[u32],
    count: usize,
    cfg: &TrainConfig,
    rng: &mut SeededRng,
) -> Matrix {
    use rand::Rng;
    let d = points.cols();
    let mut sums = vec![0.0; count * d];
    let mut sizes = vec![0usize; count];
    for (i, &a) in assignments.iter().enumerate() {
        let a = a as usize;
        sizes[a] += 1;
        let row = points.row(i);
        for c in 0..d {
            sums[a * d + c] += row[c];
        }
    }
    let mut owner: Vec<u32> = assignments.to_vec();
    for cluster in 0..count {
        if sizes[cluster] > 0 {
            let inv = 1.0 / sizes[cluster] as f64;
            for c in 0..d {
                sums[cluster * d + c] *= inv;
            }
        }
    }
    for cluster in 0..count {
        if sizes[cluster] > 0 {
            continue;
        }
        let donor_point = match cfg.empty_cluster_policy {
            EmptyClusterPolicy::Resample => rng.gen_range(0..points.rows()),
            EmptyClusterPolicy::SplitLargest => {
                let largest = (0..count)
                    .max_by(|&a, &b| sizes[a].cmp(&sizes[b]).then(b.cmp(&a)))
                    .expect("count >= 1");
                let mut best = None;
                let mut best_dist = -1.0;
                for (i, &a) in owner.iter().enumerate() {
                    if a as usize == largest {
                        let dist = sq_dist(points.row(i), &sums[largest * d..(largest + 1) * d]);
                        if dist > best_dist {
                            best_dist = dist;
                            best = Some(i);
                        }
                    }
                }
                let pick = best.expect("largest cluster is non-empty");
                sizes[largest] -= 1;
                pick
            }
        };
        sums[cluster * d..(cluster + 1) * d].copy_from_slice(points.row(donor_point));
        owner[donor_point] = cluster as u32;
        sizes[cluster] = 1;
    }
    Matrix::from_vec(count, d, sums).expect("finite means of finite points")
}

#[cfg(test)]
mod tests;
