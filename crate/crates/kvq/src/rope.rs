//! Rotary position embedding, standard and windowed.
//!
//! Conventions, fixed once and used everywhere:
//! - positions are 0-based integers (negative allowed for relative offsets);
//! - pairing is half-split: channel `m` rotates with channel `m + d/2`,
//!   for pair index `m` in `0..d/2`;
//! - pair frequency is `theta_base^(-2m/d)`, rotation is counterclockwise,
//!   so a positive angle moves the first channel of a pair toward the
//!   second (`[1, 0] -> [0, 1]` at angle pi/2);
//! - non-causal score entries hold [`NON_CAUSAL`] (`-inf`) and must be
//!   excluded from any reduction.

use crate::error::{Error, Result};
use crate::numerics::{dot, Matrix};

/// Sentinel marking score entries outside the causal region.
pub const NON_CAUSAL: f64 = f64::NEG_INFINITY;

/// Position-embedding flavor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RopeMode {
    /// Rotate row `i` of both tensors by position `i`.
    Standard,
    /// Queries get one fixed bridge rotation, keys stay raw; score pairs
    /// closer than `window` still use the exact relative rotation.
    Windowed,
}

/// Rotary embedding parameters shared by all rope operations.
#[derive(Debug, Clone)]
pub struct RopeConfig {
    head_dim: usize,
    theta_base: f64,
    window: usize,
    bridge_offset: i64,
    mode: RopeMode,
}

impl RopeConfig {
    /// Defaults: theta_base 10000, window 64, bridge offset 2048.
    pub fn new(head_dim: usize, mode: RopeMode) -> Result<Self> {
        Self::with_params(head_dim, 10_000.0, 64, 2048, mode)
    }

    /// Fully parameterized constructor.
    ///
    /// `bridge_offset >= window` is the recommended setting (non-local
    /// tokens approximated as far) but is not enforced; analysis configs
    /// legitimately use small offsets such as `b = 0`.
    pub fn with_params(
        head_dim: usize,
        theta_base: f64,
        window: usize,
        bridge_offset: i64,
        mode: RopeMode,
    ) -> Result<Self> {
        if head_dim == 0 || head_dim % 2 != 0 {
            return Err(Error::InvalidConfig(format!(
                "head_dim must be even and positive, got {head_dim}"
            )));
        }
        if !(theta_base > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "theta_base must be positive, got {theta_base}"
            )));
        }
        if window == 0 {
            return Err(Error::InvalidConfig("window must be >= 1".into()));
        }
        if bridge_offset < 0 {
            return Err(Error::InvalidConfig(format!(
                "bridge_offset must be non-negative, got {bridge_offset}"
            )));
        }
        Ok(Self {
            head_dim,
            theta_base,
            window,
            bridge_offset,
            mode,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn theta_base(&self) -> f64 {
        self.theta_base
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn bridge_offset(&self) -> i64 {
        self.bridge_offset
    }

    pub fn mode(&self) -> RopeMode {
        self.mode
    }

    pub fn with_mode(&self, mode: RopeMode) -> Self {
        let mut cfg = self.clone();
        cfg.mode = mode;
        cfg
    }

    /// `1/sqrt(d)` softmax scale.
    pub fn inv_sqrt_d(&self) -> f64 {
        1.0 / (self.head_dim as f64).sqrt()
    }
}

/// Block-diagonal rotation for one position, stored as per-pair cos/sin.
#[derive(Debug, Clone)]
pub struct RotationMatrix {
    position: i64,
    head_dim: usize,
    cos: Vec<f64>,
    sin: Vec<f64>,
}

impl RotationMatrix {
    pub fn new(position: i64, cfg: &RopeConfig) -> Self {
        let pairs = cfg.head_dim / 2;
        let mut cos = Vec::with_capacity(pairs);
        let mut sin = Vec::with_capacity(pairs);
        for m in 0..pairs {
            let freq = cfg
                .theta_base
                .powf(-2.0 * m as f64 / cfg.head_dim as f64);
            let angle = position as f64 * freq;
            cos.push(angle.cos());
            sin.push(angle.sin());
        }
        Self {
            position,
            head_dim: cfg.head_dim,
            cos,
            sin,
        }
    }

    pub fn position(&self) -> i64 {
        self.position
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    /// Applies the rotation to one row.
    pub fn apply(&self, row: &[f64]) -> Result<Vec<f64>> {
        if row.len() != self.head_dim {
            return Err(Error::Dimension(format!(
                "row length {} vs head_dim {}",
                row.len(),
                self.head_dim
            )));
        }
        let half = self.head_dim / 2;
        let mut out = vec![0.0; self.head_dim];
        for m in 0..half {
            let (c, s) = (self.cos[m], self.sin[m]);
            let (x, y) = (row[m], row[m + half]);
            out[m] = x * c - y * s;
            out[m + half] = x * s + y * c;
        }
        Ok(out)
    }

    /// Materializes the dense `d x d` matrix (for algebra checks only).
    pub fn to_dense(&self) -> Matrix {
        let d = self.head_dim;
        let half = d / 2;
        let mut m = Matrix::zeros(d, d);
        // Row-vector convention x' = x R: column j of R holds the
        // coefficients producing output channel j.
        for p in 0..half {
            let (c, s) = (self.cos[p], self.sin[p]);
            m.set(p, p, c);
            m.set(p + half, p, -s);
            m.set(p, p + half, s);
            m.set(p + half, p + half, c);
        }
        m
    }
}

/// Rotates one row by `position`.
pub fn apply_rotation(row: &[f64], position: i64, cfg: &RopeConfig) -> Result<Vec<f64>> {
    RotationMatrix::new(position, cfg).apply(row)
}

/// Max-abs elementwise deviation between `R_i * R_j^T` and `R_{i-j}`.
/// The rotation-composition contract is that this stays below 1e-10.
pub fn relative_rotation_check(i: i64, j: i64, cfg: &RopeConfig) -> f64 {
    let ri = RotationMatrix::new(i, cfg).to_dense();
    let rj = RotationMatrix::new(j, cfg).to_dense();
    let rel = RotationMatrix::new(i - j, cfg).to_dense();
    let prod = ri.matmul_nt(&rj).expect("square rotations");
    let mut max_dev: f64 = 0.0;
    for r in 0..prod.rows() {
        for c in 0..prod.cols() {
            max_dev = max_dev.max((prod.get(r, c) - rel.get(r, c)).abs());
        }
    }
    max_dev
}

/// Produces post-embedding query and key tensors. Row `r` of each tensor is
/// the token at position `r`.
///
/// Standard: both tensors rotate row `r` by position `r`. Windowed: every
/// query row gets the single bridge rotation and the keys are returned
/// unchanged, which is what makes the key side quantizable by one shared
/// codebook.
pub fn post_pe_states(
    queries: &Matrix,
    keys: &Matrix,
    cfg: &RopeConfig,
) -> Result<(Matrix, Matrix)> {
    if queries.cols() != cfg.head_dim || keys.cols() != cfg.head_dim {
        return Err(Error::Dimension(format!(
            "head_dim {} vs queries {} / keys {}",
            cfg.head_dim,
            queries.cols(),
            keys.cols()
        )));
    }
    match cfg.mode {
        RopeMode::Standard => {
            let rotate_all = |t: &Matrix| -> Result<Matrix> {
                let mut rows = Vec::with_capacity(t.rows());
                for r in 0..t.rows() {
                    rows.push(apply_rotation(t.row(r), r as i64, cfg)?);
                }
                Matrix::from_rows(&rows)
            };
            Ok((rotate_all(queries)?, rotate_all(keys)?))
        }
        RopeMode::Windowed => {
            let bridge = RotationMatrix::new(cfg.bridge_offset, cfg);
            let mut rows = Vec::with_capacity(queries.rows());
            for r in 0..queries.rows() {
                rows.push(bridge.apply(queries.row(r))?);
            }
            Ok((Matrix::from_rows(&rows)?, keys.clone()))
        }
    }
}

/// Causal pre-softmax score matrix `u[i][j]` without the `1/sqrt(d)` scale.
/// Entries with `j > i` hold [`NON_CAUSAL`].
///
/// Standard mode is the usual rotate-both-then-dot. Windowed mode computes
/// the non-local region as one bridge-rotated query against raw keys, plus
/// an exactly rotated band of width `window` for pairs with `i - j <
/// window`; the boundary `i - j == window` already takes the bridge branch.
pub fn score_matrix(queries: &Matrix, keys: &Matrix, cfg: &RopeConfig) -> Result<Matrix> {
    if queries.cols() != cfg.head_dim || keys.cols() != cfg.head_dim {
        return Err(Error::Dimension(format!(
            "head_dim {} vs queries {} / keys {}",
            cfg.head_dim,
            queries.cols(),
            keys.cols()
        )));
    }
    if queries.rows() != keys.rows() {
        return Err(Error::Dimension(format!(
            "causal trace needs equal token counts, got {} queries and {} keys",
            queries.rows(),
            keys.rows()
        )));
    }
    let n = queries.rows();
    let mut scores = Matrix::zeros(n, n);
    match cfg.mode {
        RopeMode::Standard => {
            let (q, k) = post_pe_states(queries, keys, cfg)?;
            for i in 0..n {
                for j in 0..n {
                    let v = if j <= i {
                        dot(q.row(i), k.row(j))
                    } else {
                        NON_CAUSAL
                    };
                    scores.set(i, j, v);
                }
            }
        }
        RopeMode::Windowed => {
            let bridge = RotationMatrix::new(cfg.bridge_offset, cfg);
            let band: Vec<RotationMatrix> = (0..cfg.window)
                .map(|delta| RotationMatrix::new(delta as i64, cfg))
                .collect();
            for i in 0..n {
                let bridged = bridge.apply(queries.row(i))?;
                for j in 0..n {
                    let v = if j > i {
                        NON_CAUSAL
                    } else {
                        let delta = i - j;
                        if delta < cfg.window {
                            let rotated = band[delta].apply(queries.row(i))?;
                            dot(&rotated, keys.row(j))
                        } else {
                            dot(&bridged, keys.row(j))
                        }
                    };
                    scores.set(i, j, v);
                }
            }
        }
    }
    Ok(scores)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{norm, sample_gaussian, Covariance, SeededRng};
    use proptest::prelude::*;

    fn cfg(head_dim: usize, mode: RopeMode) -> RopeConfig {
        RopeConfig::new(head_dim, mode).unwrap()
    }

    fn random_tensor(seed: u64, rows: usize, cols: usize) -> Matrix {
        let mut rng = SeededRng::new(seed);
        sample_gaussian(&mut rng, rows, cols, 0.0, &Covariance::Scalar(1.0)).unwrap()
    }

    #[test]
    fn position_zero_is_identity() {
        let c = cfg(8, RopeMode::Standard);
        let row: Vec<f64> = (0..8).map(|i| i as f64 + 0.5).collect();
        assert_eq!(apply_rotation(&row, 0, &c).unwrap(), row);
        let dense = RotationMatrix::new(0, &c).to_dense();
        assert_eq!(dense, Matrix::identity(8));
    }

    #[test]
    fn two_dim_rotation_matches_direct_oracle() {
        // With d = 2 the single pair has frequency exactly 1, so position p
        // rotates by p radians; check against a hand-written 2x2 rotation.
        let c = cfg(2, RopeMode::Standard);
        for p in [-3i64, 1, 2, 7] {
            let angle = p as f64;
            let got = apply_rotation(&[1.0, 0.0], p, &c).unwrap();
            assert!((got[0] - angle.cos()).abs() < 1e-15);
            assert!((got[1] - angle.sin()).abs() < 1e-15);
        }
        // Sign convention at a right angle: counterclockwise sends e1 to e2.
        let r = RotationMatrix {
            position: 0,
            head_dim: 2,
            cos: vec![(std::f64::consts::FRAC_PI_2).cos()],
            sin: vec![(std::f64::consts::FRAC_PI_2).sin()],
        };
        let got = r.apply(&[1.0, 0.0]).unwrap();
        assert!((got[0] - 0.0).abs() < 1e-15);
        assert!((got[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn rotation_preserves_norm() {
        let c = cfg(16, RopeMode::Standard);
        let t = random_tensor(5, 8, 16);
        for (r, p) in [(0usize, 3i64), (1, -40), (2, 99_999), (3, 12345)] {
            let x = t.row(r);
            let y = apply_rotation(x, p, &c).unwrap();
            assert!((norm(&y) - norm(x)).abs() < 1e-10);
        }
    }

    #[test]
    fn rejects_odd_row() {
        let c = cfg(4, RopeMode::Standard);
        assert!(apply_rotation(&[1.0, 2.0, 3.0], 1, &c).is_err());
    }

    #[test]
    fn orthogonality_across_extreme_positions() {
        let c = cfg(32, RopeMode::Standard);
        for p in [-100_000i64, -1, 0, 1, 17, 100_000] {
            let r = RotationMatrix::new(p, &c).to_dense();
            let prod = r.matmul_nt(&r).unwrap();
            let id = Matrix::identity(32);
            let mut dev: f64 = 0.0;
            for i in 0..32 {
                for j in 0..32 {
                    dev = dev.max((prod.get(i, j) - id.get(i, j)).abs());
                }
            }
            assert!(dev < 1e-10, "p={p}: deviation {dev:e}");
        }
    }

    #[test]
    fn relative_rotation_identity_cases() {
        let c = cfg(16, RopeMode::Standard);
        assert!(relative_rotation_check(9, 9, &c) < 1e-12);
        assert!(relative_rotation_check(5, 3, &c) < 1e-10);
        assert!(relative_rotation_check(3, 5, &c) < 1e-10);
    }

    #[test]
    fn relative_rotation_against_handbuilt_blocks() {
        // Independent oracle: build R_{i-j} pair by pair from scratch.
        let d = 8;
        let c = cfg(d, RopeMode::Standard);
        let (i, j) = (11i64, 4i64);
        let prod = RotationMatrix::new(i, &c)
            .to_dense()
            .matmul_nt(&RotationMatrix::new(j, &c).to_dense())
            .unwrap();
        let half = d / 2;
        for m in 0..half {
            let freq = 10_000f64.powf(-2.0 * m as f64 / d as f64);
            let angle = (i - j) as f64 * freq;
            assert!((prod.get(m, m) - angle.cos()).abs() < 1e-10);
            assert!((prod.get(m, m + half) - angle.sin()).abs() < 1e-10);
            assert!((prod.get(m + half, m) + angle.sin()).abs() < 1e-10);
            assert!((prod.get(m + half, m + half) - angle.cos()).abs() < 1e-10);
        }
    }

    #[test]
    fn windowed_keys_pass_through_bitwise() {
        let c = cfg(8, RopeMode::Windowed);
        let q = random_tensor(1, 6, 8);
        let k = random_tensor(2, 6, 8);
        let (_, k_post) = post_pe_states(&q, &k, &c).unwrap();
        assert_eq!(k_post, k);
    }

    #[test]
    fn standard_position_zero_row_unchanged() {
        let c = cfg(8, RopeMode::Standard);
        let q = random_tensor(3, 4, 8);
        let k = random_tensor(4, 4, 8);
        let (q_post, _) = post_pe_states(&q, &k, &c).unwrap();
        assert_eq!(q_post.row(0), q.row(0));
    }

    #[test]
    fn windowed_zero_queries_stay_zero() {
        let c = cfg(8, RopeMode::Windowed);
        let q = Matrix::zeros(5, 8);
        let k = random_tensor(6, 5, 8);
        let (q_post, _) = post_pe_states(&q, &k, &c).unwrap();
        assert!(q_post.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn windowed_with_huge_window_equals_standard() {
        let n = 12;
        let q = random_tensor(7, n, 16);
        let k = random_tensor(8, n, 16);
        let std_cfg = cfg(16, RopeMode::Standard);
        let win_cfg =
            RopeConfig::with_params(16, 10_000.0, n + 1, 2048, RopeMode::Windowed).unwrap();
        let a = score_matrix(&q, &k, &std_cfg).unwrap();
        let b = score_matrix(&q, &k, &win_cfg).unwrap();
        for i in 0..n {
            for j in 0..=i {
                assert!((a.get(i, j) - b.get(i, j)).abs() < 1e-10, "({i},{j})");
            }
        }
    }

    #[test]
    fn window_one_bridge_zero_gives_raw_dots_off_diagonal() {
        let n = 6;
        let q = random_tensor(9, n, 8);
        let k = random_tensor(10, n, 8);
        let c = RopeConfig::with_params(8, 10_000.0, 1, 0, RopeMode::Windowed).unwrap();
        let s = score_matrix(&q, &k, &c).unwrap();
        for i in 0..n {
            for j in 0..i {
                let raw = dot(q.row(i), k.row(j));
                assert!((s.get(i, j) - raw).abs() < 1e-12, "({i},{j})");
            }
        }
    }

    #[test]
    fn boundary_pair_takes_bridge_branch() {
        // At i - j == window the strict `< w` test fails, so the score must
        // equal the bridge formula, not the exact rotation.
        let n = 10;
        let w = 3;
        let q = random_tensor(11, n, 8);
        let k = random_tensor(12, n, 8);
        let c = RopeConfig::with_params(8, 10_000.0, w, 777, RopeMode::Windowed).unwrap();
        let s = score_matrix(&q, &k, &c).unwrap();
        let (i, j) = (7usize, 7 - w);
        let bridged = apply_rotation(q.row(i), 777, &c).unwrap();
        assert_eq!(s.get(i, j), dot(&bridged, k.row(j)));
        let exact = apply_rotation(q.row(i), w as i64, &c).unwrap();
        assert!((s.get(i, j) - dot(&exact, k.row(j))).abs() > 1e-9);
    }

    #[test]
    fn non_causal_entries_are_marked() {
        let n = 5;
        let q = random_tensor(13, n, 8);
        let k = random_tensor(14, n, 8);
        for mode in [RopeMode::Standard, RopeMode::Windowed] {
            let s = score_matrix(&q, &k, &cfg(8, mode)).unwrap();
            for i in 0..n {
                for j in (i + 1)..n {
                    assert_eq!(s.get(i, j), NON_CAUSAL);
                }
            }
        }
    }

    #[test]
    fn standard_scores_are_shift_covariant() {
        // Rotating rows at positions r + delta instead of r leaves every
        // causal score unchanged, which is the relative-position property.
        let n = 8;
        let delta = 1234i64;
        let c = cfg(16, RopeMode::Standard);
        let q = random_tensor(15, n, 16);
        let k = random_tensor(16, n, 16);
        let base = score_matrix(&q, &k, &c).unwrap();
        for i in 0..n {
            let qi = apply_rotation(q.row(i), i as i64 + delta, &c).unwrap();
            for j in 0..=i {
                let kj = apply_rotation(k.row(j), j as i64 + delta, &c).unwrap();
                assert!((dot(&qi, &kj) - base.get(i, j)).abs() < 1e-9, "({i},{j})");
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn composition_property(i in -50_000i64..50_000, j in -50_000i64..50_000, half in 1usize..16) {
            let c = cfg(half * 2, RopeMode::Standard);
            prop_assert!(relative_rotation_check(i, j, &c) < 1e-10);
        }

        #[test]
        fn norm_preservation_property(p in -100_000i64..100_000, seed in 0u64..500) {
            let c = cfg(8, RopeMode::Standard);
            let t = random_tensor(seed, 1, 8);
            let y = apply_rotation(t.row(0), p, &c).unwrap();
            prop_assert!((norm(&y) - norm(t.row(0))).abs() < 1e-10);
        }
    }
}
