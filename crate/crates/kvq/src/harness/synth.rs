//! Synthetic state generators.
//!
//! The generators stand in for model-derived hidden states and are shaped
//! to expose the effects under study: shared Gaussian-mixture keys make
//! near-duplicate content recur at distant positions (which standard
//! rotary embedding then scatters), and query covariances with a chosen
//! condition number control how far the second-moment matrix is from a
//! scaled identity.

use rand::Rng;

use crate::error::Result;
use crate::numerics::{sample_gaussian, Covariance, Matrix, SeededRng, SpdMatrix};
use crate::rope::{apply_rotation, RopeConfig};

/// Gaussian mixture shape knobs.
#[derive(Debug, Clone, Copy)]
pub struct MixtureParams {
    pub components: usize,
    pub center_spread: f64,
    pub within_std: f64,
}

/// Component centers, drawn once and shared by related samples.
pub fn mixture_centers(rng: &mut SeededRng, params: &MixtureParams, d: usize) -> Result<Matrix> {
    sample_gaussian(
        rng,
        params.components,
        d,
        0.0,
        &Covariance::Scalar(params.center_spread * params.center_spread),
    )
}

/// `n` tokens, each a random center plus isotropic noise.
pub fn mixture_tokens(
    rng: &mut SeededRng,
    centers: &Matrix,
    within_std: f64,
    n: usize,
) -> Result<Matrix> {
    let d = centers.cols();
    let noise = sample_gaussian(rng, n, d, 0.0, &Covariance::Scalar(within_std * within_std))?;
    let mut rows = Vec::with_capacity(n);
    for i in 0..n {
        let c = centers.row(rng.gen_range(0..centers.rows()));
        let row: Vec<f64> = c.iter().zip(noise.row(i)).map(|(a, b)| a + b).collect();
        rows.push(row);
    }
    Matrix::from_rows(&rows)
}

/// `n` distinct positions spread over `[0, max_position)` in ascending
/// order: an even grid plus bounded jitter.
pub fn spread_positions(rng: &mut SeededRng, n: usize, max_position: i64) -> Vec<i64> {
    let stride = (max_position / n as i64).max(1);
    (0..n as i64)
        .map(|i| {
            let base = i * stride;
            let jitter = if stride > 1 {
                rng.gen_range(0..stride)
            } else {
                0
            };
            (base + jitter).min(max_position - 1)
        })
        .collect()
}

/// Rotates row `r` by `positions[r]`.
pub fn rotate_rows_at_positions(
    tensor: &Matrix,
    positions: &[i64],
    cfg: &RopeConfig,
) -> Result<Matrix> {
    let mut rows = Vec::with_capacity(tensor.rows());
    for r in 0..tensor.rows() {
        rows.push(apply_rotation(tensor.row(r), positions[r], cfg)?);
    }
    Matrix::from_rows(&rows)
}

/// Diagonal covariance with eigenvalues sweeping from 1 down to `1/cond`,
/// so its condition number is exactly `cond`.
pub fn anisotropic_covariance(d: usize, cond: f64) -> SpdMatrix {
    let mut diag = Vec::with_capacity(d);
    for j in 0..d {
        let t = if d == 1 { 0.0 } else { j as f64 / (d - 1) as f64 };
        diag.push(cond.powf(-t));
    }
    SpdMatrix::diagonal(&diag)
}

/// Queries with the anisotropic diagonal covariance.
pub fn anisotropic_queries(
    rng: &mut SeededRng,
    m: usize,
    d: usize,
    cond: f64,
) -> Result<Matrix> {
    sample_gaussian(rng, m, d, 0.0, &Covariance::Spd(anisotropic_covariance(d, cond)))
}

/// Equicorrelation covariance `(1 - rho) I + rho J`; positive definite for
/// `-1/(d-1) < rho < 1`.
pub fn equicorrelated_covariance(d: usize, rho: f64) -> SpdMatrix {
    let mut m = Matrix::zeros(d, d);
    for r in 0..d {
        for c in 0..d {
            m.set(r, c, if r == c { 1.0 } else { rho });
        }
    }
    SpdMatrix::from_matrix(&m).expect("symmetric by construction")
}

/// Queries with the equicorrelation covariance; `rho = 0` degenerates to
/// the unit isotropic Gaussian.
pub fn equicorrelated_queries(
    rng: &mut SeededRng,
    m: usize,
    d: usize,
    rho: f64,
) -> Result<Matrix> {
    sample_gaussian(rng, m, d, 0.0, &Covariance::Spd(equicorrelated_covariance(d, rho)))
}
