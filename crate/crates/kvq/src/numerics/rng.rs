//! Seeded, platform-independent randomness.
//!
//! All stochastic behavior in the engine flows through [`SeededRng`] so that
//! a (seed, algorithm) pair pins the entire byte stream. ChaCha generators
//! are used because their output is identical on every platform.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::{ChaCha12Rng, ChaCha20Rng, ChaCha8Rng};
use rand_distr::StandardNormal;

use super::{cholesky, Matrix, SpdMatrix};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
enum Stream {
    ChaCha8(ChaCha8Rng),
    ChaCha12(ChaCha12Rng),
    ChaCha20(ChaCha20Rng),
}

/// Reproducible random stream identified by (seed, algorithm id).
#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    algorithm: &'static str,
    stream: Stream,
}

impl SeededRng {
    /// Default algorithm ("chacha12").
    pub fn new(seed: u64) -> Self {
        Self::with_algorithm(seed, "chacha12").expect("default algorithm")
    }

    /// Supported ids: "chacha8", "chacha12", "chacha20".
    pub fn with_algorithm(seed: u64, algorithm: &str) -> Result<Self> {
        let (algorithm, stream) = match algorithm {
            "chacha8" => ("chacha8", Stream::ChaCha8(ChaCha8Rng::seed_from_u64(seed))),
            "chacha12" => (
                "chacha12",
                Stream::ChaCha12(ChaCha12Rng::seed_from_u64(seed)),
            ),
            "chacha20" => (
                "chacha20",
                Stream::ChaCha20(ChaCha20Rng::seed_from_u64(seed)),
            ),
            other => {
                return Err(Error::InvalidConfig(format!(
                    "unknown rng algorithm id {other:?}"
                )))
            }
        };
        Ok(Self {
            seed,
            algorithm,
            stream,
        })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn algorithm_id(&self) -> &'static str {
        self.algorithm
    }

    /// Derives an independent substream; used to give each head or
    /// experiment arm its own deterministic stream.
    pub fn derive(&self, salt: u64) -> SeededRng {
        Self::with_algorithm(splitmix64(self.seed ^ splitmix64(salt)), self.algorithm)
            .expect("algorithm id already validated")
    }

    /// One standard normal draw.
    pub fn standard_normal(&mut self) -> f64 {
        self.sample(StandardNormal)
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

impl RngCore for SeededRng {
    fn next_u32(&mut self) -> u32 {
        match &mut self.stream {
            Stream::ChaCha8(r) => r.next_u32(),
            Stream::ChaCha12(r) => r.next_u32(),
            Stream::ChaCha20(r) => r.next_u32(),
        }
    }

    fn next_u64(&mut self) -> u64 {
        match &mut self.stream {
            Stream::ChaCha8(r) => r.next_u64(),
            Stream::ChaCha12(r) => r.next_u64(),
            Stream::ChaCha20(r) => r.next_u64(),
        }
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        match &mut self.stream {
            Stream::ChaCha8(r) => r.fill_bytes(dest),
            Stream::ChaCha12(r) => r.fill_bytes(dest),
            Stream::ChaCha20(r) => r.fill_bytes(dest),
        }
    }

    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> std::result::Result<(), rand::Error> {
        self.fill_bytes(dest);
        Ok(())
    }
}

/// Covariance specification for Gaussian sampling.
#[derive(Debug, Clone)]
pub enum Covariance {
    /// Isotropic `v * I`; `v = 0` degenerates to a constant.
    Scalar(f64),
    /// Full covariance matrix; must be positive definite.
    Spd(SpdMatrix),
}

/// Draws `rows` i.i.d. Gaussian row vectors of length `cols`.
///
/// For a full covariance `S = L L^T`, each row is `mean + eps L^T` with
/// `eps` standard normal, so the rows have covariance `S`. Draw order is
/// row-major and never depends on threading.
pub fn sample_gaussian(
    rng: &mut SeededRng,
    rows: usize,
    cols: usize,
    mean: f64,
    cov: &Covariance,
) -> Result<Matrix> {
    match cov {
        Covariance::Scalar(v) => {
            if *v < 0.0 {
                return Err(Error::InvalidConfig(format!(
                    "scalar covariance {v} is negative"
                )));
            }
            let sd = v.sqrt();
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows * cols {
                data.push(mean + sd * rng.standard_normal());
            }
            Matrix::from_vec(rows, cols, data)
        }
        Covariance::Spd(sigma) => {
            if sigma.dim() != cols {
                return Err(Error::Dimension(format!(
                    "covariance dim {} vs cols {}",
                    sigma.dim(),
                    cols
                )));
            }
            let l = cholesky(sigma)?;
            let mut data = Vec::with_capacity(rows * cols);
            let mut eps = vec![0.0; cols];
            for _ in 0..rows {
                for e in eps.iter_mut() {
                    *e = rng.standard_normal();
                }
                // x_j = mean + sum_{i<=j} eps_i L[j][i]
                for j in 0..cols {
                    let mut acc = 0.0;
                    for i in 0..=j {
                        acc += eps[i] * l.get(j, i);
                    }
                    data.push(mean + acc);
                }
            }
            Matrix::from_vec(rows, cols, data)
        }
    }
}
