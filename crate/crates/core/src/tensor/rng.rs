use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Deterministic random stream identified by `(seed, stream_id)`.
///
/// Backed by ChaCha8, whose output is specified bit-for-bit, so draws are
/// identical across runs and platforms. Gaussians use Box–Muller on top of
/// the uniform stream rather than any platform sampler.
#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    core: ChaCha8Rng,
    spare_normal: Option<f64>,
}

/// SplitMix64 finalizer, used to fold tags into a stream id.
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut core = ChaCha8Rng::seed_from_u64(seed);
        core.set_stream(stream_id);
        Self {
            seed,
            stream_id,
            core,
            spare_normal: None,
        }
    }

    /// Stream whose id is derived from a tuple of tags, e.g.
    /// `(purpose, layer, outer_iteration)`. Order-independent of how other
    /// streams are consumed.
    pub fn derived(seed: u64, tags: &[u64]) -> Self {
        let id = tags
            .iter()
            .fold(0x5EED_u64, |acc, &t| mix64(acc ^ mix64(t)));
        Self::new(seed, id)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    pub fn next_u64(&mut self) -> u64 {
        self.core.next_u64()
    }

    /// Uniform in `[0, 1)` with 53 random bits.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, n)` by rejection (no modulo bias).
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        let n = n as u64;
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let x = self.next_u64();
            if x < zone {
                return (x % n) as usize;
            }
        }
    }

    /// Standard normal draw via Box–Muller; both variates of a pair are used.
    pub fn standard_normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        // u1 in (0, 1] keeps the log finite.
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        // libm rather than the platform math library: bit-identical everywhere.
        let radius = (-2.0 * libm::log(u1)).sqrt();
        let angle = 2.0 * std::f64::consts::PI * u2;
        self.spare_normal = Some(radius * libm::sin(angle));
        radius * libm::cos(angle)
    }

    /// `rows × cols` matrix of i.i.d. `N(0, std²)` entries.
    pub fn gauss<T: Scalar>(&mut self, rows: usize, cols: usize, std: f64) -> Result<Matrix<T>> {
        if !(std > 0.0 && std.is_finite()) {
            return Err(Error::Config(format!("gauss: std must be > 0, got {std}")));
        }
        Ok(Matrix::from_fn(rows, cols, |_, _| {
            T::of(std * self.standard_normal())
        }))
    }

    /// `count` distinct indices from `[0, n)`, uniformly without replacement
    /// (partial Fisher–Yates), in draw order.
    pub fn sample_indices(&mut self, n: usize, count: usize) -> Vec<usize> {
        assert!(count <= n, "cannot draw {count} distinct indices from {n}");
        let mut pool: Vec<usize> = (0..n).collect();
        for i in 0..count {
            let j = i + self.below(n - i);
            pool.swap(i, j);
        }
        pool.truncate(count);
        pool
    }

    /// Uniform direction on the unit sphere in `dim` dimensions.
    pub fn unit_sphere(&mut self, dim: usize) -> Vec<f64> {
        loop {
            let v: Vec<f64> = (0..dim).map(|_| self.standard_normal()).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-300 {
                return v.into_iter().map(|x| x / norm).collect();
            }
        }
    }
}

/// `rows × cols` matrix of i.i.d. `N(0, std²)` entries drawn from `rng`.
pub fn gauss<T: Scalar>(rng: &mut RngStream, rows: usize, cols: usize, std: f64) -> Result<Matrix<T>> {
    rng.gauss(rows, cols, std)
}
