//! Per-example clipping and Gaussian noise for summed gradients.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

use crate::numeric::{l2_norm, pairwise_sum};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MechanismError {
    #[error("non-finite value in gradient input")]
    NonFiniteInput,
    #[error("clipping threshold must be positive, got {0}")]
    InvalidThreshold(f64),
    #[error("noise multiplier must be finite and >= 0, got {0}")]
    InvalidSigma(f64),
    #[error("lot size must be positive")]
    InvalidLotSize,
    #[error("noise needs a finite clipping threshold (sigma={sigma}, C=inf)")]
    UnboundedSensitivity { sigma: f64 },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
}

pub type Result<T> = std::result::Result<T, MechanismError>;

/// Seeded, counter-based source of Gaussian noise.
///
/// Backed by ChaCha20: `(seed, stream, position)` fully determines the rest of
/// the output, on every platform.
#[derive(Debug, Clone)]
pub struct NoiseSource {
    rng: ChaCha20Rng,
    seed: u64,
    stream: u64,
}

impl NoiseSource {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self { rng, seed, stream }
    }

    /// Resumes a stream at a position previously returned by [`position`](Self::position).
    pub fn at(seed: u64, stream: u64, position: u128) -> Self {
        let mut s = Self::with_stream(seed, stream);
        s.rng.set_word_pos(position);
        s
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// Position in 32-bit words.
    pub fn position(&self) -> u128 {
        self.rng.get_word_pos()
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform on `[0, 1)` with 53 random bits.
    pub fn uniform(&mut self) -> f64 {
        (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform on `(0, 1]`.
    fn uniform_open_low(&mut self) -> f64 {
        ((self.rng.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Fills `out` with independent `N(0, std²)` draws (Box–Muller, two per pair
    /// of uniforms; an odd tail discards the second value).
    pub fn fill_gaussian(&mut self, out: &mut [f64], std: f64) {
        for pair in out.chunks_mut(2) {
            let r = (-2.0 * self.uniform_open_low().ln()).sqrt();
            let theta = 2.0 * std::f64::consts::PI * self.uniform();
            pair[0] = std * r * theta.cos();
            if let Some(second) = pair.get_mut(1) {
                *second = std * r * theta.sin();
            }
        }
    }

    pub fn gaussian(&mut self) -> f64 {
        let mut v = [0.0];
        self.fill_gaussian(&mut v, 1.0);
        v[0]
    }
}

/// Per-example ℓ2 bound, either on the whole vector or on contiguous segments
/// (one per network layer). `f64::INFINITY` disables clipping.
#[derive(Debug, Clone, PartialEq)]
pub enum ClipConfig {
    Global(f64),
    PerSegment { thresholds: Vec<f64>, lengths: Vec<usize> },
}

impl ClipConfig {
    pub fn validate(&self) -> Result<()> {
        let check = |c: f64| if c > 0.0 { Ok(()) } else { Err(MechanismError::InvalidThreshold(c)) };
        match self {
            ClipConfig::Global(c) => check(*c),
            ClipConfig::PerSegment { thresholds, lengths } => {
                if thresholds.len() != lengths.len() {
                    return Err(MechanismError::DimensionMismatch {
                        expected: lengths.len(),
                        got: thresholds.len(),
                    });
                }
                thresholds.iter().try_for_each(|&c| check(c))
            }
        }
    }

    /// Total dimension, when the config pins one.
    pub fn dim(&self) -> Option<usize> {
        match self {
            ClipConfig::Global(_) => None,
            ClipConfig::PerSegment { lengths, .. } => Some(lengths.iter().sum()),
        }
    }

    pub fn is_unbounded(&self) -> bool {
        match self {
            ClipConfig::Global(c) => c.is_infinite(),
            ClipConfig::PerSegment { thresholds, .. } => thresholds.iter().any(|c| c.is_infinite()),
        }
    }

    fn check_dim(&self, dim: usize) -> Result<()> {
        match self.dim() {
            Some(expected) if expected != dim => Err(MechanismError::DimensionMismatch { expected, got: dim }),
            _ => Ok(()),
        }
    }

    /// Clips `g` in place.
    pub fn apply(&self, g: &mut [f64]) -> Result<()> {
        self.check_dim(g.len())?;
        match self {
            ClipConfig::Global(c) => scale_to_bound(g, *c),
            ClipConfig::PerSegment { thresholds, lengths } => {
                let mut rest = g;
                for (&c, &len) in thresholds.iter().zip(lengths) {
                    let (seg, tail) = rest.split_at_mut(len);
                    scale_to_bound(seg, c);
                    rest = tail;
                }
            }
        }
        Ok(())
    }

    /// Per-coordinate noise standard deviation `σ·C` for each segment.
    fn noise_segments(&self, dim: usize, sigma: f64) -> Vec<(usize, f64)> {
        match self {
            ClipConfig::Global(c) => vec![(dim, sigma * c)],
            ClipConfig::PerSegment { thresholds, lengths } => {
                lengths.iter().zip(thresholds).map(|(&len, &c)| (len, sigma * c)).collect()
            }
        }
    }
}

fn scale_to_bound(g: &mut [f64], c: f64) {
    let norm = l2_norm(g);
    if norm > c {
        let scale = c / norm;
        g.iter_mut().for_each(|x| *x *= scale);
    }
}

/// `g / max(1, ‖g‖₂ / C)`.
pub fn clip_l2(g: &[f64], c: f64) -> Result<Vec<f64>> {
    if !(c > 0.0) {
        return Err(MechanismError::InvalidThreshold(c));
    }
    if g.iter().any(|x| !x.is_finite()) {
        return Err(MechanismError::NonFiniteInput);
    }
    let mut out = g.to_vec();
    scale_to_bound(&mut out, c);
    Ok(out)
}

fn validate_release(clip: &ClipConfig, sigma: f64, lot_size: usize) -> Result<()> {
    clip.validate()?;
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(MechanismError::InvalidSigma(sigma));
    }
    if lot_size == 0 {
        return Err(MechanismError::InvalidLotSize);
    }
    if sigma > 0.0 && clip.is_unbounded() {
        return Err(MechanismError::UnboundedSensitivity { sigma });
    }
    Ok(())
}

/// `(Σ_i clip(g_i) + N(0, σ²C²I)) / L`, where `leaf(i)` yields the raw
/// gradient of example `i`.
///
/// The per-example sum runs over a fixed pairwise tree (see
/// [`pairwise_sum`]) and may evaluate leaves on worker threads; the noise is
/// drawn once, on the calling thread, after the sum.
pub fn sanitize_with<F>(
    count: usize,
    dim: usize,
    clip: &ClipConfig,
    sigma: f64,
    lot_size: usize,
    noise: &mut NoiseSource,
    leaf: F,
) -> Result<Vec<f64>>
where
    F: Fn(usize) -> Vec<f64> + Sync,
{
    validate_release(clip, sigma, lot_size)?;
    clip.check_dim(dim)?;
    let clipped = |i: usize| {
        let mut g = leaf(i);
        if g.len() != dim || g.iter().any(|x| !x.is_finite()) {
            // Poison the sum; reported below.
            return vec![f64::NAN; dim];
        }
        clip.apply(&mut g).expect("dimension checked");
        g
    };
    let mut total = pairwise_sum(count, dim, &clipped);
    if total.iter().any(|x| !x.is_finite()) {
        return Err(MechanismError::NonFiniteInput);
    }
    if sigma > 0.0 {
        let mut offset = 0;
        for (len, std) in clip.noise_segments(dim, sigma) {
            let mut z = vec![0.0; len];
            noise.fill_gaussian(&mut z, std);
            for (t, n) in total[offset..offset + len].iter_mut().zip(&z) {
                *t += n;
            }
            offset += len;
        }
    }
    let inv_l = 1.0 / lot_size as f64;
    total.iter_mut().for_each(|x| *x *= inv_l);
    Ok(total)
}

/// Clips every per-example gradient, sums, adds `N(0, σ²C²I)` once and
/// divides by the nominal lot size `L`.
pub fn sanitize(
    per_example_grads: &[Vec<f64>],
    dim: usize,
    clip: &ClipConfig,
    sigma: f64,
    lot_size: usize,
    noise: &mut NoiseSource,
) -> Result<Vec<f64>> {
    for g in per_example_grads {
        if g.len() != dim {
            return Err(MechanismError::DimensionMismatch { expected: dim, got: g.len() });
        }
        if g.iter().any(|x| !x.is_finite()) {
            return Err(MechanismError::NonFiniteInput);
        }
    }
    sanitize_with(per_example_grads.len(), dim, clip, sigma, lot_size, noise, |i| {
        per_example_grads[i].clone()
    })
}
