//! Gumbel perturbation of latent codes.

use rand::RngCore;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diff::Tensor;
use crate::error::{Error, Result};

/// Uniform draws are clamped to `[EPS_U, 1 - EPS_U]` before the double log.
pub const EPS_U: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GumbelConfig {
    pub sigma: f64,
    pub batch: usize,
    pub seed: u64,
}

impl GumbelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::InvalidArgument(format!("sigma must be >= 0, got {}", self.sigma)));
        }
        if self.batch == 0 {
            return Err(Error::InvalidArgument("batch must be at least 1".into()));
        }
        Ok(())
    }
}

/// `-sigma * ln(-ln u)` with `u` clamped away from 0 and 1.
pub fn gumbel_noise(u: f64, sigma: f64) -> f64 {
    let u = u.clamp(EPS_U, 1.0 - EPS_U);
    -sigma * (-u.ln()).ln()
}

/// Stream for sample `s` under `seed`; the i-th uniform it yields belongs to
/// coordinate i. Streams for different samples never overlap.
fn stream(seed: u64, sample: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(sample);
    rng
}

#[inline]
fn unit_f64(rng: &mut ChaCha8Rng) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Gumbel noise for coordinates `0..len` of sample `sample`.
pub fn noise_row(seed: u64, sample: u64, len: usize, sigma: f64) -> Vec<f64> {
    let mut rng = stream(seed, sample);
    (0..len).map(|_| gumbel_noise(unit_f64(&mut rng), sigma)).collect()
}

/// `y` plus the noise of sample `sample`.
pub fn perturb_one(y: &[f64], seed: u64, sample: u64, sigma: f64) -> Vec<f64> {
    if sigma == 0.0 {
        return y.to_vec();
    }
    noise_row(seed, sample, y.len(), sigma)
        .into_iter()
        .zip(y)
        .map(|(g, v)| v + g)
        .collect()
}

/// `B x l` matrix whose row `s` is `y` plus independent Gumbel noise.
pub fn perturb(y: &[f64], cfg: &GumbelConfig) -> Result<Tensor> {
    cfg.validate()?;
    if let Some(bad) = y.iter().find(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument(format!("latent entry {bad} is not finite")));
    }
    let mut data = Vec::with_capacity(cfg.batch * y.len());
    for s in 0..cfg.batch {
        data.extend(perturb_one(y, cfg.seed, s as u64, cfg.sigma));
    }
    Ok(Tensor::new(cfg.batch, y.len(), data))
}

/// Mixes a base seed with a counter (SplitMix64 finalizer) so that every
/// search step or epoch draws from its own family of streams.
pub fn derive_seed(seed: u64, counter: u64) -> u64 {
    let mut z = seed ^ counter.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
