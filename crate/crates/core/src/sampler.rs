//! Random problem generation.
//!
//! Draw schemes are pinned so a seed reproduces the same problem on every
//! platform: uniforms come from ChaCha8, normals from Box-Muller, Poisson
//! counts from CDF inversion, and out-of-range draws are redrawn.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{BcCase, DesignDomain, Face, Load, ProblemSpec};
use crate::error::{Error, Result};

pub type SeededRng = ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub vf_mean: f64,
    pub vf_std: f64,
    pub vf_clamp: [f64; 2],
    pub load_lambda: f64,
    pub load_clamp: [usize; 2],
    /// Upper bound of the fractional anchor coordinate along x, y, z.
    pub anchor_range: [f64; 3],
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            vf_mean: 0.28,
            vf_std: 0.07,
            vf_clamp: [0.07, 0.5],
            load_lambda: 4.0,
            load_clamp: [1, 10],
            anchor_range: [1.0, 0.5, 0.5],
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.vf_clamp[0] < self.vf_clamp[1]) || self.load_clamp[0] > self.load_clamp[1] {
            return Err(Error::Invalid("sampler clamps must be ordered".into()));
        }
        if !(self.load_lambda > 0.0) || !(self.vf_std > 0.0) {
            return Err(Error::Invalid("sampler lambda and std must be positive".into()));
        }
        if self.anchor_range.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return Err(Error::Invalid("anchor ranges must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Uniform in `(0, 1]`.
fn open_uniform(rng: &mut impl Rng) -> f64 {
    1.0 - rng.gen::<f64>()
}

/// Standard normal via the cosine branch of Box-Muller.
pub fn standard_normal(rng: &mut impl Rng) -> f64 {
    let u1 = open_uniform(rng);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Poisson draw by sequential CDF inversion.
pub fn poisson(rng: &mut impl Rng, lambda: f64) -> u64 {
    let u: f64 = rng.gen();
    let mut k = 0u64;
    let mut p = (-lambda).exp();
    let mut cdf = p;
    while u > cdf {
        k += 1;
        p *= lambda / k as f64;
        cdf += p;
        if p == 0.0 && cdf < u {
            // tail exhausted by rounding
            break;
        }
    }
    k
}

/// Poisson redrawn until it lands in `[lo, hi]`.
///
/// After 64 misses the window is too unlikely for redraws to be practical
/// (e.g. `lambda = 30` on a 3-iteration trace), so the draw switches to
/// inverting the truncated pmf directly, which has the same distribution.
pub fn truncated_poisson(rng: &mut impl Rng, lambda: f64, lo: u64, hi: u64) -> u64 {
    assert!(lo <= hi, "empty truncation window");
    for _ in 0..64 {
        let k = poisson(rng, lambda);
        if (lo..=hi).contains(&k) {
            return k;
        }
    }
    // log pmf, shifted by its maximum over the window before exponentiating
    let log_pmf = |k: u64| k as f64 * lambda.ln() - lambda - (1..=k).map(|i| (i as f64).ln()).sum::<f64>();
    let logs: Vec<f64> = (lo..=hi).map(log_pmf).collect();
    let top = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logs.iter().map(|l| (l - top).exp()).collect();
    let mut u = rng.gen::<f64>() * weights.iter().sum::<f64>();
    for (k, w) in (lo..=hi).zip(&weights) {
        if u < *w {
            return k;
        }
        u -= w;
    }
    hi
}

pub fn sample_volume_fraction(rng: &mut impl Rng, config: &SamplerConfig) -> f64 {
    let [lo, hi] = config.vf_clamp;
    loop {
        let v = config.vf_mean + config.vf_std * standard_normal(rng);
        if (lo..=hi).contains(&v) {
            return v;
        }
    }
}

pub fn sample_loads(rng: &mut impl Rng, domain: &DesignDomain, config: &SamplerConfig) -> Vec<Load> {
    let [lo, hi] = config.load_clamp;
    let count = truncated_poisson(rng, config.load_lambda, lo as u64, hi as u64) as usize;
    let counts = domain.grid().dims();
    (0..count)
        .map(|_| {
            let direction = loop {
                let d: [f64; 3] = [rng.gen(), rng.gen(), rng.gen()];
                let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm > 1e-12 {
                    break d.map(|v| v / norm);
                }
            };
            let magnitude = if rng.gen::<bool>() { 1.0 } else { -1.0 };
            let face = Face::ALL[rng.gen_range(0..6)];
            let anchor = face.in_plane_axes().map(|axis| {
                let frac = rng.gen::<f64>() * config.anchor_range[axis];
                // snap to the node lattice
                (frac * counts[axis] as f64).round() / counts[axis] as f64
            });
            Load {
                face,
                anchor,
                direction,
                magnitude,
            }
        })
        .collect()
}

/// Draws a complete problem from its own seed.
pub fn sample_problem(seed: u64, domain: &DesignDomain, config: &SamplerConfig) -> ProblemSpec {
    let mut rng = rng_from_seed(seed);
    let volume_fraction = sample_volume_fraction(&mut rng, config);
    let loads = sample_loads(&mut rng, domain, config);
    let bc_case = BcCase::ALL[rng.gen_range(0..4)];
    ProblemSpec {
        domain: *domain,
        volume_fraction,
        loads,
        bc_case,
        seed,
    }
}

/// Problems for seeds `base, base + 1, ...`.
pub fn sample_batch(base_seed: u64, count: usize, domain: &DesignDomain, config: &SamplerConfig) -> Vec<ProblemSpec> {
    (0..count as u64)
        .map(|i| sample_problem(base_seed.wrapping_add(i), domain, config))
        .collect()
}
