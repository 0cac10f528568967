//! Samplers for distribution-agnostic coverage checks.
//!
//! Each distribution is standardized (zero mean, unit variance) and then
//! shifted/scaled to match a requested `(μ, s)` pair, so the Chebyshev-style
//! coverage guarantee can be probed across distribution families.

use crate::error::{BhytError, Result};
use crate::norm::chebyshev_scale;
use crate::numerics::RngStream;
use rand_distr::{Distribution, StudentT};

/// Distribution families used by the coverage checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum MatchedDistribution {
    Normal,
    Laplace,
    Uniform,
    /// Student-t with ν = 5 (heavy tails, finite variance).
    StudentT5,
}

impl MatchedDistribution {
    pub const ALL: [MatchedDistribution; 4] = [
        MatchedDistribution::Normal,
        MatchedDistribution::Laplace,
        MatchedDistribution::Uniform,
        MatchedDistribution::StudentT5,
    ];

    /// One standardized draw (zero mean, unit variance).
    pub fn sample_standardized(&self, rng: &mut RngStream) -> f64 {
        match self {
            MatchedDistribution::Normal => rng.standard_normal(),
            MatchedDistribution::Laplace => {
                // Inverse CDF; b = 1/√2 gives unit variance (Var = 2b²).
                let b = std::f64::consts::FRAC_1_SQRT_2;
                let u = rng.uniform() - 0.5;
                let u = u.clamp(-0.499_999_999, 0.499_999_999);
                -b * u.signum() * (1.0 - 2.0 * u.abs()).ln()
            }
            MatchedDistribution::Uniform => {
                let half_width = 3.0f64.sqrt();
                rng.uniform_range(-half_width, half_width)
            }
            MatchedDistribution::StudentT5 => {
                let t = StudentT::new(5.0).expect("valid dof").sample(rng.inner());
                // Var(t_5) = 5/3; rescale to unit variance.
                t * (3.0f64 / 5.0).sqrt()
            }
        }
    }

    /// Draw matched to mean μ and standard deviation s.
    pub fn sample_matched(&self, mu: f64, s: f64, rng: &mut RngStream) -> f64 {
        mu + s * self.sample_standardized(rng)
    }
}

/// Empirical `P(|α·x| ≤ λ)` with `α = chebyshev_scale(μ, s, λ, p)` over
/// `samples` draws from the matched distribution.
pub fn chebyshev_coverage(
    dist: MatchedDistribution,
    mu: f64,
    s: f64,
    lambda: f64,
    p: f64,
    samples: usize,
    rng: &mut RngStream,
) -> Result<f64> {
    if samples == 0 {
        return Err(BhytError::param("chebyshev_coverage", "samples must be ≥ 1".to_string()));
    }
    let alpha = chebyshev_scale(mu, s, lambda, p)?;
    let mut hits = 0usize;
    for _ in 0..samples {
        let x = dist.sample_matched(mu, s, rng);
        if (alpha * x).abs() <= lambda {
            hits += 1;
        }
    }
    Ok(hits as f64 / samples as f64)
}
