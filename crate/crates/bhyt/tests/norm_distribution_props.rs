//! Distribution-level properties of the bounded-tanh scaling: Chebyshev
//! coverage across families and the two-sided tanh variance bracket.

use bhyt::norm::chebyshev_scale;
use bhyt::numerics::RngStream;
use bhyt::sampling::{chebyshev_coverage, MatchedDistribution};

#[test]
fn coverage_holds_across_families_and_moment_pairs() {
    let mut rng = RngStream::new(41);
    for dist in MatchedDistribution::ALL {
        for (mu, s) in [(0.0, 1.0), (2.0, 0.5), (-1.0, 3.0)] {
            let cov = chebyshev_coverage(dist, mu, s, 2.0, 0.99, 100_000, &mut rng).unwrap();
            assert!(
                cov >= 0.99,
                "{dist:?} at (μ={mu}, s={s}): coverage {cov:.5} < 0.99"
            );
        }
    }
}

/// Monte-Carlo estimate of Var(tanh(αx)) for symmetric zero-mean x with
/// variance s², α = λ/(κs), conditioned on |αx| ≤ λ. Returns the estimate and
/// its standard error (moment-based).
fn tanh_variance_mc(lambda: f64, kappa: f64, s: f64, n: usize, rng: &mut RngStream) -> (f64, f64) {
    let alpha = lambda / (kappa * s);
    let mut vals = Vec::with_capacity(n);
    while vals.len() < n {
        let x = s * rng.standard_normal();
        if (alpha * x).abs() <= lambda {
            vals.push((alpha * x).tanh());
        }
    }
    let nf = n as f64;
    let mean = vals.iter().sum::<f64>() / nf;
    let m2 = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / nf;
    let m4 = vals
        .iter()
        .map(|v| {
            let c = (v - mean) * (v - mean);
            c * c
        })
        .sum::<f64>()
        / nf;
    let se = ((m4 - m2 * m2).max(0.0) / nf).sqrt();
    (m2, se)
}

#[test]
fn tanh_variance_within_two_sided_bracket() {
    let kappa = 10.0;
    let mut rng = RngStream::new(97);
    for lambda in [1.0, 2.0] {
        for s in [0.5, 1.0, 4.0] {
            let (var, se) = tanh_variance_mc(lambda, kappa, s, 200_000, &mut rng);
            let upper = lambda * lambda / (kappa * kappa);
            let lower = (lambda.tanh() / lambda).powi(2) * upper;
            assert!(
                var >= lower - 3.0 * se && var <= upper + 3.0 * se,
                "λ={lambda}, s={s}: Var {var:.6e} outside [{lower:.6e}, {upper:.6e}] ± 3·{se:.2e}"
            );
        }
    }
}

#[test]
fn alpha_is_scale_free_for_zero_mean() {
    // α·s is constant in s when μ = 0, so the bracket cannot depend on s.
    let a1 = chebyshev_scale(0.0, 1.0, 1.0, 0.99).unwrap();
    let a2 = chebyshev_scale(0.0, 2.0, 1.0, 0.99).unwrap();
    assert!((a1 * 1.0 - a2 * 2.0).abs() < 1e-15);
}
