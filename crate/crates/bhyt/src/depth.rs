//! Depth-wise variance propagation: the δ amplification function, per-kind
//! normalized gains π, the product-form trajectory, the finite-depth
//! dominance check against LNS, and Monte-Carlo layer scans over freshly
//! initialized stacks.
//!
//! The recursion per sublayer is `s² → s²·δ(ρ, π)` with
//! `δ(ρ, π) = 1 + π + 2ρ√π`, and π is recomputed from the running s² at each
//! sublayer (the gain definitions divide by the current stream variance).

use crate::activation::Activation;
use crate::block::{
    block_forward, AttentionMode, BlockDims, BlockSettings, BlockWeights, InjectedVariance,
    NormHyper, Placement,
};
use crate::error::{BhytError, Result};
use crate::norm::MomentCounter;
use crate::numerics::RngStream;
use crate::stats::{mean_abs, mean_square, StatsSite};

/// Structural gain parameters of the analytic recursion.
#[derive(Debug, Clone, Copy)]
pub struct GainParams {
    /// `C_Attn = (1/(T·d))·‖W_V·W_O‖_F²`
    pub c_attn: f64,
    /// `C_MLP = (τ/d)·‖W₁·W₂‖_F²`
    pub c_mlp: f64,
    /// Mean squared learnable scale γ̄².
    pub gamma_bar2: f64,
    pub rho1: f64,
    pub rho2: f64,
    pub lambda_attn: f64,
    pub lambda_mlp: f64,
    pub kappa: f64,
}

impl GainParams {
    pub fn validate(&self) -> Result<()> {
        if self.c_attn < 0.0 || self.c_mlp < 0.0 || self.gamma_bar2 < 0.0 {
            return Err(BhytError::param(
                "GainParams",
                "variance-like fields must be ≥ 0".to_string(),
            ));
        }
        if self.rho1.abs() > 1.0 || self.rho2.abs() > 1.0 {
            return Err(BhytError::param(
                "GainParams",
                format!("|ρ| must be ≤ 1, got ({}, {})", self.rho1, self.rho2),
            ));
        }
        Ok(())
    }
}

/// Normalization families with closed-form gains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub enum TrajectoryKind {
    RmsNorm,
    Lns,
    Bhyt,
}

/// Which side of the BHyT two-sided bound to propagate. `Point` is exact for
/// RMSNorm/LNS and coincides with `Upper` for BHyT (the conservative curve).
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub enum BoundMode {
    Lower,
    Upper,
    Point,
}

/// Sublayer site inside one block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Site {
    Attn,
    Mlp,
}

/// Scalar amplification `δ(ρ, π) = 1 + π + 2ρ√π`.
pub fn amplification_delta(rho: f64, pi: f64) -> f64 {
    1.0 + pi + 2.0 * rho * pi.sqrt()
}

/// Normalized variance gain of one sublayer for the given kind and bound.
pub fn pi_gain(
    kind: TrajectoryKind,
    bound: BoundMode,
    params: &GainParams,
    s2_in: f64,
    layer_index: usize,
    site: Site,
) -> Result<f64> {
    params.validate()?;
    if !(s2_in > 0.0) {
        return Err(BhytError::param("pi_gain", format!("s² = {s2_in} must be > 0")));
    }
    if layer_index < 1 {
        return Err(BhytError::param("pi_gain", "layer index must be ≥ 1".to_string()));
    }
    let c = match site {
        Site::Attn => params.c_attn,
        Site::Mlp => params.c_mlp,
    };
    let base = c * params.gamma_bar2 / s2_in;
    match kind {
        TrajectoryKind::RmsNorm | TrajectoryKind::Lns => {
            if bound != BoundMode::Point {
                return Err(BhytError::param(
                    "pi_gain",
                    format!("{kind:?} has an exact gain; bound {bound:?} unsupported"),
                ));
            }
            Ok(if kind == TrajectoryKind::Lns {
                base / layer_index as f64
            } else {
                base
            })
        }
        TrajectoryKind::Bhyt => {
            let lambda = match site {
                Site::Attn => params.lambda_attn,
                Site::Mlp => params.lambda_mlp,
            };
            let upper = base * (lambda / params.kappa).powi(2);
            Ok(match bound {
                BoundMode::Upper | BoundMode::Point => upper,
                BoundMode::Lower => upper * (lambda.tanh() / lambda).powi(2),
            })
        }
    }
}

/// Per-layer variance pairs `(s²_xℓ, s²_x'ℓ)` for ℓ = 1..L, plus the stream
/// variance after the final block.
#[derive(Debug, Clone, serde::Serialize)]
pub struct VarianceTrajectory {
    pub kind: TrajectoryKind,
    pub bound: BoundMode,
    pub levels: Vec<(f64, f64)>,
    final_s2: f64,
}

impl VarianceTrajectory {
    /// Stream variance entering layer ℓ (1-based).
    pub fn s2_x(&self, layer: usize) -> f64 {
        self.levels[layer - 1].0
    }

    /// Stream variance after layer ℓ's attention residual.
    pub fn s2_x_prime(&self, layer: usize) -> f64 {
        self.levels[layer - 1].1
    }

    /// Stream variance after the last block's MLP residual.
    pub fn final_variance(&self) -> f64 {
        self.final_s2
    }
}

/// Generic product-form propagation with a caller-supplied gain function
/// `gain(layer, site, running_s²) -> π`.
pub fn propagate_with_gains(
    l: usize,
    rho1: f64,
    rho2: f64,
    s2_init: f64,
    kind: TrajectoryKind,
    bound: BoundMode,
    mut gain: impl FnMut(usize, Site, f64) -> Result<f64>,
) -> Result<VarianceTrajectory> {
    if l < 1 {
        return Err(BhytError::param("propagate_variance", "L must be ≥ 1".to_string()));
    }
    if !(s2_init > 0.0) {
        return Err(BhytError::param(
            "propagate_variance",
            format!("s²_init = {s2_init} must be > 0"),
        ));
    }
    let mut levels = Vec::with_capacity(l);
    let mut s2 = s2_init;
    for layer in 1..=l {
        let pi_a = gain(layer, Site::Attn, s2)?;
        let s2_prime = s2 * amplification_delta(rho1, pi_a);
        let pi_m = gain(layer, Site::Mlp, s2_prime)?;
        let s2_next = s2_prime * amplification_delta(rho2, pi_m);
        if !s2_prime.is_finite() || !s2_next.is_finite() {
            return Err(BhytError::NonFinite {
                site: format!("propagate_variance/layer{layer}"),
            });
        }
        levels.push((s2, s2_prime));
        s2 = s2_next;
    }
    Ok(VarianceTrajectory {
        kind,
        bound,
        levels,
        final_s2: s2,
    })
}

/// Closed-form propagation for one normalization family.
pub fn propagate_variance(
    l: usize,
    params: &GainParams,
    s2_init: f64,
    kind: TrajectoryKind,
    bound: BoundMode,
) -> Result<VarianceTrajectory> {
    params.validate()?;
    propagate_with_gains(l, params.rho1, params.rho2, s2_init, kind, bound, |layer, site, s2| {
        pi_gain(kind, bound, params, s2, layer, site)
    })
}

/// Theorem-2 style hyperparameter condition: `λ/κ < 1/√L` (strict).
pub fn finite_depth_bound_check(lambda: f64, kappa: f64, l: usize) -> bool {
    debug_assert!(l >= 1);
    lambda / kappa < 1.0 / (l as f64).sqrt()
}

/// Configuration of one Monte-Carlo depth scan.
#[derive(Debug, Clone, Copy)]
pub struct DepthScanConfig {
    pub l: usize,
    pub placement: Placement,
    pub dims: BlockDims,
    pub t: usize,
    pub attention: AttentionMode,
    pub activation: Activation,
    pub hyper: NormHyper,
    pub input_std: f64,
}

impl DepthScanConfig {
    pub fn new(l: usize, placement: Placement) -> Self {
        DepthScanConfig {
            l,
            placement,
            dims: BlockDims { d: 128, d_v: 128, d_m: 256 },
            t: 64,
            attention: AttentionMode::CausalSoftmax,
            activation: Activation::Tanh,
            hyper: NormHyper::default(),
            input_std: 1.0,
        }
    }
}

/// One (seed, layer, site) observation of a depth scan.
#[derive(Debug, Clone, serde::Serialize)]
pub struct LayerScanRecord {
    pub seed: u64,
    pub layer: usize,
    pub site: StatsSite,
    pub mean_abs: f64,
    pub variance: f64,
    pub injected_variance: Option<f64>,
    pub diverged: bool,
}

/// Scan output: per-layer statistics and the structural constants of each
/// seed's stack (raw, without the τ factor: `c_mlp = c_mlp_raw · τ`).
#[derive(Debug, Clone)]
pub struct DepthScanResult {
    pub records: Vec<LayerScanRecord>,
    /// Per seed, per layer: `(C_attn, ‖W₁W₂‖_F²/d)`.
    pub per_seed_gains: Vec<Vec<(f64, f64)>>,
    /// Measured mean-square of each seed's input tensor (analytic curves
    /// start from this value).
    pub per_seed_input_variance: Vec<f64>,
}

impl DepthScanResult {
    /// Final-layer residual-stream variance per seed (NaN-free; diverged
    /// seeds are skipped).
    pub fn final_layer_variances(&self, l: usize) -> Vec<f64> {
        self.records
            .iter()
            .filter(|r| r.layer == l && r.site == StatsSite::ResidualStream && !r.diverged)
            .map(|r| r.variance)
            .collect()
    }

    /// Residual-stream variance trajectory of one seed.
    pub fn seed_trajectory(&self, seed: u64) -> Vec<f64> {
        let mut rows: Vec<&LayerScanRecord> = self
            .records
            .iter()
            .filter(|r| r.seed == seed && r.site == StatsSite::ResidualStream && !r.diverged)
            .collect();
        rows.sort_by_key(|r| r.layer);
        rows.iter().map(|r| r.variance).collect()
    }
}

/// Push Gaussian inputs through `L` freshly initialized blocks per seed and
/// record per-layer magnitude and variance. Divergence is recorded per layer,
/// not fatal: the scan's purpose includes observing blow-up.
pub fn monte_carlo_depth_scan(cfg: &DepthScanConfig, seeds: &[u64]) -> Result<DepthScanResult> {
    if cfg.l < 2 {
        return Err(BhytError::param(
            "monte_carlo_depth_scan",
            "L must be ≥ 2".to_string(),
        ));
    }
    let settings = BlockSettings::new(cfg.placement)
        .with_attention(cfg.attention)
        .with_activation(cfg.activation);

    let mut records = Vec::new();
    let mut per_seed_gains = Vec::with_capacity(seeds.len());
    let mut per_seed_input_variance = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let mut rng = RngStream::new(seed);
        let mut blocks = Vec::with_capacity(cfg.l);
        for layer in 1..=cfg.l {
            blocks.push(BlockWeights::random_fan_in(
                cfg.dims,
                cfg.placement,
                layer,
                &cfg.hyper,
                &mut rng,
            )?);
        }
        let gains: Vec<(f64, f64)> = blocks
            .iter()
            .map(|b| {
                let c_attn = b.value_path_frobenius_sq().unwrap_or(f64::NAN)
                    / (cfg.t as f64 * cfg.dims.d as f64);
                let c_mlp_raw = crate::numerics::frobenius_norm_sq(
                    &crate::numerics::matmul(&b.w_1, &b.w_2).expect("mlp shapes"),
                )
                .unwrap_or(f64::NAN)
                    / cfg.dims.d as f64;
                (c_attn, c_mlp_raw)
            })
            .collect();
        per_seed_gains.push(gains);

        let mut x = crate::numerics::gaussian(&[cfg.t, cfg.dims.d], &mut rng, cfg.input_std)?;
        per_seed_input_variance.push(mean_square(&x));
        let mut diverged = false;
        for (layer, block) in blocks.iter().enumerate() {
            if diverged {
                records.push(LayerScanRecord {
                    seed,
                    layer: layer + 1,
                    site: StatsSite::ResidualStream,
                    mean_abs: f64::NAN,
                    variance: f64::NAN,
                    injected_variance: None,
                    diverged: true,
                });
                continue;
            }
            let mut counter = MomentCounter::new();
            match block_forward(block, &x, settings, InjectedVariance::FromWeights, &mut counter) {
                Ok((out, trace)) => {
                    for site in StatsSite::ALL {
                        let tensor = match site {
                            StatsSite::PostAttn => &trace.h_attn,
                            StatsSite::PostMlp => &trace.h_mlp,
                            StatsSite::ResidualStream => &trace.x_out,
                        };
                        let m_abs = mean_abs(tensor);
                        let m_sq = mean_square(tensor);
                        // A squared statistic can overflow even when the
                        // activations themselves stayed finite; that still
                        // counts as observed blow-up.
                        let blew_up = !m_abs.is_finite() || !m_sq.is_finite();
                        records.push(LayerScanRecord {
                            seed,
                            layer: layer + 1,
                            site,
                            mean_abs: m_abs,
                            variance: m_sq,
                            injected_variance: trace.injected_var,
                            diverged: blew_up,
                        });
                    }
                    x = out;
                }
                Err(BhytError::NonFinite { site }) => {
                    log::debug!("seed {seed}: diverged at layer {} ({site})", layer + 1);
                    diverged = true;
                    records.push(LayerScanRecord {
                        seed,
                        layer: layer + 1,
                        site: StatsSite::ResidualStream,
                        mean_abs: f64::NAN,
                        variance: f64::NAN,
                        injected_variance: None,
                        diverged: true,
                    });
                }
                Err(e) => return Err(e),
            }
        }
    }
    Ok(DepthScanResult {
        records,
        per_seed_gains,
        per_seed_input_variance,
    })
}

/// Median of a non-empty slice.
pub fn median(values: &[f64]) -> f64 {
    let mut v: Vec<f64> = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
