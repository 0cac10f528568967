//! The normalization zoo: BHyT*, BHyT, RMSNorm, RMSNorm-Approx, LNS and DyT,
//! each with forward and analytic backward, plus the Chebyshev scaling
//! primitive that bounds tanh arguments.
//!
//! Conventions (fixed per kind, never mixed):
//!
//! * `BhytStar` uses centered per-row moments: `y = γ ⊙ tanh(λ/(κ·s_x + |μ_x|) · x)`.
//! * `Bhyt` uses the uncentered per-row second moment `s_x² = (1/d) Σ x_j²`
//!   when `variance_source == Exact`, or a broadcast scalar estimate when
//!   `Injected`: `y = γ ⊙ tanh(λ/(κ·√var) · x)`.
//! * `RmsNorm` divides by the root of the uncentered moment; `RmsNormApprox`
//!   substitutes an injected scalar for the per-row moment.
//! * `Lns` is RMSNorm followed by the depth-dependent scalar `1/√ℓ`.
//! * `DyT` is `y = γ ⊙ tanh(α_DyT · x)` with no statistics at all.
//!
//! A divide-guard `eps` is added inside every square root. Each forward that
//! computes an exact per-row moment bumps the caller's [`MomentCounter`]; that
//! counter is the instrumentation behind the per-block reduction accounting.

use crate::error::{BhytError, Result};
use crate::numerics::{rowwise_moments, Tensor};

/// Normalization strategy selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum NormKind {
    RmsNorm,
    RmsNormApprox,
    Lns,
    DyT,
    BhytStar,
    Bhyt,
}

/// Where the variance driving the scale comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum VarianceSource {
    /// Per-row moment computed from the input (one exact reduction).
    Exact,
    /// Scalar estimate supplied by the caller; never recomputed here.
    Injected,
}

/// Whether gradients flow through the scale statistic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum ScaleGrad {
    /// Differentiate through μ and s (exact-variance kinds only).
    Differentiate,
    /// Treat the scale as a constant. Injected variance always behaves this way.
    StopGradient,
}

/// Counts exact rowwise-moment reductions performed by normalization layers.
#[derive(Debug, Default, Clone, Copy)]
pub struct MomentCounter(pub u64);

impl MomentCounter {
    pub fn new() -> Self {
        MomentCounter(0)
    }

    fn bump(&mut self) {
        self.0 += 1;
    }

    pub fn get(&self) -> u64 {
        self.0
    }
}

/// Configuration and learnable parameters of one normalization site.
#[derive(Debug, Clone)]
pub struct NormConfig {
    pub kind: NormKind,
    /// Bound λ of the tanh argument (per-site: λ_Attn or λ_MLP).
    pub lambda: f64,
    /// Chebyshev multiplier κ = (1−p)^(−1/2); κ = 10 corresponds to p = 0.99.
    pub kappa: f64,
    /// Learnable per-feature scale γ, length d.
    pub gamma: Tensor,
    /// Learnable DyT scalar; unused by other kinds.
    pub alpha_dyt: f64,
    /// Layer index ℓ ≥ 1, used by LNS.
    pub layer_index: usize,
    /// Divide-guard added inside every square root.
    pub eps: f64,
    pub variance_source: VarianceSource,
    pub scale_grad: ScaleGrad,
}

pub const DEFAULT_EPS: f64 = 1e-8;
pub const DEFAULT_KAPPA: f64 = 10.0;

impl NormConfig {
    /// Fresh site with γ = 1 and the crate-wide defaults (κ = 10, eps = 1e-8).
    pub fn new(kind: NormKind, d: usize, lambda: f64) -> Result<Self> {
        let cfg = NormConfig {
            kind,
            lambda,
            kappa: DEFAULT_KAPPA,
            gamma: Tensor::filled(&[d], 1.0)?,
            alpha_dyt: 1.0,
            layer_index: 1,
            eps: DEFAULT_EPS,
            variance_source: match kind {
                NormKind::RmsNormApprox => VarianceSource::Injected,
                _ => VarianceSource::Exact,
            },
            scale_grad: ScaleGrad::Differentiate,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_layer_index(mut self, layer_index: usize) -> Self {
        self.layer_index = layer_index;
        self
    }

    pub fn with_alpha_dyt(mut self, alpha: f64) -> Self {
        self.alpha_dyt = alpha;
        self
    }

    pub fn with_variance_source(mut self, source: VarianceSource) -> Self {
        self.variance_source = source;
        self
    }

    pub fn with_scale_grad(mut self, mode: ScaleGrad) -> Self {
        self.scale_grad = mode;
        self
    }

    pub fn with_eps(mut self, eps: f64) -> Self {
        self.eps = eps;
        self
    }

    pub fn feature_dim(&self) -> usize {
        self.gamma.len()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0) {
            return Err(BhytError::param(
                "NormConfig",
                format!("lambda = {} must be > 0", self.lambda),
            ));
        }
        if !(self.kappa > 1.0) {
            return Err(BhytError::param(
                "NormConfig",
                format!("kappa = {} must be > 1", self.kappa),
            ));
        }
        if self.eps < 0.0 {
            return Err(BhytError::param("NormConfig", "eps must be ≥ 0".to_string()));
        }
        if self.kind == NormKind::Lns && self.layer_index < 1 {
            return Err(BhytError::param(
                "NormConfig",
                "LNS requires layer_index ≥ 1".to_string(),
            ));
        }
        if !self.alpha_dyt.is_finite() {
            return Err(BhytError::param(
                "NormConfig",
                "alpha_dyt must be finite".to_string(),
            ));
        }
        Ok(())
    }

    /// Whether a forward pass with this config performs an exact reduction.
    pub fn computes_exact_moment(&self) -> bool {
        match self.kind {
            NormKind::DyT | NormKind::RmsNormApprox => false,
            NormKind::Bhyt => self.variance_source == VarianceSource::Exact,
            NormKind::RmsNorm | NormKind::Lns | NormKind::BhytStar => true,
        }
    }
}

/// Input-scaling factor `α = λ/(κ·s + |μ|)` with `κ = (1−p)^(−1/2)`, so that
/// `P(|α·x| ≤ λ) ≥ p` for any finite-variance distribution with moments (μ, s).
pub fn chebyshev_scale(mu: f64, s: f64, lambda: f64, p: f64) -> Result<f64> {
    if s < 0.0 {
        return Err(BhytError::param("chebyshev_scale", format!("s = {s} < 0")));
    }
    if !(lambda > 0.0) {
        return Err(BhytError::param(
            "chebyshev_scale",
            format!("lambda = {lambda} must be > 0"),
        ));
    }
    if !(p > 0.0 && p < 1.0) {
        return Err(BhytError::param(
            "chebyshev_scale",
            format!("p = {p} must be in (0,1)"),
        ));
    }
    let kappa = (1.0 - p).powf(-0.5);
    let denom = kappa * s + mu.abs();
    if denom == 0.0 {
        return Err(BhytError::degenerate(
            "chebyshev_scale",
            "s = 0 and mu = 0; caller must add an eps guard",
        ));
    }
    Ok(lambda / denom)
}

/// Gradients produced by [`norm_backward`]; shapes mirror the parameters.
#[derive(Debug, Clone)]
pub struct NormGrads {
    pub d_input: Tensor,
    pub d_gamma: Tensor,
    /// Zero unless `kind == DyT`.
    pub d_alpha_dyt: f64,
}

/// Forward intermediates retained for the analytic backward pass.
#[derive(Debug, Clone)]
pub struct NormCache {
    x: Tensor,
    /// `y = γ ⊙ core`: tanh values for tanh kinds, normalized input for RMS kinds.
    core: Tensor,
    /// Per-row scale (α for tanh kinds, `inv_rms·c` for RMS kinds); length 1
    /// means a broadcast scalar.
    row_scale: Vec<f64>,
    /// Guarded second moment per row (`var + eps`), kind-specific convention.
    row_m2: Vec<f64>,
    /// Row means (BhytStar only).
    row_mu: Vec<f64>,
    /// Row denominators `κ·s + |μ|` (BhytStar only).
    row_denom: Vec<f64>,
    /// Exact uncentered per-row moments, exposed so a block can reuse the
    /// single reduction for its injected estimate.
    var_rows: Option<Tensor>,
}

impl NormCache {
    /// Exact per-row moments retained by an Exact-mode forward.
    pub fn exact_var_rows(&self) -> Option<&Tensor> {
        self.var_rows.as_ref()
    }

    /// Per-row scales (α for tanh kinds); length 1 means broadcast.
    pub fn row_scales(&self) -> &[f64] {
        &self.row_scale
    }
}

/// Dispatching forward for every kind. `var_in` is the injected scalar
/// estimate; Exact modes ignore it per the BHyT contract.
pub fn norm_forward(
    cfg: &NormConfig,
    x: &Tensor,
    var_in: Option<f64>,
    counter: &mut MomentCounter,
) -> Result<(Tensor, NormCache)> {
    cfg.validate()?;
    let (t, d) = x.dims2("norm_forward")?;
    if cfg.gamma.len() != d {
        return Err(BhytError::dim(
            "norm_forward",
            format!("gamma length {} vs feature dim {d}", cfg.gamma.len()),
        ));
    }
    match cfg.kind {
        NormKind::BhytStar => {
            if cfg.variance_source == VarianceSource::Injected {
                return Err(BhytError::param(
                    "norm_forward",
                    "BHyT* requires exact statistics".to_string(),
                ));
            }
            counter.bump();
            let (mu, var) = rowwise_moments(x, true)?;
            let mut alphas = Vec::with_capacity(t);
            let mut m2 = Vec::with_capacity(t);
            let mut denoms = Vec::with_capacity(t);
            for r in 0..t {
                let guarded = var.data()[r] + cfg.eps;
                let s = guarded.sqrt();
                let denom = cfg.kappa * s + mu.data()[r].abs();
                if denom == 0.0 {
                    return Err(BhytError::degenerate(
                        "bhyt_star_forward",
                        format!("all-zero row {r} with eps = 0"),
                    ));
                }
                alphas.push(cfg.lambda / denom);
                m2.push(guarded);
                denoms.push(denom);
            }
            tanh_forward(cfg, x, alphas, m2, mu.data().to_vec(), denoms, None)
        }
        NormKind::Bhyt => match cfg.variance_source {
            VarianceSource::Exact => {
                counter.bump();
                let (_, var) = rowwise_moments(x, false)?;
                let mut alphas = Vec::with_capacity(t);
                let mut m2 = Vec::with_capacity(t);
                for r in 0..t {
                    let guarded = var.data()[r] + cfg.eps;
                    let s = guarded.sqrt();
                    if s == 0.0 {
                        return Err(BhytError::degenerate(
                            "bhyt_forward",
                            format!("all-zero row {r} with eps = 0"),
                        ));
                    }
                    alphas.push(cfg.lambda / (cfg.kappa * s));
                    m2.push(guarded);
                }
                tanh_forward(cfg, x, alphas, m2, vec![], vec![], Some(var))
            }
            VarianceSource::Injected => {
                let v = injected_scalar(var_in, "bhyt_forward")?;
                let guarded = v + cfg.eps;
                let s = guarded.sqrt();
                if s == 0.0 {
                    return Err(BhytError::degenerate(
                        "bhyt_forward",
                        "injected variance 0 with eps = 0",
                    ));
                }
                let alpha = cfg.lambda / (cfg.kappa * s);
                tanh_forward(cfg, x, vec![alpha], vec![guarded], vec![], vec![], None)
            }
        },
        NormKind::RmsNorm | NormKind::Lns => {
            counter.bump();
            let scale_c = if cfg.kind == NormKind::Lns {
                1.0 / (cfg.layer_index as f64).sqrt()
            } else {
                1.0
            };
            let (_, var) = rowwise_moments(x, false)?;
            let mut inv = Vec::with_capacity(t);
            let mut m2 = Vec::with_capacity(t);
            for r in 0..t {
                let guarded = var.data()[r] + cfg.eps;
                if guarded == 0.0 {
                    return Err(BhytError::degenerate(
                        "rmsnorm_forward",
                        format!("all-zero row {r} with eps = 0"),
                    ));
                }
                inv.push(scale_c / guarded.sqrt());
                m2.push(guarded);
            }
            rms_forward_inner(cfg, x, inv, m2, Some(var))
        }
        NormKind::RmsNormApprox => {
            let v = injected_scalar(var_in, "rmsnorm_forward")?;
            let guarded = v + cfg.eps;
            if guarded == 0.0 {
                return Err(BhytError::degenerate(
                    "rmsnorm_forward",
                    "injected variance 0 with eps = 0",
                ));
            }
            let inv = 1.0 / guarded.sqrt();
            rms_forward_inner(cfg, x, vec![inv], vec![guarded], None)
        }
        NormKind::DyT => tanh_forward(cfg, x, vec![cfg.alpha_dyt], vec![], vec![], vec![], None),
    }
}

fn injected_scalar(var_in: Option<f64>, op: &'static str) -> Result<f64> {
    let v = var_in.ok_or_else(|| {
        BhytError::param(op, "Injected variance source requires a scalar estimate".to_string())
    })?;
    if v < 0.0 {
        return Err(BhytError::param(op, format!("injected variance {v} < 0")));
    }
    Ok(v)
}

fn tanh_forward(
    cfg: &NormConfig,
    x: &Tensor,
    row_scale: Vec<f64>,
    row_m2: Vec<f64>,
    row_mu: Vec<f64>,
    row_denom: Vec<f64>,
    var_rows: Option<Tensor>,
) -> Result<(Tensor, NormCache)> {
    let (t, d) = x.dims2("norm_forward")?;
    let gamma = cfg.gamma.data();
    let mut core = vec![0.0; t * d];
    let mut y = vec![0.0; t * d];
    for r in 0..t {
        let alpha = row_scale[if row_scale.len() == 1 { 0 } else { r }];
        for j in 0..d {
            let th = (alpha * x.data()[r * d + j]).tanh();
            core[r * d + j] = th;
            y[r * d + j] = gamma[j] * th;
        }
    }
    let core = Tensor::checked(vec![t, d], core, "norm_forward")?;
    let y = Tensor::checked(vec![t, d], y, "norm_forward")?;
    Ok((
        y,
        NormCache {
            x: x.clone(),
            core,
            row_scale,
            row_m2,
            row_mu,
            row_denom,
            var_rows,
        },
    ))
}

fn rms_forward_inner(
    cfg: &NormConfig,
    x: &Tensor,
    row_scale: Vec<f64>,
    row_m2: Vec<f64>,
    var_rows: Option<Tensor>,
) -> Result<(Tensor, NormCache)> {
    let (t, d) = x.dims2("norm_forward")?;
    let gamma = cfg.gamma.data();
    let mut core = vec![0.0; t * d];
    let mut y = vec![0.0; t * d];
    for r in 0..t {
        let inv = row_scale[if row_scale.len() == 1 { 0 } else { r }];
        for j in 0..d {
            let u = inv * x.data()[r * d + j];
            core[r * d + j] = u;
            y[r * d + j] = gamma[j] * u;
        }
    }
    let core = Tensor::checked(vec![t, d], core, "norm_forward")?;
    let y = Tensor::checked(vec![t, d], y, "norm_forward")?;
    Ok((
        y,
        NormCache {
            x: x.clone(),
            core,
            row_scale,
            row_m2,
            row_mu: vec![],
            row_denom: vec![],
            var_rows,
        },
    ))
}

/// Forward for BHyT* (centered statistics).
pub fn bhyt_star_forward(x: &Tensor, cfg: &NormConfig) -> Result<Tensor> {
    expect_kind(cfg, NormKind::BhytStar, "bhyt_star_forward")?;
    let mut c = MomentCounter::new();
    Ok(norm_forward(cfg, x, None, &mut c)?.0)
}

/// Forward for BHyT; `var_in` carries the injected scalar in Injected mode.
pub fn bhyt_forward(x: &Tensor, cfg: &NormConfig, var_in: Option<f64>) -> Result<Tensor> {
    expect_kind(cfg, NormKind::Bhyt, "bhyt_forward")?;
    let mut c = MomentCounter::new();
    Ok(norm_forward(cfg, x, var_in, &mut c)?.0)
}

/// Forward for RMSNorm (`RmsNorm` kind) or RMSNorm-Approx (`RmsNormApprox`).
pub fn rmsnorm_forward(x: &Tensor, cfg: &NormConfig, var_in: Option<f64>) -> Result<Tensor> {
    if cfg.kind != NormKind::RmsNorm && cfg.kind != NormKind::RmsNormApprox {
        return Err(BhytError::param(
            "rmsnorm_forward",
            format!("wrong kind {:?}", cfg.kind),
        ));
    }
    let mut c = MomentCounter::new();
    Ok(norm_forward(cfg, x, var_in, &mut c)?.0)
}

/// Forward for LNS: RMSNorm followed by the `1/√ℓ` depth scalar.
pub fn lns_forward(x: &Tensor, cfg: &NormConfig) -> Result<Tensor> {
    expect_kind(cfg, NormKind::Lns, "lns_forward")?;
    let mut c = MomentCounter::new();
    Ok(norm_forward(cfg, x, None, &mut c)?.0)
}

/// Forward for DyT: `γ ⊙ tanh(α_DyT · x)`.
pub fn dyt_forward(x: &Tensor, cfg: &NormConfig) -> Result<Tensor> {
    expect_kind(cfg, NormKind::DyT, "dyt_forward")?;
    let mut c = MomentCounter::new();
    Ok(norm_forward(cfg, x, None, &mut c)?.0)
}

fn expect_kind(cfg: &NormConfig, kind: NormKind, op: &'static str) -> Result<()> {
    if cfg.kind != kind {
        return Err(BhytError::param(
            op,
            format!("expected kind {kind:?}, got {:?}", cfg.kind),
        ));
    }
    Ok(())
}

/// Analytic backward pass.
///
/// With `scale_grad == StopGradient` the scale (and any statistic inside it)
/// is a constant, so for tanh kinds `d_input = γ·α·(1−tanh²(αx))·grad_out`.
/// With `Differentiate`, gradients also flow through μ and s. Injected
/// variance is always treated as a constant.
pub fn norm_backward(cfg: &NormConfig, cache: &NormCache, grad_out: &Tensor) -> Result<NormGrads> {
    let (t, d) = cache.x.dims2("norm_backward")?;
    if grad_out.shape() != cache.x.shape() {
        return Err(BhytError::dim(
            "norm_backward",
            format!(
                "grad shape {:?} vs input {:?}",
                grad_out.shape(),
                cache.x.shape()
            ),
        ));
    }
    let gamma = cfg.gamma.data();
    let g = grad_out.data();
    let x = cache.x.data();
    let core = cache.core.data();

    let mut d_input = vec![0.0; t * d];
    let mut d_gamma = vec![0.0; d];
    let mut d_alpha_dyt = 0.0;

    // d_gamma is the same for every kind: y = γ ⊙ core.
    for r in 0..t {
        for j in 0..d {
            d_gamma[j] += core[r * d + j] * g[r * d + j];
        }
    }

    let scale_at = |r: usize| cache.row_scale[if cache.row_scale.len() == 1 { 0 } else { r }];
    let differentiate = cfg.scale_grad == ScaleGrad::Differentiate
        && cfg.variance_source == VarianceSource::Exact
        && cfg.kind != NormKind::DyT
        && cfg.kind != NormKind::RmsNormApprox;

    match cfg.kind {
        NormKind::DyT => {
            let alpha = cfg.alpha_dyt;
            for r in 0..t {
                for j in 0..d {
                    let i = r * d + j;
                    let h = gamma[j] * (1.0 - core[i] * core[i]) * g[i];
                    d_input[i] = alpha * h;
                    d_alpha_dyt += x[i] * h;
                }
            }
        }
        NormKind::Bhyt | NormKind::BhytStar => {
            for r in 0..t {
                let alpha = scale_at(r);
                // h = ∂loss/∂(α·x) per element: γ·(1−tanh²)·g
                let mut dot_hx = 0.0;
                for j in 0..d {
                    let i = r * d + j;
                    let h = gamma[j] * (1.0 - core[i] * core[i]) * g[i];
                    d_input[i] = alpha * h;
                    dot_hx += h * x[i];
                }
                if differentiate {
                    if cfg.kind == NormKind::Bhyt {
                        // α = λ/(κ√(m2+eps)) ⇒ ∂α/∂x_j = −α·x_j/(d·(m2+eps))
                        let m2 = cache.row_m2[r];
                        let coef = -alpha * dot_hx / (d as f64 * m2);
                        for j in 0..d {
                            d_input[r * d + j] += coef * x[r * d + j];
                        }
                    } else {
                        // α = λ/D, D = κ·s + |μ| with centered s:
                        // ∂D/∂x_j = κ(x_j−μ)/(d·s) + sign(μ)/d
                        let denom = cache.row_denom[r];
                        let s = cache.row_m2[r].sqrt();
                        let mu = cache.row_mu[r];
                        let sign_mu = if mu > 0.0 {
                            1.0
                        } else if mu < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        let coef = -alpha / denom * dot_hx / d as f64;
                        for j in 0..d {
                            let dd = cfg.kappa * (x[r * d + j] - mu) / s + sign_mu;
                            d_input[r * d + j] += coef * dd;
                        }
                    }
                }
            }
        }
        NormKind::RmsNorm | NormKind::Lns | NormKind::RmsNormApprox => {
            for r in 0..t {
                let inv = scale_at(r); // includes the LNS 1/√ℓ factor
                let mut dot_wx = 0.0;
                for j in 0..d {
                    let i = r * d + j;
                    let w = gamma[j] * g[i];
                    d_input[i] = inv * w;
                    dot_wx += w * x[i];
                }
                if differentiate {
                    // inv = c/√(m2+eps) ⇒ ∂inv/∂x_j = −inv·x_j/(d·(m2+eps))
                    let m2 = cache.row_m2[r];
                    let coef = -inv * dot_wx / (d as f64 * m2);
                    for j in 0..d {
                        d_input[r * d + j] += coef * x[r * d + j];
                    }
                }
            }
        }
    }

    Ok(NormGrads {
        d_input: Tensor::checked(vec![t, d], d_input, "norm_backward")?,
        d_gamma: Tensor::checked(vec![d], d_gamma, "norm_backward")?,
        d_alpha_dyt,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{gaussian, RngStream};

    fn cfg(kind: NormKind, d: usize, lambda: f64) -> NormConfig {
        NormConfig::new(kind, d, lambda).unwrap()
    }

    #[test]
    fn chebyshev_paper_remark() {
        // p = 0.99 ⇒ κ = 10; μ = 0, s = 1, λ = 1 ⇒ α = 0.1
        let alpha = chebyshev_scale(0.0, 1.0, 1.0, 0.99).unwrap();
        assert!((alpha - 0.1).abs() < 1e-15);
    }

    #[test]
    fn chebyshev_zero_variance() {
        let alpha = chebyshev_scale(2.0, 0.0, 1.0, 0.99).unwrap();
        assert!((alpha - 0.5).abs() < 1e-15);
    }

    #[test]
    fn chebyshev_closed_form() {
        // p = 0.96 ⇒ κ = 5; α = 2/(5·2 + 1) = 2/11
        let alpha = chebyshev_scale(1.0, 2.0, 2.0, 0.96).unwrap();
        assert!((alpha - 2.0 / 11.0).abs() < 1e-15);
    }

    #[test]
    fn chebyshev_degenerate_errors() {
        assert!(chebyshev_scale(0.0, 0.0, 1.0, 0.99).is_err());
    }

    #[test]
    fn bhyt_star_zero_row_with_eps_is_zero() {
        let c = cfg(NormKind::BhytStar, 3, 1.0);
        let x = Tensor::zeros(&[1, 3]).unwrap();
        let y = bhyt_star_forward(&x, &c).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bhyt_star_zero_row_without_eps_errors() {
        let c = cfg(NormKind::BhytStar, 3, 1.0).with_eps(0.0);
        let x = Tensor::zeros(&[1, 3]).unwrap();
        assert!(bhyt_star_forward(&x, &c).is_err());
    }

    #[test]
    fn bhyt_star_hand_evaluated() {
        // x = (1, −1): μ = 0, s = 1 centered, α = λ/(κ·1) = 0.1
        let c = cfg(NormKind::BhytStar, 2, 1.0).with_eps(0.0);
        let x = Tensor::from_rows(&[&[1.0, -1.0]]).unwrap();
        let y = bhyt_star_forward(&x, &c).unwrap();
        let expect = 0.1f64.tanh();
        assert!((y.data()[0] - expect).abs() < 1e-15);
        assert!((y.data()[1] + expect).abs() < 1e-15);
    }

    #[test]
    fn bhyt_star_argument_scale_invariance() {
        // α ∝ 1/(κs+|μ|) cancels a positive rescaling of x, so the tanh
        // argument (hence the output) is unchanged. eps = 0 keeps it exact.
        let c = cfg(NormKind::BhytStar, 4, 1.5).with_eps(0.0);
        let x = Tensor::from_rows(&[&[0.3, -1.2, 0.8, 2.0]]).unwrap();
        let xc = x.scale(37.5).unwrap();
        let y = bhyt_star_forward(&x, &c).unwrap();
        let yc = bhyt_star_forward(&xc, &c).unwrap();
        for (a, b) in y.data().iter().zip(yc.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn bhyt_exact_matches_scaled_tanh() {
        // Row with uncentered moment 1 and λ = 2, κ = 10 ⇒ z = tanh(0.2·x).
        let c = cfg(NormKind::Bhyt, 2, 2.0).with_eps(0.0);
        let x = Tensor::from_rows(&[&[1.0, -1.0]]).unwrap();
        let y = bhyt_forward(&x, &c, None).unwrap();
        assert!((y.data()[0] - 0.2f64.tanh()).abs() < 1e-15);
        assert!((y.data()[1] + 0.2f64.tanh()).abs() < 1e-15);
    }

    #[test]
    fn bhyt_injected_saturates_toward_gamma() {
        let c = cfg(NormKind::Bhyt, 2, 1.0)
            .with_variance_source(VarianceSource::Injected)
            .with_eps(1e-12);
        let x = Tensor::from_rows(&[&[50.0, -50.0]]).unwrap();
        let y = bhyt_forward(&x, &c, Some(0.0)).unwrap();
        assert!((y.data()[0] - 1.0).abs() < 1e-9);
        assert!((y.data()[1] + 1.0).abs() < 1e-9);
    }

    #[test]
    fn bhyt_injected_rejects_negative_variance() {
        let c = cfg(NormKind::Bhyt, 2, 1.0).with_variance_source(VarianceSource::Injected);
        let x = Tensor::from_rows(&[&[1.0, 2.0]]).unwrap();
        assert!(bhyt_forward(&x, &c, Some(-1.0)).is_err());
    }

    #[test]
    fn bhyt_exact_equals_injected_with_true_moment() {
        let exact = cfg(NormKind::Bhyt, 3, 1.0).with_eps(0.0);
        let injected = exact.clone().with_variance_source(VarianceSource::Injected);
        let x = Tensor::from_rows(&[&[0.5, -1.5, 2.0]]).unwrap();
        let m2 = (0.25 + 2.25 + 4.0) / 3.0;
        let a = bhyt_forward(&x, &exact, None).unwrap();
        let b = bhyt_forward(&x, &injected, Some(m2)).unwrap();
        for (p, q) in a.data().iter().zip(b.data()) {
            assert!((p - q).abs() < 1e-15);
        }
    }

    #[test]
    fn rmsnorm_closed_form() {
        let c = cfg(NormKind::RmsNorm, 2, 1.0).with_eps(0.0);
        let x = Tensor::from_rows(&[&[2.0, -2.0]]).unwrap();
        let y = rmsnorm_forward(&x, &c, None).unwrap();
        assert_eq!(y.data(), &[1.0, -1.0]);
    }

    #[test]
    fn rmsnorm_zero_row_with_eps() {
        let c = cfg(NormKind::RmsNorm, 2, 1.0).with_eps(1e-6);
        let x = Tensor::zeros(&[1, 2]).unwrap();
        let y = rmsnorm_forward(&x, &c, None).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0]);
    }

    #[test]
    fn rmsnorm_approx_matches_exact_with_true_moment() {
        let exact = cfg(NormKind::RmsNorm, 3, 1.0).with_eps(0.0);
        let approx = NormConfig {
            kind: NormKind::RmsNormApprox,
            variance_source: VarianceSource::Injected,
            ..exact.clone()
        };
        let x = Tensor::from_rows(&[&[1.0, 2.0, -2.0]]).unwrap();
        let m2 = (1.0 + 4.0 + 4.0) / 3.0;
        let a = rmsnorm_forward(&x, &exact, None).unwrap();
        let b = rmsnorm_forward(&x, &approx, Some(m2)).unwrap();
        for (p, q) in a.data().iter().zip(b.data()) {
            assert!((p - q).abs() < 1e-15);
        }
    }

    #[test]
    fn lns_layer_one_equals_rmsnorm() {
        let rms = cfg(NormKind::RmsNorm, 3, 1.0);
        let lns = cfg(NormKind::Lns, 3, 1.0).with_layer_index(1);
        let x = Tensor::from_rows(&[&[1.0, -0.5, 2.5]]).unwrap();
        let a = rmsnorm_forward(&x, &rms, None).unwrap();
        let b = lns_forward(&x, &lns).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn lns_closed_form_and_scalar_factor() {
        let lns4 = cfg(NormKind::Lns, 2, 1.0).with_layer_index(4).with_eps(0.0);
        let x = Tensor::from_rows(&[&[2.0, -2.0]]).unwrap();
        let y = lns_forward(&x, &lns4).unwrap();
        assert_eq!(y.data(), &[0.5, -0.5]);

        let lns100 = cfg(NormKind::Lns, 2, 1.0).with_layer_index(100).with_eps(0.0);
        let rms = cfg(NormKind::RmsNorm, 2, 1.0).with_eps(0.0);
        let y100 = lns_forward(&x, &lns100).unwrap();
        let yr = rmsnorm_forward(&x, &rms, None).unwrap();
        for (a, b) in y100.data().iter().zip(yr.data()) {
            assert!((a - b * 0.1).abs() < 1e-15);
        }
    }

    #[test]
    fn dyt_zero_alpha_zeroes_output() {
        let c = cfg(NormKind::DyT, 3, 1.0).with_alpha_dyt(0.0);
        let x = Tensor::from_rows(&[&[5.0, -3.0, 0.1]]).unwrap();
        let y = dyt_forward(&x, &c).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dyt_scalar_evaluation() {
        let mut c = cfg(NormKind::DyT, 1, 1.0).with_alpha_dyt(1.0);
        c.gamma = Tensor::new(vec![1], vec![2.0]).unwrap();
        let x = Tensor::from_rows(&[&[1.0]]).unwrap();
        let y = dyt_forward(&x, &c).unwrap();
        let oracle = 2.0 * 1.0f64.tanh(); // scalar evaluation oracle
        assert!((y.data()[0] - oracle).abs() < 1e-15);
        assert!((y.data()[0] - 1.5232).abs() < 1e-4);
    }

    #[test]
    fn dyt_backward_at_zero_input() {
        // tanh′(0) = 1, so d_input = γ·α·grad_out at x = 0.
        let c = cfg(NormKind::DyT, 2, 1.0).with_alpha_dyt(0.7);
        let x = Tensor::zeros(&[1, 2]).unwrap();
        let mut counter = MomentCounter::new();
        let (_, cache) = norm_forward(&c, &x, None, &mut counter).unwrap();
        let g = Tensor::from_rows(&[&[1.0, -2.0]]).unwrap();
        let grads = norm_backward(&c, &cache, &g).unwrap();
        assert!((grads.d_input.data()[0] - 0.7).abs() < 1e-15);
        assert!((grads.d_input.data()[1] + 1.4).abs() < 1e-15);
    }

    #[test]
    fn zero_grad_out_gives_zero_grads() {
        for kind in [
            NormKind::RmsNorm,
            NormKind::Lns,
            NormKind::DyT,
            NormKind::BhytStar,
            NormKind::Bhyt,
        ] {
            let c = cfg(kind, 3, 1.0);
            let x = Tensor::from_rows(&[&[1.0, -2.0, 0.5]]).unwrap();
            let mut counter = MomentCounter::new();
            let (_, cache) = norm_forward(&c, &x, None, &mut counter).unwrap();
            let g = Tensor::zeros(&[1, 3]).unwrap();
            let grads = norm_backward(&c, &cache, &g).unwrap();
            assert!(grads.d_input.data().iter().all(|&v| v == 0.0));
            assert!(grads.d_gamma.data().iter().all(|&v| v == 0.0));
            assert_eq!(grads.d_alpha_dyt, 0.0);
        }
    }

    #[test]
    fn moment_counter_accounting_per_kind() {
        let x = Tensor::from_rows(&[&[1.0, 2.0], &[0.5, -1.0]]).unwrap();
        let cases = [
            (cfg(NormKind::RmsNorm, 2, 1.0), None, 1),
            (cfg(NormKind::RmsNormApprox, 2, 1.0), Some(1.0), 0),
            (cfg(NormKind::Lns, 2, 1.0), None, 1),
            (cfg(NormKind::DyT, 2, 1.0), None, 0),
            (cfg(NormKind::BhytStar, 2, 1.0), None, 1),
            (cfg(NormKind::Bhyt, 2, 1.0), None, 1),
            (
                cfg(NormKind::Bhyt, 2, 1.0).with_variance_source(VarianceSource::Injected),
                Some(1.0),
                0,
            ),
        ];
        for (c, var_in, expect) in cases {
            let mut counter = MomentCounter::new();
            norm_forward(&c, &x, var_in, &mut counter).unwrap();
            assert_eq!(counter.get(), expect, "kind {:?}", c.kind);
        }
    }

    #[test]
    fn boundedness_of_tanh_family() {
        let mut rng = RngStream::new(3);
        for kind in [NormKind::DyT, NormKind::BhytStar, NormKind::Bhyt] {
            let mut c = cfg(kind, 8, 2.0).with_alpha_dyt(1.3);
            c.gamma = gaussian(&[8], &mut rng, 1.5).unwrap();
            for _ in 0..20 {
                let x = gaussian(&[4, 8], &mut rng, 50.0).unwrap();
                let mut counter = MomentCounter::new();
                let (y, _) = norm_forward(&c, &x, None, &mut counter).unwrap();
                for r in 0..4 {
                    for j in 0..8 {
                        assert!(
                            y.data()[r * 8 + j].abs() <= c.gamma.data()[j].abs() + 1e-12,
                            "kind {kind:?} exceeded |gamma|"
                        );
                    }
                }
            }
        }
    }
}
