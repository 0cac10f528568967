//! Closed-form variance estimates from weight snapshots.
//!
//! The attention estimate `s̃² = (1/(T·d))·‖W_V·W_O‖_F²·λ²/κ²` and the MLP
//! estimate `s̃² = τ·(s_z²/d)·‖W₁·W₂‖_F²` depend only on model weights and
//! hyperparameters — never on activations — so they can be computed on a
//! parallel path from a consistent weight snapshot and cached between
//! refreshes. The residual rule `s̃²_{x'} = s²_x + s̃²_{h}` composes them with
//! the one exact moment taken at the block entrance.

use crate::activation::Activation;
use crate::block::{
    block_forward, AttentionMode, BlockDims, BlockSettings, BlockWeights, InjectedVariance,
    NormHyper, Placement,
};
use crate::error::{BhytError, Result};
use crate::norm::MomentCounter;
use crate::numerics::{frobenius_norm_sq, matmul, RngStream, Tensor};
use crate::stats::{agreement, mean_square, AgreementMetrics};

/// Provenance of a variance value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub enum EstimateSource {
    AttnClosedForm,
    MlpClosedForm,
    ResidualSum,
    ExactMeasured,
}

/// A cached closed-form variance together with the weight-snapshot step it
/// was computed from.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct VarianceEstimate {
    pub value: f64,
    pub computed_at_step: u64,
    pub source: EstimateSource,
}

impl VarianceEstimate {
    pub fn new(value: f64, computed_at_step: u64, source: EstimateSource) -> Result<Self> {
        if !(value >= 0.0) {
            return Err(BhytError::param(
                "VarianceEstimate",
                format!("value {value} must be ≥ 0"),
            ));
        }
        Ok(VarianceEstimate {
            value,
            computed_at_step,
            source,
        })
    }
}

/// Recompute cadence for cached estimates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct RefreshPolicy {
    pub interval_steps: u64,
}

impl RefreshPolicy {
    pub fn new(interval_steps: u64) -> Result<Self> {
        if interval_steps == 0 {
            return Err(BhytError::param(
                "RefreshPolicy",
                "interval_steps must be ≥ 1".to_string(),
            ));
        }
        Ok(RefreshPolicy { interval_steps })
    }

    pub fn fires_at(&self, step: u64) -> bool {
        step % self.interval_steps == 0
    }
}

pub const DEFAULT_REFRESH_INTERVAL: u64 = 100;

/// Average coordinate-wise variance of the attention output under uniform
/// attention and zero-mean Gaussian weights:
/// `s̃² = (1/(T·d))·‖W_V·W_O‖_F²·(λ_attn/κ)²`.
pub fn attn_output_variance(
    w_v: &Tensor,
    w_o: &Tensor,
    t: usize,
    d: usize,
    lambda_attn: f64,
    kappa: f64,
) -> Result<VarianceEstimate> {
    let (dv_in, dv) = w_v.dims2("attn_output_variance")?;
    let (do_in, do_out) = w_o.dims2("attn_output_variance")?;
    if dv != do_in {
        return Err(BhytError::dim(
            "attn_output_variance",
            format!("W_V is {dv_in}x{dv} but W_O is {do_in}x{do_out}"),
        ));
    }
    if dv_in != d || do_out != d {
        return Err(BhytError::dim(
            "attn_output_variance",
            format!("weights map {dv_in}→{do_out}, expected d = {d}"),
        ));
    }
    if t < 1 || d < 1 {
        return Err(BhytError::param(
            "attn_output_variance",
            format!("T = {t}, d = {d} must be ≥ 1"),
        ));
    }
    let frob = frobenius_norm_sq(&matmul(w_v, w_o)?)?;
    let value = frob / (t as f64 * d as f64) * (lambda_attn / kappa).powi(2);
    VarianceEstimate::new(value, 0, EstimateSource::AttnClosedForm)
}

/// Same closed form, but from a precomputed `‖W_V·W_O‖_F²` snapshot. This is
/// what the cached runtime path evaluates once the Frobenius term is frozen.
pub fn attn_output_variance_from_frob(
    frob_sq: f64,
    t: usize,
    d: usize,
    lambda_attn: f64,
    kappa: f64,
) -> f64 {
    frob_sq / (t as f64 * d as f64) * (lambda_attn / kappa).powi(2)
}

/// MLP output variance: `s̃² = τ·(s_z²/d)·‖W₁·W₂‖_F²`.
pub fn mlp_output_variance(
    w_1: &Tensor,
    w_2: &Tensor,
    tau: f64,
    s_z2: f64,
    d: usize,
) -> Result<VarianceEstimate> {
    if tau < 0.0 || s_z2 < 0.0 {
        return Err(BhytError::param(
            "mlp_output_variance",
            format!("tau = {tau} and s_z² = {s_z2} must be ≥ 0"),
        ));
    }
    let (d1, dm) = w_1.dims2("mlp_output_variance")?;
    let (dm2, d2) = w_2.dims2("mlp_output_variance")?;
    if dm != dm2 || d1 != d || d2 != d {
        return Err(BhytError::dim(
            "mlp_output_variance",
            format!("W₁ {d1}x{dm}, W₂ {dm2}x{d2} inconsistent with d = {d}"),
        ));
    }
    let frob = frobenius_norm_sq(&matmul(w_1, w_2)?)?;
    let value = tau * s_z2 / d as f64 * frob;
    VarianceEstimate::new(value, 0, EstimateSource::MlpClosedForm)
}

/// Residual sum rule `s̃²_{x'} = s²_x + s̃²_{h}`. The cross-covariance term is
/// deliberately dropped; the runtime rule is the ρ = 0 case.
pub fn residual_variance_sum(s_x2: f64, s_h2: f64) -> Result<VarianceEstimate> {
    if s_x2 < 0.0 || s_h2 < 0.0 {
        return Err(BhytError::param(
            "residual_variance_sum",
            format!("s_x² = {s_x2}, s_h² = {s_h2} must be ≥ 0"),
        ));
    }
    VarianceEstimate::new(s_x2 + s_h2, 0, EstimateSource::ResidualSum)
}

/// Estimate the activation's variance scaling factor
/// `τ = Var(φ(u))/Var(u)` on Gaussian `u ~ N(0, s_u²)`.
pub fn calibrate_tau(
    activation: &str,
    s_u2: f64,
    samples: usize,
    rng: &mut RngStream,
) -> Result<f64> {
    let act = Activation::parse(activation)?;
    if samples < 1_000 {
        return Err(BhytError::param(
            "calibrate_tau",
            format!("samples = {samples} must be ≥ 1000"),
        ));
    }
    if s_u2 < 0.0 {
        return Err(BhytError::param("calibrate_tau", format!("s_u² = {s_u2} < 0")));
    }
    let s = s_u2.sqrt();
    let mut sum_u = 0.0;
    let mut sum_u2 = 0.0;
    let mut sum_v = 0.0;
    let mut sum_v2 = 0.0;
    for _ in 0..samples {
        let u = s * rng.standard_normal();
        let v = act.apply(u);
        sum_u += u;
        sum_u2 += u * u;
        sum_v += v;
        sum_v2 += v * v;
    }
    let n = samples as f64;
    let var_u = sum_u2 / n - (sum_u / n).powi(2);
    let var_v = sum_v2 / n - (sum_v / n).powi(2);
    if var_u == 0.0 {
        return Err(BhytError::degenerate("calibrate_tau", "zero input variance"));
    }
    Ok(var_v / var_u)
}

/// Return a fresh estimate iff the policy fires at `step`; otherwise the
/// cached value comes back bit-identical.
pub fn maybe_refresh(
    estimate: &VarianceEstimate,
    step: u64,
    policy: RefreshPolicy,
    recompute: impl FnOnce() -> Result<VarianceEstimate>,
) -> Result<VarianceEstimate> {
    if step < estimate.computed_at_step {
        return Err(BhytError::State {
            op: "maybe_refresh",
            detail: format!(
                "step {step} precedes cached snapshot step {}",
                estimate.computed_at_step
            ),
        });
    }
    if policy.fires_at(step) {
        let fresh = recompute()?;
        Ok(VarianceEstimate {
            computed_at_step: step,
            ..fresh
        })
    } else {
        Ok(*estimate)
    }
}

/// Configuration of an injected-vs-exact variance accuracy scan over a
/// freshly initialized BHyT stack.
#[derive(Debug, Clone, Copy)]
pub struct VarAccuracyConfig {
    pub l: usize,
    pub dims: BlockDims,
    pub t: usize,
    pub n_inputs: usize,
    /// Input std drawn log-uniformly from this range per input, mimicking the
    /// scale variation of real corpus activations.
    pub input_std_range: (f64, f64),
    pub hyper: NormHyper,
    pub attention: AttentionMode,
    pub activation: Activation,
    /// Zero the value/output and second MLP matrices, making each block the
    /// identity map. The closed form is then exact: injected == measured.
    pub value_paths_zeroed: bool,
}

impl VarAccuracyConfig {
    pub fn new(l: usize, d: usize, t: usize, n_inputs: usize) -> Self {
        VarAccuracyConfig {
            l,
            dims: BlockDims { d, d_v: d, d_m: 2 * d },
            t,
            n_inputs,
            input_std_range: (0.5, 2.0),
            hyper: NormHyper::default(),
            attention: AttentionMode::CausalSoftmax,
            activation: Activation::Tanh,
            value_paths_zeroed: false,
        }
    }
}

/// One scatter point: the injected estimate at the MLP-norm site of `layer`
/// against the exactly measured moment of the same tensor.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct VarAccuracyPoint {
    pub layer: usize,
    pub input_idx: usize,
    pub injected: f64,
    pub exact: f64,
}

#[derive(Debug, Clone)]
pub struct VarAccuracyResult {
    pub points: Vec<VarAccuracyPoint>,
    pub metrics: AgreementMetrics,
}

/// Push `n_inputs` Gaussian inputs through an `L`-block BHyT stack and record
/// the injected variance against the exactly measured second moment of `x'`
/// at every block. The measurement is diagnostic only; the forward path still
/// performs exactly one reduction per block.
pub fn variance_accuracy_scan(cfg: &VarAccuracyConfig, seed: u64) -> Result<VarAccuracyResult> {
    let mut rng = RngStream::new(seed);
    let mut blocks = Vec::with_capacity(cfg.l);
    for layer in 1..=cfg.l {
        let mut b =
            BlockWeights::random_fan_in(cfg.dims, Placement::Bhyt, layer, &cfg.hyper, &mut rng)?;
        if cfg.value_paths_zeroed {
            b.w_o = Tensor::zeros(b.w_o.shape())?;
            b.w_2 = Tensor::zeros(b.w_2.shape())?;
        }
        blocks.push(b);
    }
    let settings = BlockSettings::new(Placement::Bhyt)
        .with_attention(cfg.attention)
        .with_activation(cfg.activation);

    let mut points = Vec::with_capacity(cfg.l * cfg.n_inputs);
    for input_idx in 0..cfg.n_inputs {
        let (lo, hi) = cfg.input_std_range;
        let std = lo * (hi / lo).powf(rng.uniform());
        let mut x = crate::numerics::gaussian(&[cfg.t, cfg.dims.d], &mut rng, std)?;
        for (layer, block) in blocks.iter().enumerate() {
            let mut counter = MomentCounter::new();
            let (out, trace) =
                block_forward(block, &x, settings, InjectedVariance::FromWeights, &mut counter)?;
            points.push(VarAccuracyPoint {
                layer: layer + 1,
                input_idx,
                injected: trace.injected_var.expect("BHyT placement"),
                exact: mean_square(&trace.x_prime),
            });
            x = out;
        }
    }
    let injected: Vec<f64> = points.iter().map(|p| p.injected).collect();
    let exact: Vec<f64> = points.iter().map(|p| p.exact).collect();
    let metrics = agreement(&injected, &exact)?;
    Ok(VarAccuracyResult { points, metrics })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gaussian;

    #[test]
    fn identity_weights_closed_form() {
        // W_V = W_O = I_d, T = 100, λ = 2, κ = 10 ⇒ s̃² = d/(100·d)·0.04 = 4e-4
        for d in [4, 16] {
            let i = Tensor::identity(d).unwrap();
            let est = attn_output_variance(&i, &i, 100, d, 2.0, 10.0).unwrap();
            assert!((est.value - 4e-4).abs() < 1e-18);
            assert_eq!(est.source, EstimateSource::AttnClosedForm);
        }
    }

    #[test]
    fn estimate_decreases_monotonically_in_t() {
        let mut rng = RngStream::new(5);
        let w_v = gaussian(&[8, 8], &mut rng, 0.5).unwrap();
        let w_o = gaussian(&[8, 8], &mut rng, 0.5).unwrap();
        let mut last = f64::INFINITY;
        for t in [1, 2, 8, 64, 1024] {
            let est = attn_output_variance(&w_v, &w_o, t, 8, 1.0, 10.0).unwrap();
            assert!(est.value < last);
            last = est.value;
        }
    }

    #[test]
    fn attn_estimate_scale_equivariant() {
        // Scaling W_V by 2 (a power of two) scales the estimate by exactly 4.
        let mut rng = RngStream::new(6);
        let w_v = gaussian(&[6, 6], &mut rng, 0.7).unwrap();
        let w_o = gaussian(&[6, 6], &mut rng, 0.7).unwrap();
        let base = attn_output_variance(&w_v, &w_o, 16, 6, 1.0, 10.0).unwrap();
        let scaled =
            attn_output_variance(&w_v.scale(2.0).unwrap(), &w_o, 16, 6, 1.0, 10.0).unwrap();
        assert_eq!(scaled.value, 4.0 * base.value);
    }

    #[test]
    fn attn_shape_mismatch_errors() {
        let w_v = Tensor::zeros(&[4, 3]).unwrap();
        let w_o = Tensor::zeros(&[4, 4]).unwrap();
        assert!(attn_output_variance(&w_v, &w_o, 10, 4, 1.0, 10.0).is_err());
    }

    #[test]
    fn mlp_identity_network() {
        // τ = 1 and W₁W₂ = I_d ⇒ s̃² = s_z².
        let d = 5;
        let i = Tensor::identity(d).unwrap();
        let est = mlp_output_variance(&i, &i, 1.0, 0.37, d).unwrap();
        assert!((est.value - 0.37).abs() < 1e-15);
    }

    #[test]
    fn mlp_zero_tau() {
        let i = Tensor::identity(3).unwrap();
        let est = mlp_output_variance(&i, &i, 0.0, 1.0, 3).unwrap();
        assert_eq!(est.value, 0.0);
    }

    #[test]
    fn mlp_rejects_negative_parameters() {
        let i = Tensor::identity(3).unwrap();
        assert!(mlp_output_variance(&i, &i, -0.1, 1.0, 3).is_err());
        assert!(mlp_output_variance(&i, &i, 1.0, -1.0, 3).is_err());
    }

    #[test]
    fn residual_sum_trivials() {
        assert_eq!(residual_variance_sum(0.0, 0.3).unwrap().value, 0.3);
        let est = residual_variance_sum(1.0, 4e-4).unwrap();
        assert!((est.value - 1.0004).abs() < 1e-15);
    }

    #[test]
    fn tau_identity_is_one() {
        let mut rng = RngStream::new(1);
        let tau = calibrate_tau("identity", 1.0, 100_000, &mut rng).unwrap();
        // Identity has τ = 1 exactly; allow 3 standard errors of the ratio.
        assert!((tau - 1.0).abs() < 0.01, "tau = {tau}");
    }

    #[test]
    fn tau_relu_matches_gaussian_moment_oracle() {
        // Closed-form Gaussian moments: Var(max(0,u)) = (1/2 − 1/(2π))·s².
        let oracle = 0.5 - 1.0 / (2.0 * std::f64::consts::PI);
        let mut rng = RngStream::new(2);
        let tau = calibrate_tau("relu", 1.0, 400_000, &mut rng).unwrap();
        assert!((tau - oracle).abs() < 0.01, "tau = {tau}, oracle = {oracle}");
        assert!((oracle - 0.3408).abs() < 1e-4);
    }

    #[test]
    fn tau_tanh_near_linear_regime() {
        let mut rng = RngStream::new(3);
        let tau = calibrate_tau("tanh", 0.01, 200_000, &mut rng).unwrap();
        assert!((tau - 1.0).abs() < 0.05, "tau = {tau}");
    }

    #[test]
    fn tau_unknown_activation_errors() {
        let mut rng = RngStream::new(4);
        assert!(calibrate_tau("swiglu?", 1.0, 10_000, &mut rng).is_err());
        assert!(calibrate_tau("relu", 1.0, 10, &mut rng).is_err());
    }

    #[test]
    fn refresh_policy_semantics() {
        let policy = RefreshPolicy::new(100).unwrap();
        let cached = VarianceEstimate::new(0.5, 0, EstimateSource::AttnClosedForm).unwrap();

        // Steps 1..=99 return the cached value unchanged.
        for step in 1..100 {
            let got = maybe_refresh(&cached, step, policy, || {
                panic!("must not recompute inside the interval")
            })
            .unwrap();
            assert_eq!(got, cached);
        }

        // Step 100 recomputes; the snapshot step advances.
        let fresh = maybe_refresh(&cached, 100, policy, || {
            VarianceEstimate::new(0.9, 0, EstimateSource::AttnClosedForm)
        })
        .unwrap();
        assert_eq!(fresh.value, 0.9);
        assert_eq!(fresh.computed_at_step, 100);

        // interval = 1 recomputes every step.
        let every = RefreshPolicy::new(1).unwrap();
        let got = maybe_refresh(&cached, 3, every, || {
            VarianceEstimate::new(0.7, 0, EstimateSource::AttnClosedForm)
        })
        .unwrap();
        assert_eq!(got.value, 0.7);
    }

    #[test]
    fn refresh_rejects_time_travel() {
        let policy = RefreshPolicy::new(10).unwrap();
        let cached = VarianceEstimate::new(0.5, 50, EstimateSource::AttnClosedForm).unwrap();
        assert!(maybe_refresh(&cached, 49, policy, || unreachable!()).is_err());
    }

    #[test]
    fn zeroed_value_paths_make_injection_exact() {
        // With W_O = W_2 = 0 every block is the identity map: the injected
        // scalar and the measured moment are the same number, so R² = 1.
        let mut cfg = VarAccuracyConfig::new(4, 16, 8, 6);
        cfg.value_paths_zeroed = true;
        let result = variance_accuracy_scan(&cfg, 77).unwrap();
        for p in &result.points {
            assert!(
                (p.injected - p.exact).abs() <= 1e-15 * p.exact.abs(),
                "layer {} input {}: {} vs {}",
                p.layer,
                p.input_idx,
                p.injected,
                p.exact
            );
        }
        assert!((result.metrics.r_squared - 1.0).abs() < 1e-12);
        assert!((result.metrics.pearson_r - 1.0).abs() < 1e-12);
    }

    #[test]
    fn refresh_with_changed_weights_changes_value() {
        let policy = RefreshPolicy::new(100).unwrap();
        let mut rng = RngStream::new(9);
        let w_v = gaussian(&[4, 4], &mut rng, 0.5).unwrap();
        let w_o = gaussian(&[4, 4], &mut rng, 0.5).unwrap();
        let cached = attn_output_variance(&w_v, &w_o, 32, 4, 1.0, 10.0).unwrap();

        let perturbed = w_v.scale(1.1).unwrap();
        let fresh = maybe_refresh(&cached, 100, policy, || {
            attn_output_variance(&perturbed, &w_o, 32, 4, 1.0, 10.0)
        })
        .unwrap();
        assert_ne!(fresh.value, cached.value);
    }
}
