//! A minimal causal decoder block with swappable normalization strategy and
//! placement, plus analytic backward.
//!
//! The BHyT placement follows the parallel-estimator structure: the exact
//! rowwise moment is computed once at the block entrance (inside the first
//! normalization), the injected variance for the second normalization is the
//! residual sum `mean(s_x²) + (1/(Td))·‖W_V·W_O‖_F²·(λ_attn/κ)²` built from a
//! weight snapshot, and no further activation statistics are taken.

use crate::activation::Activation;
use crate::error::{BhytError, Result};
use crate::estimator::attn_output_variance_from_frob;
use crate::norm::{
    norm_backward, norm_forward, MomentCounter, NormCache, NormConfig, NormGrads, NormKind,
    ScaleGrad, VarianceSource,
};
use crate::numerics::{add, frobenius_norm_sq, matmul, transpose, RngStream, Tensor};

/// Normalization strategy and placement of one decoder stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Placement {
    /// RMSNorm before each sublayer (the standard Pre-LN decoder).
    PreLn,
    /// RMSNorm both before and after each sublayer.
    PeriLn,
    /// LNS before each sublayer (RMSNorm · 1/√ℓ).
    Lns,
    /// DyT before each sublayer; no statistics anywhere.
    DyT,
    /// BHyT with one exact moment per block and an injected MLP-site variance.
    Bhyt,
    /// BHyT* with exact centered statistics at both sites.
    BhytStar,
}

impl Placement {
    pub const ALL: [Placement; 6] = [
        Placement::PreLn,
        Placement::PeriLn,
        Placement::Lns,
        Placement::DyT,
        Placement::Bhyt,
        Placement::BhytStar,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Placement::PreLn => "preln",
            Placement::PeriLn => "periln",
            Placement::Lns => "lns",
            Placement::DyT => "dyt",
            Placement::Bhyt => "bhyt",
            Placement::BhytStar => "bhyt_star",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "preln" => Ok(Placement::PreLn),
            "periln" => Ok(Placement::PeriLn),
            "lns" => Ok(Placement::Lns),
            "dyt" => Ok(Placement::DyT),
            "bhyt" => Ok(Placement::Bhyt),
            "bhyt_star" => Ok(Placement::BhytStar),
            other => Err(BhytError::param(
                "Placement::parse",
                format!("unknown placement {other:?}"),
            )),
        }
    }

    /// Norm kind applied at the pre-sublayer sites.
    pub fn norm_kind(&self) -> NormKind {
        match self {
            Placement::PreLn | Placement::PeriLn => NormKind::RmsNorm,
            Placement::Lns => NormKind::Lns,
            Placement::DyT => NormKind::DyT,
            Placement::Bhyt => NormKind::Bhyt,
            Placement::BhytStar => NormKind::BhytStar,
        }
    }

    /// Exact rowwise-moment reductions one block performs per forward.
    pub fn expected_moment_reductions(&self) -> u64 {
        match self {
            Placement::Bhyt => 1,
            Placement::PreLn | Placement::Lns | Placement::BhytStar => 2,
            Placement::PeriLn => 4,
            Placement::DyT => 0,
        }
    }
}

/// How attention weights are formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum AttentionMode {
    /// Scaled dot-product softmax over the causal prefix.
    CausalSoftmax,
    /// Uniform weights `1/t` over the causal prefix (row `t` averages the
    /// first `t` tokens). Used for uniform-attention tests.
    CausalUniform,
    /// Uniform weights `1/T` over the whole sequence. Verification mode for
    /// the uniform-attention variance analysis; deliberately not causal.
    FullUniform,
}

/// Static dimensions of one block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct BlockDims {
    pub d: usize,
    pub d_v: usize,
    pub d_m: usize,
}

/// Normalization hyperparameters shared by every site of a stack.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct NormHyper {
    pub lambda_attn: f64,
    pub lambda_mlp: f64,
    pub kappa: f64,
    pub eps: f64,
    pub alpha_dyt_attn: f64,
    pub alpha_dyt_mlp: f64,
    pub alpha_dyt_final: f64,
    pub scale_grad: ScaleGrad,
}

impl Default for NormHyper {
    fn default() -> Self {
        NormHyper {
            lambda_attn: 2.0,
            lambda_mlp: 1.0,
            kappa: 10.0,
            eps: 1e-8,
            alpha_dyt_attn: 1.0,
            alpha_dyt_mlp: 0.5,
            alpha_dyt_final: 0.5,
            scale_grad: ScaleGrad::Differentiate,
        }
    }
}

impl NormHyper {
    /// Build the NormConfig for one site. `site_lambda`/`site_alpha` pick the
    /// per-site hyperparameters; `layer_index` feeds LNS.
    fn site_config(
        &self,
        kind: NormKind,
        d: usize,
        site_lambda: f64,
        site_alpha: f64,
        layer_index: usize,
        variance_source: VarianceSource,
    ) -> Result<NormConfig> {
        let mut cfg = NormConfig::new(kind, d, site_lambda)?
            .with_alpha_dyt(site_alpha)
            .with_layer_index(layer_index)
            .with_variance_source(variance_source)
            .with_eps(self.eps)
            .with_scale_grad(match variance_source {
                VarianceSource::Injected => ScaleGrad::StopGradient,
                VarianceSource::Exact => self.scale_grad,
            });
        cfg.kappa = self.kappa;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Attention and MLP projection matrices plus the normalization sites of one
/// decoder block.
#[derive(Debug, Clone)]
pub struct BlockWeights {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
    pub w_1: Tensor,
    pub w_2: Tensor,
    pub norm_attn: NormConfig,
    pub norm_mlp: NormConfig,
    pub post_norm_attn: Option<NormConfig>,
    pub post_norm_mlp: Option<NormConfig>,
}

impl BlockWeights {
    /// Gaussian-initialized block for `placement` at 1-based `layer_index`.
    pub fn random(
        dims: BlockDims,
        placement: Placement,
        layer_index: usize,
        hyper: &NormHyper,
        init_std: f64,
        rng: &mut RngStream,
    ) -> Result<Self> {
        let BlockDims { d, d_v, d_m } = dims;
        let w_q = crate::numerics::gaussian(&[d, d_v], rng, init_std)?;
        let w_k = crate::numerics::gaussian(&[d, d_v], rng, init_std)?;
        let w_v = crate::numerics::gaussian(&[d, d_v], rng, init_std)?;
        let w_o = crate::numerics::gaussian(&[d_v, d], rng, init_std)?;
        let w_1 = crate::numerics::gaussian(&[d, d_m], rng, init_std)?;
        let w_2 = crate::numerics::gaussian(&[d_m, d], rng, init_std)?;
        Self::assemble(dims, placement, layer_index, hyper, w_q, w_k, w_v, w_o, w_1, w_2)
    }

    /// Gaussian init with fan-in scaling (std `1/√fan_in` per matrix).
    pub fn random_fan_in(
        dims: BlockDims,
        placement: Placement,
        layer_index: usize,
        hyper: &NormHyper,
        rng: &mut RngStream,
    ) -> Result<Self> {
        let BlockDims { d, d_v, d_m } = dims;
        let sd = 1.0 / (d as f64).sqrt();
        let sdv = 1.0 / (d_v as f64).sqrt();
        let sdm = 1.0 / (d_m as f64).sqrt();
        let w_q = crate::numerics::gaussian(&[d, d_v], rng, sd)?;
        let w_k = crate::numerics::gaussian(&[d, d_v], rng, sd)?;
        let w_v = crate::numerics::gaussian(&[d, d_v], rng, sd)?;
        let w_o = crate::numerics::gaussian(&[d_v, d], rng, sdv)?;
        let w_1 = crate::numerics::gaussian(&[d, d_m], rng, sd)?;
        let w_2 = crate::numerics::gaussian(&[d_m, d], rng, sdm)?;
        Self::assemble(dims, placement, layer_index, hyper, w_q, w_k, w_v, w_o, w_1, w_2)
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        dims: BlockDims,
        placement: Placement,
        layer_index: usize,
        hyper: &NormHyper,
        w_q: Tensor,
        w_k: Tensor,
        w_v: Tensor,
        w_o: Tensor,
        w_1: Tensor,
        w_2: Tensor,
    ) -> Result<Self> {
        let d = dims.d;
        let kind = placement.norm_kind();
        let mlp_source = if placement == Placement::Bhyt {
            VarianceSource::Injected
        } else {
            VarianceSource::Exact
        };
        let norm_attn = hyper.site_config(
            kind,
            d,
            hyper.lambda_attn,
            hyper.alpha_dyt_attn,
            layer_index,
            VarianceSource::Exact,
        )?;
        let norm_mlp = hyper.site_config(
            kind,
            d,
            hyper.lambda_mlp,
            hyper.alpha_dyt_mlp,
            layer_index,
            mlp_source,
        )?;
        let (post_norm_attn, post_norm_mlp) = if placement == Placement::PeriLn {
            (
                Some(hyper.site_config(
                    NormKind::RmsNorm,
                    d,
                    hyper.lambda_attn,
                    hyper.alpha_dyt_attn,
                    layer_index,
                    VarianceSource::Exact,
                )?),
                Some(hyper.site_config(
                    NormKind::RmsNorm,
                    d,
                    hyper.lambda_mlp,
                    hyper.alpha_dyt_mlp,
                    layer_index,
                    VarianceSource::Exact,
                )?),
            )
        } else {
            (None, None)
        };
        let block = BlockWeights {
            w_q,
            w_k,
            w_v,
            w_o,
            w_1,
            w_2,
            norm_attn,
            norm_mlp,
            post_norm_attn,
            post_norm_mlp,
        };
        block.validate(placement)?;
        Ok(block)
    }

    pub fn dims(&self) -> Result<BlockDims> {
        let (d, d_v) = self.w_v.dims2("BlockWeights")?;
        let (_, d_m) = self.w_1.dims2("BlockWeights")?;
        Ok(BlockDims { d, d_v, d_m })
    }

    pub fn validate(&self, placement: Placement) -> Result<()> {
        let (d, d_v) = self.w_v.dims2("BlockWeights")?;
        let checks = [
            (self.w_q.shape(), [d, d_v]),
            (self.w_k.shape(), [d, d_v]),
            (self.w_o.shape(), [d_v, d]),
        ];
        for (got, want) in checks {
            if got != want {
                return Err(BhytError::dim(
                    "BlockWeights",
                    format!("projection shape {got:?}, expected {want:?}"),
                ));
            }
        }
        let (d1, d_m) = self.w_1.dims2("BlockWeights")?;
        let (d_m2, d2) = self.w_2.dims2("BlockWeights")?;
        if d1 != d || d2 != d || d_m != d_m2 {
            return Err(BhytError::dim(
                "BlockWeights",
                format!("MLP shapes {d1}x{d_m} / {d_m2}x{d2} inconsistent with d = {d}"),
            ));
        }
        let has_post = self.post_norm_attn.is_some() && self.post_norm_mlp.is_some();
        if (placement == Placement::PeriLn) != has_post {
            return Err(BhytError::param(
                "BlockWeights",
                "post-norm configs must be present iff placement is PeriLn".to_string(),
            ));
        }
        if self.norm_attn.kind != placement.norm_kind() {
            return Err(BhytError::param(
                "BlockWeights",
                format!(
                    "norm kind {:?} does not match placement {placement:?}",
                    self.norm_attn.kind
                ),
            ));
        }
        Ok(())
    }

    /// `‖W_V·W_O‖_F²` from the current weights (the parallel-path snapshot).
    pub fn value_path_frobenius_sq(&self) -> Result<f64> {
        frobenius_norm_sq(&matmul(&self.w_v, &self.w_o)?)
    }
}

/// How the BHyT injected variance is obtained for one block forward.
///
/// The injected scalar is a stop-gradient quantity: backward never flows
/// through it, so finite-difference probes must hold it `Fixed` at the value
/// captured from a base forward.
#[derive(Debug, Clone, Copy)]
pub enum InjectedVariance {
    /// Entrance moment plus a fresh `‖W_V·W_O‖_F²` from the current weights.
    FromWeights,
    /// Entrance moment plus a cached Frobenius snapshot (the refresh path).
    FromFrobSnapshot(f64),
    /// Use exactly this scalar.
    Fixed(f64),
}

/// Forward-time options of a stack.
#[derive(Debug, Clone, Copy)]
pub struct BlockSettings {
    pub placement: Placement,
    pub attention: AttentionMode,
    pub activation: Activation,
}

impl BlockSettings {
    pub fn new(placement: Placement) -> Self {
        BlockSettings {
            placement,
            attention: AttentionMode::CausalSoftmax,
            activation: Activation::Relu,
        }
    }

    pub fn with_attention(mut self, mode: AttentionMode) -> Self {
        self.attention = mode;
        self
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }
}

/// Everything the backward pass and the statistics loggers need from one
/// block forward. `h_attn`/`h_mlp` are the branch values added to the
/// residual stream (for PeriLn that is the post-normalized sublayer output).
#[derive(Debug, Clone)]
pub struct BlockTrace {
    pub z_attn: Tensor,
    pub h_attn: Tensor,
    pub x_prime: Tensor,
    pub z_mlp: Tensor,
    pub h_mlp: Tensor,
    pub x_out: Tensor,
    /// Exact per-row uncentered moments from the block entrance, when the
    /// placement computes them.
    pub s_x2: Option<Tensor>,
    /// Scalar injected variance used by the MLP-site normalization (BHyT).
    pub injected_var: Option<f64>,
    x: Tensor,
    norm_attn_cache: NormCache,
    norm_mlp_cache: NormCache,
    post_attn_cache: Option<NormCache>,
    post_mlp_cache: Option<NormCache>,
    attn_cache: AttnCache,
    mlp_cache: MlpCache,
}

/// Attention intermediates retained for backward.
#[derive(Debug, Clone)]
pub struct AttnCache {
    z: Tensor,
    q: Tensor,
    k: Tensor,
    v: Tensor,
    probs: Tensor,
    ctx: Tensor,
    mode: AttentionMode,
}

/// MLP intermediates retained for backward.
#[derive(Debug, Clone)]
pub struct MlpCache {
    z: Tensor,
    pre_act: Tensor,
    post_act: Tensor,
}

/// Gradients of one norm site's parameters.
#[derive(Debug, Clone)]
pub struct NormParamGrads {
    pub d_gamma: Tensor,
    pub d_alpha_dyt: f64,
}

impl From<&NormGrads> for NormParamGrads {
    fn from(g: &NormGrads) -> Self {
        NormParamGrads {
            d_gamma: g.d_gamma.clone(),
            d_alpha_dyt: g.d_alpha_dyt,
        }
    }
}

/// Gradients for every weight and norm parameter of one block.
#[derive(Debug, Clone)]
pub struct BlockGrads {
    pub d_wq: Tensor,
    pub d_wk: Tensor,
    pub d_wv: Tensor,
    pub d_wo: Tensor,
    pub d_w1: Tensor,
    pub d_w2: Tensor,
    pub d_norm_attn: NormParamGrads,
    pub d_norm_mlp: NormParamGrads,
    pub d_post_attn: Option<NormParamGrads>,
    pub d_post_mlp: Option<NormParamGrads>,
}

fn acc(dst: &mut Tensor, src: &Tensor, scale: f64) {
    for (d, s) in dst.data_mut().iter_mut().zip(src.data()) {
        *d += scale * s;
    }
}

impl NormParamGrads {
    pub fn accumulate(&mut self, other: &NormParamGrads, scale: f64) {
        acc(&mut self.d_gamma, &other.d_gamma, scale);
        self.d_alpha_dyt += scale * other.d_alpha_dyt;
    }
}

impl BlockGrads {
    /// `self += scale · other`, used for batch averaging.
    pub fn accumulate(&mut self, other: &BlockGrads, scale: f64) {
        acc(&mut self.d_wq, &other.d_wq, scale);
        acc(&mut self.d_wk, &other.d_wk, scale);
        acc(&mut self.d_wv, &other.d_wv, scale);
        acc(&mut self.d_wo, &other.d_wo, scale);
        acc(&mut self.d_w1, &other.d_w1, scale);
        acc(&mut self.d_w2, &other.d_w2, scale);
        self.d_norm_attn.accumulate(&other.d_norm_attn, scale);
        self.d_norm_mlp.accumulate(&other.d_norm_mlp, scale);
        if let (Some(a), Some(b)) = (&mut self.d_post_attn, &other.d_post_attn) {
            a.accumulate(b, scale);
        }
        if let (Some(a), Some(b)) = (&mut self.d_post_mlp, &other.d_post_mlp) {
            a.accumulate(b, scale);
        }
    }
}

fn at_site<T>(site: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        BhytError::NonFinite { site: inner } => BhytError::NonFinite {
            site: format!("{site}/{inner}"),
        },
        other => other,
    })
}

/// Single-head attention over `z`. Causal softmax by default; the uniform
/// modes replace the weights with fixed averages.
pub fn attention_forward(
    z: &Tensor,
    w: &BlockWeights,
    mode: AttentionMode,
) -> Result<(Tensor, AttnCache)> {
    let (t, _d) = z.dims2("attention_forward")?;
    let q = at_site("attention/q", matmul(z, &w.w_q))?;
    let k = at_site("attention/k", matmul(z, &w.w_k))?;
    let v = at_site("attention/v", matmul(z, &w.w_v))?;
    let d_v = q.shape()[1];

    let mut probs = vec![0.0; t * t];
    match mode {
        AttentionMode::CausalSoftmax => {
            let scale = 1.0 / (d_v as f64).sqrt();
            for row in 0..t {
                // scores over the causal prefix u ≤ row
                let mut scores = Vec::with_capacity(row + 1);
                for u in 0..=row {
                    let mut dot = 0.0;
                    for c in 0..d_v {
                        dot += q.data()[row * d_v + c] * k.data()[u * d_v + c];
                    }
                    scores.push(dot * scale);
                }
                let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut denom = 0.0;
                for s in scores.iter_mut() {
                    *s = (*s - max).exp();
                    denom += *s;
                }
                for (u, s) in scores.iter().enumerate() {
                    probs[row * t + u] = s / denom;
                }
            }
        }
        AttentionMode::CausalUniform => {
            for row in 0..t {
                let p = 1.0 / (row + 1) as f64;
                for u in 0..=row {
                    probs[row * t + u] = p;
                }
            }
        }
        AttentionMode::FullUniform => {
            let p = 1.0 / t as f64;
            probs.iter_mut().for_each(|v| *v = p);
        }
    }
    let probs = Tensor::checked(vec![t, t], probs, "attention/probs")?;
    let ctx = at_site("attention/ctx", matmul(&probs, &v))?;
    let out = at_site("attention/out", matmul(&ctx, &w.w_o))?;
    Ok((
        out,
        AttnCache {
            z: z.clone(),
            q,
            k,
            v,
            probs,
            ctx,
            mode,
        },
    ))
}

fn attention_backward(
    w: &BlockWeights,
    cache: &AttnCache,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor, Tensor, Tensor)> {
    let (t, d_v) = cache.q.dims2("attention_backward")?;
    // out = ctx · W_o
    let d_wo = matmul(&transpose(&cache.ctx)?, grad_out)?;
    let g_ctx = matmul(grad_out, &transpose(&w.w_o)?)?;
    // ctx = P · v
    let g_v = matmul(&transpose(&cache.probs)?, &g_ctx)?;
    let d_wv = matmul(&transpose(&cache.z)?, &g_v)?;
    let mut g_z = matmul(&g_v, &transpose(&w.w_v)?)?;

    let (d_wq, d_wk) = if cache.mode == AttentionMode::CausalSoftmax {
        let g_p = matmul(&g_ctx, &transpose(&cache.v)?)?;
        // softmax backward per causal row
        let mut g_scores = vec![0.0; t * t];
        for row in 0..t {
            let mut dot = 0.0;
            for u in 0..=row {
                dot += cache.probs.data()[row * t + u] * g_p.data()[row * t + u];
            }
            for u in 0..=row {
                let p = cache.probs.data()[row * t + u];
                g_scores[row * t + u] = p * (g_p.data()[row * t + u] - dot);
            }
        }
        let scale = 1.0 / (d_v as f64).sqrt();
        let g_scores = Tensor::checked(vec![t, t], g_scores, "attention/backward")?
            .scale(scale)?;
        // scores = Q·Kᵀ (scaled): g_q = g_s·K, g_k = g_sᵀ·Q
        let g_q = matmul(&g_scores, &cache.k)?;
        let g_k = matmul(&transpose(&g_scores)?, &cache.q)?;
        let d_wq = matmul(&transpose(&cache.z)?, &g_q)?;
        let d_wk = matmul(&transpose(&cache.z)?, &g_k)?;
        g_z = add(&g_z, &matmul(&g_q, &transpose(&w.w_q)?)?)?;
        g_z = add(&g_z, &matmul(&g_k, &transpose(&w.w_k)?)?)?;
        (d_wq, d_wk)
    } else {
        // Uniform modes: the weights are constants, nothing flows through Q/K.
        (
            Tensor::zeros(w.w_q.shape())?,
            Tensor::zeros(w.w_k.shape())?,
        )
    };

    Ok((g_z, d_wq, d_wk, d_wv, d_wo))
}

/// Two-matrix MLP `z·W₁ → φ → ·W₂`.
pub fn mlp_forward(
    z: &Tensor,
    w: &BlockWeights,
    activation: Activation,
) -> Result<(Tensor, MlpCache)> {
    let pre_act = at_site("mlp/pre_act", matmul(z, &w.w_1))?;
    let post_act = pre_act.map("mlp/act", |u| activation.apply(u))?;
    let out = at_site("mlp/out", matmul(&post_act, &w.w_2))?;
    Ok((
        out,
        MlpCache {
            z: z.clone(),
            pre_act,
            post_act,
        },
    ))
}

fn mlp_backward(
    w: &BlockWeights,
    cache: &MlpCache,
    activation: Activation,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let d_w2 = matmul(&transpose(&cache.post_act)?, grad_out)?;
    let g_post = matmul(grad_out, &transpose(&w.w_2)?)?;
    let mut g_pre = vec![0.0; g_post.len()];
    for (i, (g, u)) in g_post.data().iter().zip(cache.pre_act.data()).enumerate() {
        g_pre[i] = g * activation.derivative(*u);
    }
    let g_pre = Tensor::checked(g_post.shape().to_vec(), g_pre, "mlp/backward")?;
    let d_w1 = matmul(&transpose(&cache.z)?, &g_pre)?;
    let g_z = matmul(&g_pre, &transpose(&w.w_1)?)?;
    Ok((g_z, d_w1, d_w2))
}

/// One decoder-block forward.
///
/// `injected` selects how the BHyT MLP-site variance is produced; other
/// placements ignore it.
pub fn block_forward(
    w: &BlockWeights,
    x: &Tensor,
    settings: BlockSettings,
    injected: InjectedVariance,
    counter: &mut MomentCounter,
) -> Result<(Tensor, BlockTrace)> {
    w.validate(settings.placement)?;
    let (t, d) = x.dims2("block_forward")?;

    // Pre-attention normalization. For BHyT this is the single exact moment
    // computation of the block.
    let (z_attn, norm_attn_cache) = at_site(
        "block/norm_attn",
        norm_forward(&w.norm_attn, x, None, counter),
    )?;

    // Parallel path: injected variance from the weight snapshot.
    let (s_x2, injected_var) = if settings.placement == Placement::Bhyt {
        let var_rows = norm_attn_cache
            .exact_var_rows()
            .expect("BHyT attn site runs in Exact mode")
            .clone();
        let value = match injected {
            InjectedVariance::Fixed(v) => v,
            InjectedVariance::FromWeights | InjectedVariance::FromFrobSnapshot(_) => {
                let mean_s_x2 = var_rows.data().iter().sum::<f64>() / t as f64;
                let frob = match injected {
                    InjectedVariance::FromFrobSnapshot(f) => f,
                    _ => w.value_path_frobenius_sq()?,
                };
                let attn_var = attn_output_variance_from_frob(
                    frob,
                    t,
                    d,
                    w.norm_attn.lambda,
                    w.norm_attn.kappa,
                );
                mean_s_x2 + attn_var
            }
        };
        (Some(var_rows), Some(value))
    } else {
        (norm_attn_cache.exact_var_rows().cloned(), None)
    };

    // Attention path.
    let (attn_raw, attn_cache) = attention_forward(&z_attn, w, settings.attention)?;
    let (h_attn, post_attn_cache) = match &w.post_norm_attn {
        Some(cfg) => {
            let (y, cache) = at_site(
                "block/post_norm_attn",
                norm_forward(cfg, &attn_raw, None, counter),
            )?;
            (y, Some(cache))
        }
        None => (attn_raw, None),
    };
    let x_prime = at_site("block/residual_attn", add(x, &h_attn))?;

    // Pre-MLP normalization (injected variance for BHyT).
    let (z_mlp, norm_mlp_cache) = at_site(
        "block/norm_mlp",
        norm_forward(&w.norm_mlp, &x_prime, injected_var, counter),
    )?;

    // MLP path.
    let (mlp_raw, mlp_cache) = mlp_forward(&z_mlp, w, settings.activation)?;
    let (h_mlp, post_mlp_cache) = match &w.post_norm_mlp {
        Some(cfg) => {
            let (y, cache) = at_site(
                "block/post_norm_mlp",
                norm_forward(cfg, &mlp_raw, None, counter),
            )?;
            (y, Some(cache))
        }
        None => (mlp_raw, None),
    };
    let x_out = at_site("block/residual_mlp", add(&x_prime, &h_mlp))?;

    let trace = BlockTrace {
        z_attn,
        h_attn,
        x_prime,
        z_mlp,
        h_mlp,
        x_out: x_out.clone(),
        s_x2,
        injected_var,
        x: x.clone(),
        norm_attn_cache,
        norm_mlp_cache,
        post_attn_cache,
        post_mlp_cache,
        attn_cache,
        mlp_cache,
    };
    Ok((x_out, trace))
}

/// Reverse-mode pass through one block. Returns the gradients of every block
/// parameter together with the gradient flowing into the block input.
pub fn block_backward(
    w: &BlockWeights,
    trace: &BlockTrace,
    settings: BlockSettings,
    grad_out: &Tensor,
) -> Result<(BlockGrads, Tensor)> {
    if grad_out.shape() != trace.x_out.shape() {
        return Err(BhytError::State {
            op: "block_backward",
            detail: format!(
                "grad shape {:?} does not match trace output {:?} (stale trace?)",
                grad_out.shape(),
                trace.x_out.shape()
            ),
        });
    }

    // x_out = x' + h_mlp
    let mut g_x_prime = grad_out.clone();
    let g_h_mlp = grad_out;

    // h_mlp = post_norm(mlp_raw) (PeriLn) or mlp_raw
    let (g_mlp_raw, d_post_mlp) = match (&w.post_norm_mlp, &trace.post_mlp_cache) {
        (Some(cfg), Some(cache)) => {
            let grads = norm_backward(cfg, cache, g_h_mlp)?;
            (grads.d_input.clone(), Some(NormParamGrads::from(&grads)))
        }
        _ => (g_h_mlp.clone(), None),
    };

    // mlp_raw = MLP(z_mlp)
    let (g_z_mlp, d_w1, d_w2) = mlp_backward(w, &trace.mlp_cache, settings.activation, &g_mlp_raw)?;

    // z_mlp = norm_mlp(x')
    let norm_mlp_grads = norm_backward(&w.norm_mlp, &trace.norm_mlp_cache, &g_z_mlp)?;
    g_x_prime = add(&g_x_prime, &norm_mlp_grads.d_input)?;

    // x' = x + h_attn
    let mut g_x = g_x_prime.clone();
    let g_h_attn = &g_x_prime;

    let (g_attn_raw, d_post_attn) = match (&w.post_norm_attn, &trace.post_attn_cache) {
        (Some(cfg), Some(cache)) => {
            let grads = norm_backward(cfg, cache, g_h_attn)?;
            (grads.d_input.clone(), Some(NormParamGrads::from(&grads)))
        }
        _ => (g_h_attn.clone(), None),
    };

    // attn_raw = A(z_attn)
    let (g_z_attn, d_wq, d_wk, d_wv, d_wo) =
        attention_backward(w, &trace.attn_cache, &g_attn_raw)?;

    // z_attn = norm_attn(x)
    let norm_attn_grads = norm_backward(&w.norm_attn, &trace.norm_attn_cache, &g_z_attn)?;
    g_x = add(&g_x, &norm_attn_grads.d_input)?;

    Ok((
        BlockGrads {
            d_wq,
            d_wk,
            d_wv,
            d_wo,
            d_w1,
            d_w2,
            d_norm_attn: NormParamGrads::from(&norm_attn_grads),
            d_norm_mlp: NormParamGrads::from(&norm_mlp_grads),
            d_post_attn,
            d_post_mlp,
        },
        g_x,
    ))
}

impl BlockTrace {
    /// Residual identity `x_out == x' + h_mlp`, exact.
    pub fn residual_identity_holds(&self) -> bool {
        self.x_prime
            .data()
            .iter()
            .zip(self.h_mlp.data())
            .zip(self.x_out.data())
            .all(|((a, b), c)| a + b == *c)
    }

    pub fn input(&self) -> &Tensor {
        &self.x
    }
}
