//! Toy byte-level decoder LM: token + position embeddings, a stack of decoder
//! blocks, a final pre-head normalization of the placement's kind (exact
//! variance), and a zero-initialized output head.

use crate::activation::Activation;
use crate::block::{
    block_backward, block_forward, AttentionMode, BlockDims, BlockGrads, BlockSettings,
    BlockTrace, BlockWeights, InjectedVariance, NormHyper, NormParamGrads, Placement,
};
use crate::error::{BhytError, Result};
use crate::estimator::RefreshPolicy;
use crate::norm::{
    norm_backward, norm_forward, MomentCounter, NormCache, NormConfig, NormGrads, VarianceSource,
};
use crate::numerics::{RngStream, Tensor};

pub const VOCAB: usize = 256;

/// Static configuration of a decoder LM.
#[derive(Debug, Clone, Copy)]
pub struct ModelConfig {
    pub l: usize,
    pub dims: BlockDims,
    pub t_max: usize,
    pub placement: Placement,
    pub attention: AttentionMode,
    pub activation: Activation,
    pub hyper: NormHyper,
    /// Gaussian std for projections and embeddings (γ starts at 1, head at 0).
    pub init_std: f64,
    pub refresh_interval: u64,
}

impl ModelConfig {
    pub fn new(l: usize, dims: BlockDims, t_max: usize, placement: Placement) -> Self {
        ModelConfig {
            l,
            dims,
            t_max,
            placement,
            attention: AttentionMode::CausalSoftmax,
            activation: Activation::Relu,
            hyper: NormHyper::default(),
            init_std: 0.02,
            refresh_interval: 100,
        }
    }

    pub fn settings(&self) -> BlockSettings {
        BlockSettings::new(self.placement)
            .with_attention(self.attention)
            .with_activation(self.activation)
    }
}

/// Per-block Frobenius snapshot for the BHyT parallel path.
#[derive(Debug, Clone, Copy)]
struct FrobSnapshot {
    frob_sq: f64,
    computed_at_step: u64,
}

#[derive(Debug, Clone)]
pub struct DecoderLm {
    pub cfg: ModelConfig,
    pub embed: Tensor,
    pub pos: Tensor,
    pub blocks: Vec<BlockWeights>,
    pub final_norm: NormConfig,
    pub head: Tensor,
    snapshots: Vec<FrobSnapshot>,
}

/// Forward intermediates of a whole model pass.
pub struct ModelTrace {
    pub x0: Tensor,
    pub block_traces: Vec<BlockTrace>,
    pub final_cache: NormCache,
    pub normed: Tensor,
    pub logits: Tensor,
    /// Softmax probabilities per position (needed by the loss backward).
    pub probs: Tensor,
    pub moment_reductions: u64,
}

/// Gradients for every model parameter, in model layout.
#[derive(Debug, Clone)]
pub struct ModelGrads {
    pub d_embed: Tensor,
    pub d_pos: Tensor,
    pub blocks: Vec<BlockGrads>,
    pub d_final: NormParamGrads,
    pub d_head: Tensor,
}

impl ModelGrads {
    /// `self += scale · other`, used for batch averaging.
    pub fn accumulate(&mut self, other: &ModelGrads, scale: f64) {
        let add = |dst: &mut Tensor, src: &Tensor| {
            for (d, s) in dst.data_mut().iter_mut().zip(src.data()) {
                *d += scale * s;
            }
        };
        add(&mut self.d_embed, &other.d_embed);
        add(&mut self.d_pos, &other.d_pos);
        for (a, b) in self.blocks.iter_mut().zip(&other.blocks) {
            a.accumulate(b, scale);
        }
        self.d_final.accumulate(&other.d_final, scale);
        add(&mut self.d_head, &other.d_head);
    }
}

/// Classifies parameters for weight-decay masking.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Projection matrices, embeddings and the head: weight decay applies.
    Matrix,
    /// Norm scales γ and DyT scalars: never decayed.
    NormParam,
}

impl DecoderLm {
    pub fn new(cfg: ModelConfig, rng: &mut RngStream) -> Result<Self> {
        let d = cfg.dims.d;
        let embed = crate::numerics::gaussian(&[VOCAB, d], rng, cfg.init_std)?;
        let pos = crate::numerics::gaussian(&[cfg.t_max, d], rng, cfg.init_std)?;
        let mut blocks = Vec::with_capacity(cfg.l);
        for layer in 1..=cfg.l {
            blocks.push(BlockWeights::random(
                cfg.dims,
                cfg.placement,
                layer,
                &cfg.hyper,
                cfg.init_std,
                rng,
            )?);
        }
        let final_norm = final_norm_config(&cfg)?;
        // Zero-init head: uniform logits at step 0.
        let head = Tensor::zeros(&[d, VOCAB])?;
        let mut model = DecoderLm {
            cfg,
            embed,
            pos,
            blocks,
            final_norm,
            head,
            snapshots: Vec::new(),
        };
        model.refresh_snapshots(0)?;
        Ok(model)
    }

    /// Recompute every block's `‖W_V·W_O‖_F²` snapshot (step 0 or when the
    /// refresh policy fires).
    pub fn refresh_snapshots(&mut self, step: u64) -> Result<()> {
        let mut snaps = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            snaps.push(FrobSnapshot {
                frob_sq: b.value_path_frobenius_sq()?,
                computed_at_step: step,
            });
        }
        self.snapshots = snaps;
        Ok(())
    }

    /// Refresh snapshots iff the policy fires at `step`.
    pub fn maybe_refresh_snapshots(&mut self, step: u64, policy: RefreshPolicy) -> Result<bool> {
        if policy.fires_at(step) {
            self.refresh_snapshots(step)?;
            Ok(true)
        } else {
            Ok(false)
        }
    }

    pub fn snapshot_step(&self) -> u64 {
        self.snapshots.first().map(|s| s.computed_at_step).unwrap_or(0)
    }

    fn injected_for_block(&self, layer: usize) -> InjectedVariance {
        if self.cfg.placement == Placement::Bhyt {
            InjectedVariance::FromFrobSnapshot(self.snapshots[layer].frob_sq)
        } else {
            InjectedVariance::FromWeights
        }
    }

    /// Embed tokens, run the stack, apply the final norm and the head.
    ///
    /// `pinned_injected`, when given, overrides each block's injected variance
    /// (finite-difference probes pin the stop-gradient scalars this way).
    pub fn forward(
        &self,
        tokens: &[usize],
        pinned_injected: Option<&[f64]>,
    ) -> Result<ModelTrace> {
        let t = tokens.len();
        let d = self.cfg.dims.d;
        if t == 0 || t > self.cfg.t_max {
            return Err(BhytError::param(
                "DecoderLm::forward",
                format!("sequence length {t} outside 1..={}", self.cfg.t_max),
            ));
        }
        let mut x0 = vec![0.0; t * d];
        for (row, &tok) in tokens.iter().enumerate() {
            if tok >= VOCAB {
                return Err(BhytError::param(
                    "DecoderLm::forward",
                    format!("token {tok} outside vocab"),
                ));
            }
            for c in 0..d {
                x0[row * d + c] = self.embed.data()[tok * d + c] + self.pos.data()[row * d + c];
            }
        }
        let x0 = Tensor::checked(vec![t, d], x0, "model/embed")?;

        let mut counter = MomentCounter::new();
        let settings = self.cfg.settings();
        let mut x = x0.clone();
        let mut block_traces = Vec::with_capacity(self.blocks.len());
        for (layer, block) in self.blocks.iter().enumerate() {
            let injected = match pinned_injected {
                Some(vals) if self.cfg.placement == Placement::Bhyt => {
                    InjectedVariance::Fixed(vals[layer])
                }
                _ => self.injected_for_block(layer),
            };
            let (out, trace) = block_forward(block, &x, settings, injected, &mut counter)?;
            x = out;
            block_traces.push(trace);
        }

        let (normed, final_cache) = norm_forward(&self.final_norm, &x, None, &mut counter)?;
        let logits = crate::numerics::matmul(&normed, &self.head)?;

        // Row-wise softmax (stable).
        let mut probs = vec![0.0; t * VOCAB];
        for row in 0..t {
            let r = logits.row(row);
            let max = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for (c, &v) in r.iter().enumerate() {
                let e = (v - max).exp();
                probs[row * VOCAB + c] = e;
                denom += e;
            }
            for c in 0..VOCAB {
                probs[row * VOCAB + c] /= denom;
            }
        }
        let probs = Tensor::checked(vec![t, VOCAB], probs, "model/softmax")?;

        Ok(ModelTrace {
            x0,
            block_traces,
            final_cache,
            normed,
            logits,
            probs,
            moment_reductions: counter.get(),
        })
    }

    /// Mean next-token cross-entropy of a forward trace against `targets`.
    pub fn loss_from_trace(&self, trace: &ModelTrace, targets: &[usize]) -> Result<f64> {
        let t = trace.logits.shape()[0];
        if targets.len() != t {
            return Err(BhytError::param(
                "DecoderLm::loss",
                format!("{} targets for {t} positions", targets.len()),
            ));
        }
        let mut loss = 0.0;
        for (row, &tgt) in targets.iter().enumerate() {
            let p = trace.probs.data()[row * VOCAB + tgt];
            loss -= p.max(1e-300).ln();
        }
        Ok(loss / t as f64)
    }

    pub fn loss(&self, tokens: &[usize], targets: &[usize]) -> Result<f64> {
        let trace = self.forward(tokens, None)?;
        self.loss_from_trace(&trace, targets)
    }

    /// Full reverse pass from the cross-entropy loss. Returns
    /// (loss, grads, exact-moment reductions of the forward).
    pub fn loss_and_grads(
        &self,
        tokens: &[usize],
        targets: &[usize],
    ) -> Result<(f64, ModelGrads, u64)> {
        let trace = self.forward(tokens, None)?;
        let loss = self.loss_from_trace(&trace, targets)?;
        let grads = self.backward(&trace, tokens, targets)?;
        Ok((loss, grads, trace.moment_reductions))
    }

    /// Backward through head, final norm, the stack and the embeddings.
    pub fn backward(
        &self,
        trace: &ModelTrace,
        tokens: &[usize],
        targets: &[usize],
    ) -> Result<ModelGrads> {
        let t = trace.logits.shape()[0];
        let d = self.cfg.dims.d;
        let settings = self.cfg.settings();

        // dL/dlogits = (softmax − onehot)/T
        let mut g_logits = trace.probs.data().to_vec();
        for (row, &tgt) in targets.iter().enumerate() {
            g_logits[row * VOCAB + tgt] -= 1.0;
        }
        let inv_t = 1.0 / t as f64;
        g_logits.iter_mut().for_each(|v| *v *= inv_t);
        let g_logits = Tensor::checked(vec![t, VOCAB], g_logits, "model/backward")?;

        // logits = normed · head
        let d_head =
            crate::numerics::matmul(&crate::numerics::transpose(&trace.normed)?, &g_logits)?;
        let g_normed =
            crate::numerics::matmul(&g_logits, &crate::numerics::transpose(&self.head)?)?;

        // final norm
        let final_grads: NormGrads =
            norm_backward(&self.final_norm, &trace.final_cache, &g_normed)?;
        let mut g_x = final_grads.d_input.clone();

        // blocks in reverse
        let mut block_grads: Vec<BlockGrads> = Vec::with_capacity(self.blocks.len());
        for (block, btrace) in self.blocks.iter().zip(&trace.block_traces).rev() {
            let (grads, g_in) = block_backward(block, btrace, settings, &g_x)?;
            block_grads.push(grads);
            g_x = g_in;
        }
        block_grads.reverse();

        // x0[row] = embed[token_row] + pos[row]: scatter-add into both tables.
        let mut d_embed = vec![0.0; VOCAB * d];
        let mut d_pos = vec![0.0; self.cfg.t_max * d];
        for (row, &tok) in tokens.iter().enumerate() {
            for c in 0..d {
                let g = g_x.data()[row * d + c];
                d_embed[tok * d + c] += g;
                d_pos[row * d + c] += g;
            }
        }

        Ok(ModelGrads {
            d_embed: Tensor::checked(vec![VOCAB, d], d_embed, "model/backward")?,
            d_pos: Tensor::checked(vec![self.cfg.t_max, d], d_pos, "model/backward")?,
            blocks: block_grads,
            d_final: NormParamGrads::from(&final_grads),
            d_head,
        })
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, s| n += s.len());
        n
    }

    /// Visit every parameter slice in a fixed order.
    pub fn visit_params(&self, f: &mut dyn FnMut(ParamKind, &[f64])) {
        f(ParamKind::Matrix, self.embed.data());
        f(ParamKind::Matrix, self.pos.data());
        for b in &self.blocks {
            f(ParamKind::Matrix, b.w_q.data());
            f(ParamKind::Matrix, b.w_k.data());
            f(ParamKind::Matrix, b.w_v.data());
            f(ParamKind::Matrix, b.w_o.data());
            f(ParamKind::Matrix, b.w_1.data());
            f(ParamKind::Matrix, b.w_2.data());
            f(ParamKind::NormParam, b.norm_attn.gamma.data());
            f(ParamKind::NormParam, std::slice::from_ref(&b.norm_attn.alpha_dyt));
            f(ParamKind::NormParam, b.norm_mlp.gamma.data());
            f(ParamKind::NormParam, std::slice::from_ref(&b.norm_mlp.alpha_dyt));
            if let Some(p) = &b.post_norm_attn {
                f(ParamKind::NormParam, p.gamma.data());
            }
            if let Some(p) = &b.post_norm_mlp {
                f(ParamKind::NormParam, p.gamma.data());
            }
        }
        f(ParamKind::NormParam, self.final_norm.gamma.data());
        f(ParamKind::NormParam, std::slice::from_ref(&self.final_norm.alpha_dyt));
        f(ParamKind::Matrix, self.head.data());
    }

    /// Mutable visitation in the identical order.
    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(ParamKind, &mut [f64])) {
        f(ParamKind::Matrix, self.embed.data_mut());
        f(ParamKind::Matrix, self.pos.data_mut());
        for b in &mut self.blocks {
            f(ParamKind::Matrix, b.w_q.data_mut());
            f(ParamKind::Matrix, b.w_k.data_mut());
            f(ParamKind::Matrix, b.w_v.data_mut());
            f(ParamKind::Matrix, b.w_o.data_mut());
            f(ParamKind::Matrix, b.w_1.data_mut());
            f(ParamKind::Matrix, b.w_2.data_mut());
            f(ParamKind::NormParam, b.norm_attn.gamma.data_mut());
            f(ParamKind::NormParam, std::slice::from_mut(&mut b.norm_attn.alpha_dyt));
            f(ParamKind::NormParam, b.norm_mlp.gamma.data_mut());
            f(ParamKind::NormParam, std::slice::from_mut(&mut b.norm_mlp.alpha_dyt));
            if let Some(p) = &mut b.post_norm_attn {
                f(ParamKind::NormParam, p.gamma.data_mut());
            }
            if let Some(p) = &mut b.post_norm_mlp {
                f(ParamKind::NormParam, p.gamma.data_mut());
            }
        }
        f(ParamKind::NormParam, self.final_norm.gamma.data_mut());
        f(ParamKind::NormParam, std::slice::from_mut(&mut self.final_norm.alpha_dyt));
        f(ParamKind::Matrix, self.head.data_mut());
    }

    /// Gather a grads struct into flat slices in visitation order.
    pub fn visit_grads<'a>(&self, grads: &'a ModelGrads, f: &mut dyn FnMut(&'a [f64])) {
        f(grads.d_embed.data());
        f(grads.d_pos.data());
        for g in &grads.blocks {
            f(g.d_wq.data());
            f(g.d_wk.data());
            f(g.d_wv.data());
            f(g.d_wo.data());
            f(g.d_w1.data());
            f(g.d_w2.data());
            f(g.d_norm_attn.d_gamma.data());
            f(std::slice::from_ref(&g.d_norm_attn.d_alpha_dyt));
            f(g.d_norm_mlp.d_gamma.data());
            f(std::slice::from_ref(&g.d_norm_mlp.d_alpha_dyt));
            if let Some(p) = &g.d_post_attn {
                f(p.d_gamma.data());
            }
            if let Some(p) = &g.d_post_mlp {
                f(p.d_gamma.data());
            }
        }
        f(grads.d_final.d_gamma.data());
        f(std::slice::from_ref(&grads.d_final.d_alpha_dyt));
        f(grads.d_head.data());
    }
}

/// Final pre-head normalization: same kind as the placement, exact variance.
fn final_norm_config(cfg: &ModelConfig) -> Result<NormConfig> {
    let kind = cfg.placement.norm_kind();
    let mut final_cfg = NormConfig::new(kind, cfg.dims.d, cfg.hyper.lambda_mlp)?
        .with_alpha_dyt(cfg.hyper.alpha_dyt_final)
        .with_layer_index(cfg.l.max(1))
        .with_eps(cfg.hyper.eps)
        .with_scale_grad(cfg.hyper.scale_grad)
        .with_variance_source(VarianceSource::Exact);
    final_cfg.kappa = cfg.hyper.kappa;
    final_cfg.validate()?;
    Ok(final_cfg)
}
