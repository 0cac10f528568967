//! Forward-pass and generation microbenchmarks.
//!
//! This module owns a lean 32-bit float path with approximated `tanh`/`exp`
//! kernels, reflecting realistic inference kernels where elementwise maps are
//! cheap relative to reductions. Correctness tests stay on the 64-bit path;
//! here the contract is the paired design: every placement in a comparison
//! consumes bit-identical inputs and projection weights, differing only in
//! its normalization parameters.
//!
//! The BHyT `‖W_V·W_O‖_F²` snapshot is computed at model-build time (weights
//! are fixed during a bench), so the timed loop pays one reduction per block
//! and two bounded-tanh passes, never a second statistics pass.

use crate::activation::Activation;
use crate::block::{BlockDims, Placement};
use crate::error::{BhytError, Result};
use crate::numerics::{RngStream, Tensor};
use std::time::Instant;

/// Result of one benchmark run.
#[derive(Debug, Clone, serde::Serialize)]
pub struct BenchResult {
    pub placement: String,
    pub t: usize,
    pub d: usize,
    pub l: usize,
    pub iterations: usize,
    pub warmup: usize,
    pub median_s: f64,
    pub p10_s: f64,
    pub p90_s: f64,
    /// Generation mode only.
    pub tokens_per_s: Option<f64>,
    /// Set when the timer resolution is coarser than 1% of the median.
    pub timer_warning: Option<String>,
}

// ---------------------------------------------------------------------------
// f32 kernels
// ---------------------------------------------------------------------------

/// Rational tanh approximation: |error| < 1e-6 for |x| ≤ 2 and < 1e-4
/// everywhere (Padé tail and clamp boundary).
#[inline(always)]
fn fast_tanh(x: f32) -> f32 {
    if x > 4.97 {
        return 1.0;
    }
    if x < -4.97 {
        return -1.0;
    }
    let t = x * x;
    let p = x * (135135.0 + t * (17325.0 + t * (378.0 + t)));
    let q = 135135.0 + t * (62370.0 + t * (3150.0 + t * 28.0));
    p / q
}

/// exp via 2^n · poly(r) decomposition; inputs are ≤ 0 after the softmax
/// max-subtraction, so only underflow needs guarding.
#[inline(always)]
fn fast_exp(x: f32) -> f32 {
    if x < -87.0 {
        return 0.0;
    }
    let y = x * std::f32::consts::LOG2_E;
    let n = y.round();
    let z = (y - n) * std::f32::consts::LN_2;
    let p = 1.0
        + z * (1.0 + z * (0.5 + z * (1.0 / 6.0 + z * (1.0 / 24.0 + z * (1.0 / 120.0)))));
    let bits = (((n as i32) + 127) << 23) as u32;
    f32::from_bits(bits) * p
}

/// `out = a[m×k] · b[k×n]`, i-k-j order, f32.
fn matmul_f32(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
    out[..m * n].iter_mut().for_each(|v| *v = 0.0);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let o_row = &mut out[i * n..(i + 1) * n];
        for (kk, &aik) in a_row.iter().enumerate() {
            let b_row = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in o_row.iter_mut().zip(b_row) {
                *o += aik * bv;
            }
        }
    }
}

#[inline(always)]
fn apply_activation_f32(act: Activation, u: f32) -> f32 {
    match act {
        Activation::Identity => u,
        Activation::Relu => u.max(0.0),
        Activation::Tanh => fast_tanh(u),
        Activation::Silu => u / (1.0 + fast_exp(-u)),
    }
}

// ---------------------------------------------------------------------------
// Bench model
// ---------------------------------------------------------------------------

struct BenchBlock {
    w_q: Vec<f32>,
    w_k: Vec<f32>,
    w_v: Vec<f32>,
    w_o: Vec<f32>,
    w_1: Vec<f32>,
    w_2: Vec<f32>,
    gamma_attn: Vec<f32>,
    gamma_mlp: Vec<f32>,
    gamma_post_attn: Vec<f32>,
    gamma_post_mlp: Vec<f32>,
    /// `‖W_V·W_O‖_F²`, loaded once with the model (BHyT parallel path).
    frob_sq: f32,
    /// LNS depth scalar `1/√ℓ`.
    lns_scale: f32,
}

/// A placement-specialized f32 model over shared projection weights.
pub struct BenchModel {
    placement: Placement,
    dims: BlockDims,
    l: usize,
    blocks: Vec<BenchBlock>,
    embed: Vec<f32>,
    pos: Vec<f32>,
    head: Vec<f32>,
    final_gamma: Vec<f32>,
    lambda_attn: f32,
    lambda_mlp: f32,
    kappa: f32,
    eps: f32,
    alpha_dyt_attn: f32,
    alpha_dyt_mlp: f32,
    alpha_dyt_final: f32,
    final_lns_scale: f32,
    activation: Activation,
}

/// Scratch buffers reused across iterations (no allocation in the timed loop).
pub struct Workspace {
    x: Vec<f32>,
    z: Vec<f32>,
    q: Vec<f32>,
    k: Vec<f32>,
    v: Vec<f32>,
    ctx: Vec<f32>,
    h: Vec<f32>,
    u: Vec<f32>,
    act: Vec<f32>,
    row_scale: Vec<f32>,
    logits_row: Vec<f32>,
}

impl Workspace {
    /// First `n` elements of the residual stream (the forward's output).
    pub fn residual_stream(&self, n: usize) -> &[f32] {
        &self.x[..n]
    }

    pub fn new(t_max: usize, dims: BlockDims) -> Self {
        Workspace {
            x: vec![0.0; t_max * dims.d],
            z: vec![0.0; t_max * dims.d],
            q: vec![0.0; t_max * dims.d_v],
            k: vec![0.0; t_max * dims.d_v],
            v: vec![0.0; t_max * dims.d_v],
            ctx: vec![0.0; t_max * dims.d_v],
            h: vec![0.0; t_max * dims.d],
            u: vec![0.0; t_max * dims.d_m],
            act: vec![0.0; t_max * dims.d_m],
            row_scale: vec![0.0; t_max],
            logits_row: vec![0.0; crate::model::VOCAB],
        }
    }
}

/// Shared, placement-agnostic master state of one benchmark comparison:
/// projection weights, embeddings and the input are drawn once per seed and
/// reused bit-identically by every placement.
pub struct BenchSetup {
    pub dims: BlockDims,
    pub l: usize,
    pub t: usize,
    raw_blocks: Vec<[Tensor; 6]>,
    embed: Tensor,
    pos: Tensor,
    head: Tensor,
    input: Tensor,
    t_max: usize,
}

fn cast(t: &Tensor) -> Vec<f32> {
    t.data().iter().map(|&v| v as f32).collect()
}

impl BenchSetup {
    pub fn new(dims: BlockDims, l: usize, t: usize, t_max: usize, seed: u64) -> Result<Self> {
        let mut rng = RngStream::new(seed);
        let BlockDims { d, d_v, d_m } = dims;
        let sd = 1.0 / (d as f64).sqrt();
        let sdv = 1.0 / (d_v as f64).sqrt();
        let sdm = 1.0 / (d_m as f64).sqrt();
        let mut raw_blocks = Vec::with_capacity(l);
        for _ in 0..l {
            raw_blocks.push([
                crate::numerics::gaussian(&[d, d_v], &mut rng, sd)?,
                crate::numerics::gaussian(&[d, d_v], &mut rng, sd)?,
                crate::numerics::gaussian(&[d, d_v], &mut rng, sd)?,
                crate::numerics::gaussian(&[d_v, d], &mut rng, sdv)?,
                crate::numerics::gaussian(&[d, d_m], &mut rng, sd)?,
                crate::numerics::gaussian(&[d_m, d], &mut rng, sdm)?,
            ]);
        }
        Ok(BenchSetup {
            dims,
            l,
            t,
            embed: crate::numerics::gaussian(&[crate::model::VOCAB, d], &mut rng, 0.02)?,
            pos: crate::numerics::gaussian(&[t_max.max(t), d], &mut rng, 0.02)?,
            head: crate::numerics::gaussian(&[d, crate::model::VOCAB], &mut rng, 0.02)?,
            input: crate::numerics::gaussian(&[t, d], &mut rng, 1.0)?,
            raw_blocks,
            t_max: t_max.max(t),
        })
    }

    /// Specialize the shared weights for one placement.
    pub fn model(&self, placement: Placement) -> BenchModel {
        let d = self.dims.d;
        let hyper = crate::block::NormHyper::default();
        let blocks = self
            .raw_blocks
            .iter()
            .enumerate()
            .map(|(i, [wq, wk, wv, wo, w1, w2])| {
                let frob = crate::numerics::frobenius_norm_sq(
                    &crate::numerics::matmul(wv, wo).expect("shapes fixed"),
                )
                .expect("finite weights") as f32;
                BenchBlock {
                    w_q: cast(wq),
                    w_k: cast(wk),
                    w_v: cast(wv),
                    w_o: cast(wo),
                    w_1: cast(w1),
                    w_2: cast(w2),
                    gamma_attn: vec![1.0; d],
                    gamma_mlp: vec![1.0; d],
                    gamma_post_attn: vec![1.0; d],
                    gamma_post_mlp: vec![1.0; d],
                    frob_sq: frob,
                    lns_scale: 1.0 / ((i + 1) as f32).sqrt(),
                }
            })
            .collect();
        BenchModel {
            placement,
            dims: self.dims,
            l: self.l,
            blocks,
            embed: cast(&self.embed),
            pos: cast(&self.pos),
            head: cast(&self.head),
            final_gamma: vec![1.0; d],
            lambda_attn: hyper.lambda_attn as f32,
            lambda_mlp: hyper.lambda_mlp as f32,
            kappa: hyper.kappa as f32,
            eps: hyper.eps as f32,
            alpha_dyt_attn: hyper.alpha_dyt_attn as f32,
            alpha_dyt_mlp: hyper.alpha_dyt_mlp as f32,
            alpha_dyt_final: hyper.alpha_dyt_final as f32,
            final_lns_scale: 1.0 / (self.l.max(1) as f32).sqrt(),
            activation: Activation::Relu,
        }
    }

    pub fn input_f32(&self) -> Vec<f32> {
        cast(&self.input)
    }

    pub fn input_f64(&self) -> &Tensor {
        &self.input
    }

    pub fn workspace(&self) -> Workspace {
        Workspace::new(self.t_max, self.dims)
    }

    /// The same shared projections as 64-bit reference blocks, for
    /// cross-checking the f32 path against the exact implementation.
    pub fn reference_blocks(&self, placement: Placement) -> Result<Vec<crate::block::BlockWeights>> {
        let hyper = crate::block::NormHyper::default();
        self.raw_blocks
            .iter()
            .enumerate()
            .map(|(i, [wq, wk, wv, wo, w1, w2])| {
                let mut b = crate::block::BlockWeights::random(
                    self.dims,
                    placement,
                    i + 1,
                    &hyper,
                    0.0,
                    &mut RngStream::new(0),
                )?;
                b.w_q = wq.clone();
                b.w_k = wk.clone();
                b.w_v = wv.clone();
                b.w_o = wo.clone();
                b.w_1 = w1.clone();
                b.w_2 = w2.clone();
                Ok(b)
            })
            .collect()
    }
}

impl BenchModel {
    /// Residual-stream forward over `t` rows already present in `ws.x`.
    /// Returns a checksum so callers can black-box the result.
    fn forward_stream(&self, t: usize, ws: &mut Workspace) -> f32 {
        let d = self.dims.d;
        for li in 0..self.l {
            self.block_forward(li, t, ws);
        }
        ws.x[..t * d].iter().sum()
    }

    fn block_forward(&self, li: usize, t: usize, ws: &mut Workspace) {
        let BlockDims { d, d_v, d_m } = self.dims;
        let block = &self.blocks[li];

        // Pre-attention normalization x → z; BHyT also derives the injected
        // estimate from the same single reduction.
        let injected = self.pre_attn_norm(block, t, ws);

        // Attention: q/k/v projections, causal softmax, output projection.
        matmul_f32(&ws.z[..t * d], &block.w_q, t, d, d_v, &mut ws.q);
        matmul_f32(&ws.z[..t * d], &block.w_k, t, d, d_v, &mut ws.k);
        matmul_f32(&ws.z[..t * d], &block.w_v, t, d, d_v, &mut ws.v);
        let scale = 1.0 / (d_v as f32).sqrt();
        for row in 0..t {
            let q_row = &ws.q[row * d_v..(row + 1) * d_v];
            // causal scores into the ctx row buffer head
            let mut max = f32::NEG_INFINITY;
            for u in 0..=row {
                let k_row = &ws.k[u * d_v..(u + 1) * d_v];
                let mut dot = 0.0;
                for c in 0..d_v {
                    dot += q_row[c] * k_row[c];
                }
                let s = dot * scale;
                ws.row_scale[u] = s;
                if s > max {
                    max = s;
                }
            }
            let mut denom = 0.0;
            for u in 0..=row {
                let e = fast_exp(ws.row_scale[u] - max);
                ws.row_scale[u] = e;
                denom += e;
            }
            let inv = 1.0 / denom;
            let ctx_row = &mut ws.ctx[row * d_v..(row + 1) * d_v];
            ctx_row.iter_mut().for_each(|v| *v = 0.0);
            for u in 0..=row {
                let p = ws.row_scale[u] * inv;
                let v_row = &ws.v[u * d_v..(u + 1) * d_v];
                for (cv, &vv) in ctx_row.iter_mut().zip(v_row) {
                    *cv += p * vv;
                }
            }
        }
        matmul_f32(&ws.ctx[..t * d_v], &block.w_o, t, d_v, d, &mut ws.h);

        // Post-attention norm (PeriLn) and residual add.
        if self.placement == Placement::PeriLn {
            rms_rows(&mut ws.h, t, d, self.eps, &block.gamma_post_attn, 1.0);
        }
        for i in 0..t * d {
            ws.x[i] += ws.h[i];
        }

        // Pre-MLP normalization x' → z.
        self.pre_mlp_norm(block, t, injected, ws);

        // MLP.
        matmul_f32(&ws.z[..t * d], &block.w_1, t, d, d_m, &mut ws.u);
        for i in 0..t * d_m {
            ws.act[i] = apply_activation_f32(self.activation, ws.u[i]);
        }
        matmul_f32(&ws.act[..t * d_m], &block.w_2, t, d_m, d, &mut ws.h);

        if self.placement == Placement::PeriLn {
            rms_rows(&mut ws.h, t, d, self.eps, &block.gamma_post_mlp, 1.0);
        }
        for i in 0..t * d {
            ws.x[i] += ws.h[i];
        }
    }

    /// Normalize `ws.x → ws.z` at the attention site. Returns the BHyT
    /// injected variance estimate for the MLP site, when the placement has one.
    fn pre_attn_norm(&self, block: &BenchBlock, t: usize, ws: &mut Workspace) -> f32 {
        let d = self.dims.d;
        match self.placement {
            Placement::DyT => {
                tanh_rows_scalar(&ws.x, &mut ws.z, t, d, self.alpha_dyt_attn, &block.gamma_attn);
                0.0
            }
            Placement::PreLn | Placement::PeriLn | Placement::Lns => {
                let c = if self.placement == Placement::Lns {
                    block.lns_scale
                } else {
                    1.0
                };
                rms_normalize(&ws.x, &mut ws.z, t, d, self.eps, &block.gamma_attn, c);
                0.0
            }
            Placement::Bhyt => {
                // One reduction: per-row moments, mean reused for injection.
                let mut mean_ms = 0.0;
                for row in 0..t {
                    let r = &ws.x[row * d..(row + 1) * d];
                    let mut ms = 0.0;
                    for &v in r {
                        ms += v * v;
                    }
                    ms /= d as f32;
                    mean_ms += ms;
                    ws.row_scale[row] = self.lambda_attn / (self.kappa * (ms + self.eps).sqrt());
                }
                mean_ms /= t as f32;
                for row in 0..t {
                    let a = ws.row_scale[row];
                    let src = &ws.x[row * d..(row + 1) * d];
                    let dst = &mut ws.z[row * d..(row + 1) * d];
                    for c in 0..d {
                        dst[c] = block.gamma_attn[c] * fast_tanh(a * src[c]);
                    }
                }
                let attn_var = block.frob_sq / (t as f32 * d as f32)
                    * (self.lambda_attn / self.kappa).powi(2);
                mean_ms + attn_var
            }
            Placement::BhytStar => {
                bhyt_star_rows(
                    &ws.x,
                    &mut ws.z,
                    t,
                    d,
                    self.lambda_attn,
                    self.kappa,
                    self.eps,
                    &block.gamma_attn,
                );
                0.0
            }
        }
    }

    fn pre_mlp_norm(&self, block: &BenchBlock, t: usize, injected: f32, ws: &mut Workspace) {
        let d = self.dims.d;
        match self.placement {
            Placement::DyT => {
                tanh_rows_scalar(&ws.x, &mut ws.z, t, d, self.alpha_dyt_mlp, &block.gamma_mlp);
            }
            Placement::PreLn | Placement::PeriLn | Placement::Lns => {
                let c = if self.placement == Placement::Lns {
                    block.lns_scale
                } else {
                    1.0
                };
                rms_normalize(&ws.x, &mut ws.z, t, d, self.eps, &block.gamma_mlp, c);
            }
            Placement::Bhyt => {
                // Injected variance: no reduction here at all.
                let alpha = self.lambda_mlp / (self.kappa * (injected + self.eps).sqrt());
                tanh_rows_scalar_alpha(&ws.x, &mut ws.z, t, d, alpha, &block.gamma_mlp);
            }
            Placement::BhytStar => {
                bhyt_star_rows(
                    &ws.x,
                    &mut ws.z,
                    t,
                    d,
                    self.lambda_mlp,
                    self.kappa,
                    self.eps,
                    &block.gamma_mlp,
                );
            }
        }
    }

    /// Greedy next-token: embed `tokens`, run the stack, final norm on the
    /// last row, head projection, argmax.
    fn next_token(&self, tokens: &[usize], ws: &mut Workspace) -> usize {
        let d = self.dims.d;
        let t = tokens.len();
        for (row, &tok) in tokens.iter().enumerate() {
            for c in 0..d {
                ws.x[row * d + c] = self.embed[tok * d + c] + self.pos[row * d + c];
            }
        }
        self.forward_stream(t, ws);

        // Final pre-head norm on the last row only.
        let last = &ws.x[(t - 1) * d..t * d];
        let normed = &mut ws.z[..d];
        match self.placement {
            Placement::DyT => {
                for c in 0..d {
                    normed[c] = self.final_gamma[c] * fast_tanh(self.alpha_dyt_final * last[c]);
                }
            }
            Placement::PreLn | Placement::PeriLn | Placement::Lns => {
                let mut ms = 0.0;
                for &v in last {
                    ms += v * v;
                }
                ms /= d as f32;
                let c0 = if self.placement == Placement::Lns {
                    self.final_lns_scale
                } else {
                    1.0
                };
                let inv = c0 / (ms + self.eps).sqrt();
                for c in 0..d {
                    normed[c] = self.final_gamma[c] * last[c] * inv;
                }
            }
            Placement::Bhyt => {
                let mut ms = 0.0;
                for &v in last {
                    ms += v * v;
                }
                ms /= d as f32;
                let a = self.lambda_mlp / (self.kappa * (ms + self.eps).sqrt());
                for c in 0..d {
                    normed[c] = self.final_gamma[c] * fast_tanh(a * last[c]);
                }
            }
            Placement::BhytStar => {
                let mut mean = 0.0;
                for &v in last {
                    mean += v;
                }
                mean /= d as f32;
                let mut var = 0.0;
                for &v in last {
                    var += (v - mean) * (v - mean);
                }
                var /= d as f32;
                let a = self.lambda_mlp / (self.kappa * (var + self.eps).sqrt() + mean.abs());
                for c in 0..d {
                    normed[c] = self.final_gamma[c] * fast_tanh(a * last[c]);
                }
            }
        }

        let vocab = crate::model::VOCAB;
        for v in 0..vocab {
            let mut dot = 0.0;
            for c in 0..d {
                dot += ws.z[c] * self.head[c * vocab + v];
            }
            ws.logits_row[v] = dot;
        }
        let mut best = 0;
        for v in 1..vocab {
            if ws.logits_row[v] > ws.logits_row[best] {
                best = v;
            }
        }
        best
    }

    /// Public forward over an input slice (copied into the workspace).
    pub fn forward(&self, input: &[f32], t: usize, ws: &mut Workspace) -> f32 {
        ws.x[..t * self.dims.d].copy_from_slice(&input[..t * self.dims.d]);
        self.forward_stream(t, ws)
    }
}

fn rms_normalize(x: &[f32], z: &mut [f32], t: usize, d: usize, eps: f32, gamma: &[f32], c0: f32) {
    for row in 0..t {
        let src = &x[row * d..(row + 1) * d];
        let mut ms = 0.0;
        for &v in src {
            ms += v * v;
        }
        ms /= d as f32;
        let inv = c0 / (ms + eps).sqrt();
        let dst = &mut z[row * d..(row + 1) * d];
        for c in 0..d {
            dst[c] = gamma[c] * src[c] * inv;
        }
    }
}

/// In-place RMS normalization (PeriLn post-norm on the branch output).
fn rms_rows(h: &mut [f32], t: usize, d: usize, eps: f32, gamma: &[f32], c0: f32) {
    for row in 0..t {
        let r = &mut h[row * d..(row + 1) * d];
        let mut ms = 0.0;
        for &v in r.iter() {
            ms += v * v;
        }
        ms /= d as f32;
        let inv = c0 / (ms + eps).sqrt();
        for c in 0..d {
            r[c] = gamma[c] * r[c] * inv;
        }
    }
}

fn tanh_rows_scalar(x: &[f32], z: &mut [f32], t: usize, d: usize, alpha: f32, gamma: &[f32]) {
    for row in 0..t {
        let src = &x[row * d..(row + 1) * d];
        let dst = &mut z[row * d..(row + 1) * d];
        for c in 0..d {
            dst[c] = gamma[c] * fast_tanh(alpha * src[c]);
        }
    }
}

fn tanh_rows_scalar_alpha(x: &[f32], z: &mut [f32], t: usize, d: usize, alpha: f32, gamma: &[f32]) {
    tanh_rows_scalar(x, z, t, d, alpha, gamma);
}

fn bhyt_star_rows(
    x: &[f32],
    z: &mut [f32],
    t: usize,
    d: usize,
    lambda: f32,
    kappa: f32,
    eps: f32,
    gamma: &[f32],
) {
    for row in 0..t {
        let src = &x[row * d..(row + 1) * d];
        let mut mean = 0.0;
        for &v in src {
            mean += v;
        }
        mean /= d as f32;
        let mut var = 0.0;
        for &v in src {
            var += (v - mean) * (v - mean);
        }
        var /= d as f32;
        let alpha = lambda / (kappa * (var + eps).sqrt() + mean.abs());
        let dst = &mut z[row * d..(row + 1) * d];
        for c in 0..d {
            dst[c] = gamma[c] * fast_tanh(alpha * src[c]);
        }
    }
}

// ---------------------------------------------------------------------------
// Harness
// ---------------------------------------------------------------------------

fn percentile(sorted: &[f64], p: f64) -> f64 {
    let idx = ((sorted.len() as f64 - 1.0) * p).round() as usize;
    sorted[idx]
}

fn timer_resolution() -> f64 {
    let mut min_delta = f64::INFINITY;
    for _ in 0..32 {
        let a = Instant::now();
        let mut b = Instant::now();
        while b == a {
            b = Instant::now();
        }
        min_delta = min_delta.min((b - a).as_secs_f64());
    }
    min_delta
}

fn summarize(
    placement: Placement,
    t: usize,
    d: usize,
    l: usize,
    iterations: usize,
    warmup: usize,
    mut times: Vec<f64>,
    tokens_per_s: Option<f64>,
) -> BenchResult {
    times.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let median = percentile(&times, 0.5);
    let resolution = timer_resolution();
    let timer_warning = if median > 0.0 && resolution > 0.01 * median {
        Some(format!(
            "timer resolution {resolution:.2e}s exceeds 1% of median {median:.2e}s"
        ))
    } else {
        None
    };
    BenchResult {
        placement: placement.name().to_string(),
        t,
        d,
        l,
        iterations,
        warmup,
        median_s: median,
        p10_s: percentile(&times, 0.1),
        p90_s: percentile(&times, 0.9),
        tokens_per_s,
        timer_warning,
    }
}

/// Time `iters` forward passes (after `warmup`) of one placement over the
/// setup's shared input. Single-threaded.
pub fn bench_forward_with_setup(
    setup: &BenchSetup,
    placement: Placement,
    iters: usize,
    warmup: usize,
) -> Result<BenchResult> {
    if iters < 30 || warmup < 5 {
        return Err(BhytError::param(
            "bench_forward",
            format!("need iters ≥ 30 and warmup ≥ 5, got {iters}/{warmup}"),
        ));
    }
    let model = setup.model(placement);
    let input = setup.input_f32();
    let mut ws = setup.workspace();
    let mut sink = 0.0f32;
    for _ in 0..warmup {
        sink += model.forward(&input, setup.t, &mut ws);
    }
    let mut times = Vec::with_capacity(iters);
    for _ in 0..iters {
        let start = Instant::now();
        sink += model.forward(&input, setup.t, &mut ws);
        times.push(start.elapsed().as_secs_f64());
    }
    std::hint::black_box(sink);
    Ok(summarize(
        placement,
        setup.t,
        setup.dims.d,
        setup.l,
        iters,
        warmup,
        times,
        None,
    ))
}

/// Convenience wrapper building a fresh paired setup.
pub fn bench_forward(
    placement: Placement,
    dims: BlockDims,
    l: usize,
    t: usize,
    iters: usize,
    warmup: usize,
    seed: u64,
) -> Result<BenchResult> {
    let setup = BenchSetup::new(dims, l, t, t, seed)?;
    bench_forward_with_setup(&setup, placement, iters, warmup)
}

/// Greedy full-recompute generation: throughput in tokens/s over `new_tokens`
/// decode steps starting from a random prompt of `prompt_len` tokens.
pub fn bench_generate(
    placement: Placement,
    dims: BlockDims,
    l: usize,
    prompt_len: usize,
    new_tokens: usize,
    seed: u64,
) -> Result<BenchResult> {
    if new_tokens < 16 {
        return Err(BhytError::param(
            "bench_generate",
            format!("new_tokens = {new_tokens} must be ≥ 16"),
        ));
    }
    let t_max = prompt_len + new_tokens;
    let setup = BenchSetup::new(dims, l, prompt_len, t_max, seed)?;
    let model = setup.model(placement);
    let mut ws = setup.workspace();
    let mut rng = RngStream::new(seed ^ 0x9e37);
    let mut tokens: Vec<usize> = (0..prompt_len).map(|_| rng.below(crate::model::VOCAB)).collect();

    // Warm the caches with one decode step, then reset the sequence.
    let _ = model.next_token(&tokens, &mut ws);

    let start = Instant::now();
    let mut per_token = Vec::with_capacity(new_tokens);
    for _ in 0..new_tokens {
        let t0 = Instant::now();
        let next = model.next_token(&tokens, &mut ws);
        per_token.push(t0.elapsed().as_secs_f64());
        tokens.push(next);
    }
    let total = start.elapsed().as_secs_f64();
    let tokens_per_s = new_tokens as f64 / total;
    Ok(summarize(
        placement,
        prompt_len,
        dims.d,
        l,
        new_tokens,
        1,
        per_token,
        Some(tokens_per_s),
    ))
}

/// Generated token ids for determinism checks (greedy decode is a pure
/// function of the seed and placement).
pub fn generate_token_ids(
    placement: Placement,
    dims: BlockDims,
    l: usize,
    prompt_len: usize,
    new_tokens: usize,
    seed: u64,
) -> Result<Vec<usize>> {
    let t_max = prompt_len + new_tokens;
    let setup = BenchSetup::new(dims, l, prompt_len, t_max, seed)?;
    let model = setup.model(placement);
    let mut ws = setup.workspace();
    let mut rng = RngStream::new(seed ^ 0x9e37);
    let mut tokens: Vec<usize> = (0..prompt_len).map(|_| rng.below(crate::model::VOCAB)).collect();
    let mut out = Vec::with_capacity(new_tokens);
    for _ in 0..new_tokens {
        let next = model.next_token(&tokens, &mut ws);
        out.push(next);
        tokens.push(next);
    }
    Ok(out)
}

/// Multi-thread throughput mode: each thread runs an independent stream of
/// forwards on its own workspace. Excluded from acceptance assertions.
pub fn bench_forward_threads(
    setup: &BenchSetup,
    placement: Placement,
    iters_per_thread: usize,
    threads: usize,
) -> Result<f64> {
    if threads == 0 {
        return Err(BhytError::param("bench_forward_threads", "threads ≥ 1".to_string()));
    }
    let model = setup.model(placement);
    let input = setup.input_f32();
    let start = Instant::now();
    std::thread::scope(|scope| {
        for _ in 0..threads {
            let model = &model;
            let input = &input;
            scope.spawn(move || {
                let mut ws = Workspace::new(setup.t_max, setup.dims);
                let mut sink = 0.0f32;
                for _ in 0..iters_per_thread {
                    sink += model.forward(input, setup.t, &mut ws);
                }
                std::hint::black_box(sink);
            });
        }
    });
    let total = start.elapsed().as_secs_f64();
    Ok((iters_per_thread * threads) as f64 / total)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fast_tanh_accuracy() {
        for i in -500..=500 {
            let x = i as f32 * 0.01;
            let err = (fast_tanh(x) - x.tanh()).abs();
            let bound = if x.abs() <= 2.0 { 1e-6 } else { 1e-4 };
            assert!(err < bound, "x = {x}: err {err}");
        }
        assert_eq!(fast_tanh(10.0), 1.0);
        assert_eq!(fast_tanh(-10.0), -1.0);
    }

    #[test]
    fn fast_exp_accuracy() {
        for i in -800..=1 {
            let x = i as f32 * 0.1;
            let rel = (fast_exp(x) - x.exp()).abs() / x.exp().max(1e-30);
            assert!(rel < 1e-5, "x = {x}: rel {rel}");
        }
        assert_eq!(fast_exp(-100.0), 0.0);
    }

    #[test]
    fn matmul_f32_matches_naive() {
        let a: Vec<f32> = (0..6).map(|v| v as f32 * 0.5).collect();
        let b: Vec<f32> = (0..12).map(|v| v as f32 - 3.0).collect();
        let mut out = vec![0.0; 8];
        matmul_f32(&a, &b, 2, 3, 4, &mut out);
        for i in 0..2 {
            for j in 0..4 {
                let mut acc = 0.0;
                for k in 0..3 {
                    acc += a[i * 3 + k] * b[k * 4 + j];
                }
                assert_eq!(out[i * 4 + j], acc);
            }
        }
    }

    #[test]
    fn greedy_generation_is_deterministic() {
        let dims = BlockDims { d: 32, d_v: 16, d_m: 64 };
        let a = generate_token_ids(Placement::Bhyt, dims, 2, 8, 16, 7).unwrap();
        let b = generate_token_ids(Placement::Bhyt, dims, 2, 8, 16, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 16);
    }

    #[test]
    fn iteration_preconditions_are_enforced() {
        let dims = BlockDims { d: 16, d_v: 8, d_m: 32 };
        assert!(bench_forward(Placement::DyT, dims, 1, 8, 10, 5, 1).is_err());
        assert!(bench_forward(Placement::DyT, dims, 1, 8, 30, 2, 1).is_err());
        assert!(bench_generate(Placement::DyT, dims, 1, 8, 8, 1).is_err());
    }

    #[test]
    fn median_sits_between_percentiles() {
        let dims = BlockDims { d: 16, d_v: 8, d_m: 32 };
        let r = bench_forward(Placement::PreLn, dims, 2, 16, 30, 5, 3).unwrap();
        assert!(r.p10_s <= r.median_s && r.median_s <= r.p90_s);
        assert_eq!(r.iterations, 30);
    }
}
