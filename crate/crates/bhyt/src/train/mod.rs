//! Tiny-scale language-model training loop: cross-entropy next-token
//! training with warmup + cosine schedule, periodic layer-statistics logging,
//! divergence detection and the estimator refresh cadence.

mod corpus;
mod gradcheck;
mod optim;

pub use corpus::{bundled_corpus_path, Corpus, TRAIN_FRACTION};
pub use gradcheck::{grad_check_model, GradCheckReport};
pub use optim::{lr_at, Optimizer, OptimizerKind};

use crate::activation::Activation;
use crate::block::{AttentionMode, BlockDims, NormHyper, Placement};
use crate::error::{BhytError, Result};
use crate::estimator::RefreshPolicy;
use crate::model::{DecoderLm, ModelConfig, ModelGrads};
use crate::numerics::RngStream;
use crate::stats::{mean_abs, mean_square, LayerStatsRecord, StatsSite};
use std::path::PathBuf;
use std::time::Instant;

/// Full configuration of one training run.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub l: usize,
    pub dims: BlockDims,
    pub t: usize,
    pub batch_size: usize,
    pub steps: u64,
    pub learning_rate: f64,
    pub warmup_ratio: f64,
    pub weight_decay: f64,
    pub min_lr_ratio: f64,
    pub optimizer: OptimizerKind,
    pub placement: Placement,
    pub activation: Activation,
    pub hyper: NormHyper,
    pub seed: u64,
    pub stats_log_interval: u64,
    pub refresh_interval: u64,
    pub eval_interval: u64,
    pub eval_windows: usize,
    pub init_std: f64,
    pub corpus_path: Option<PathBuf>,
    pub run_id: String,
}

impl TrainConfig {
    pub fn new(placement: Placement, l: usize, d: usize, t: usize, steps: u64) -> Self {
        TrainConfig {
            l,
            dims: BlockDims { d, d_v: d, d_m: 2 * d },
            t,
            batch_size: 4,
            steps,
            learning_rate: 1e-3,
            warmup_ratio: 0.1,
            weight_decay: 0.1,
            min_lr_ratio: 0.1,
            optimizer: OptimizerKind::AdamW,
            placement,
            activation: Activation::Relu,
            hyper: NormHyper::default(),
            seed: 0,
            stats_log_interval: 0,
            refresh_interval: 100,
            eval_interval: 0,
            eval_windows: 8,
            init_std: 0.02,
            corpus_path: None,
            run_id: placement.name().to_string(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps < 1 && self.stats_log_interval == 0 {
            // steps == 0 is allowed: the report then carries only the initial eval.
        }
        if !(0.0..=1.0).contains(&self.warmup_ratio) {
            return Err(BhytError::param(
                "TrainConfig",
                format!("warmup_ratio {} outside [0,1]", self.warmup_ratio),
            ));
        }
        if self.batch_size == 0 || self.t == 0 || self.l == 0 {
            return Err(BhytError::param(
                "TrainConfig",
                "batch_size, t and l must be ≥ 1".to_string(),
            ));
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        let mut cfg = ModelConfig::new(self.l, self.dims, self.t, self.placement);
        cfg.attention = AttentionMode::CausalSoftmax;
        cfg.activation = self.activation;
        cfg.hyper = self.hyper;
        cfg.init_std = self.init_std;
        cfg.refresh_interval = self.refresh_interval;
        cfg
    }
}

/// Everything a finished (or halted) run reports.
#[derive(Debug, Clone, serde::Serialize)]
pub struct TrainReport {
    pub run_id: String,
    pub steps_run: u64,
    pub train_losses: Vec<f64>,
    pub eval_losses: Vec<(u64, f64)>,
    pub initial_eval_loss: f64,
    pub final_train_loss: f64,
    pub final_eval_loss: f64,
    pub final_perplexity: f64,
    pub diverged: bool,
    pub diverged_at_step: Option<u64>,
    pub layer_stats: Vec<LayerStatsRecord>,
    pub moment_reductions_per_step: u64,
    pub wall_time_s: f64,
    pub median_step_time_s: f64,
    pub init_scheme: String,
}

impl TrainReport {
    /// The deterministic payload: everything except wall-clock timings, which
    /// cannot be bit-stable across runs.
    pub fn deterministic_digest(&self) -> String {
        format!(
            "{:?}|{:?}|{}|{}|{:?}|{:?}|{}",
            self.train_losses,
            self.eval_losses,
            self.initial_eval_loss,
            self.final_eval_loss,
            self.diverged,
            self.diverged_at_step,
            self.moment_reductions_per_step,
        )
    }
}

fn eval_loss(model: &DecoderLm, windows: &[(Vec<usize>, Vec<usize>)]) -> Result<f64> {
    let mut total = 0.0;
    for (tokens, targets) in windows {
        total += model.loss(tokens, targets)?;
    }
    Ok(total / windows.len() as f64)
}

fn collect_layer_stats(
    model: &DecoderLm,
    tokens: &[usize],
    run_id: &str,
    step: u64,
    out: &mut Vec<LayerStatsRecord>,
) -> Result<()> {
    // Diagnostic forward; its reductions are not part of the training path.
    let trace = model.forward(tokens, None)?;
    for (layer, bt) in trace.block_traces.iter().enumerate() {
        let exact = mean_square(&bt.x_prime);
        for site in StatsSite::ALL {
            let tensor = match site {
                StatsSite::PostAttn => &bt.h_attn,
                StatsSite::PostMlp => &bt.h_mlp,
                StatsSite::ResidualStream => &bt.x_out,
            };
            out.push(LayerStatsRecord {
                run_id: run_id.to_string(),
                step,
                layer: layer + 1,
                site,
                mean_abs: mean_abs(tensor),
                variance: mean_square(tensor),
                injected_variance: bt.injected_var,
                exact_variance: if site == StatsSite::PostAttn {
                    Some(exact)
                } else {
                    None
                },
            });
        }
    }
    Ok(())
}

/// Run one training job. Divergence (non-finite loss or loss above 10× the
/// initial value) halts gracefully, preserving partial logs.
pub fn train(cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    let corpus = match &cfg.corpus_path {
        Some(p) => Corpus::load(p)?,
        None => Corpus::load_bundled()?,
    };
    let root = RngStream::new(cfg.seed);
    let mut init_rng = root.split_labeled("init");
    let mut batch_rng = root.split_labeled("batches");

    let mut model = DecoderLm::new(cfg.model_config(), &mut init_rng)?;
    let mut optimizer = Optimizer::new(cfg.optimizer);
    let policy = RefreshPolicy::new(cfg.refresh_interval.max(1))?;

    let eval_set = corpus.eval_windows(cfg.t, cfg.eval_windows)?;
    let initial_eval_loss = eval_loss(&model, &eval_set)?;

    let mut train_losses = Vec::with_capacity(cfg.steps as usize);
    let mut eval_losses = Vec::new();
    let mut layer_stats = Vec::new();
    let mut step_times = Vec::with_capacity(cfg.steps as usize);
    let mut diverged = false;
    let mut diverged_at_step = None;
    let mut moment_reductions_per_step = 0;

    let started = Instant::now();
    let mut steps_run = 0;

    'steps: for step in 0..cfg.steps {
        let step_started = Instant::now();
        if step > 0 {
            model.maybe_refresh_snapshots(step, policy)?;
        }

        // Fixed-order batch accumulation.
        let mut batch_loss = 0.0;
        let mut grads: Option<ModelGrads> = None;
        let mut reductions = 0;
        let inv_b = 1.0 / cfg.batch_size as f64;
        for _ in 0..cfg.batch_size {
            let (tokens, targets) = corpus.sample_train_window(cfg.t, &mut batch_rng)?;
            match model.loss_and_grads(&tokens, &targets) {
                Ok((loss, g, r)) => {
                    batch_loss += loss * inv_b;
                    reductions = r;
                    match &mut grads {
                        Some(acc) => acc.accumulate(&g, inv_b),
                        None => {
                            let mut g0 = g;
                            scale_grads(&mut g0, inv_b);
                            grads = Some(g0);
                        }
                    }
                }
                Err(BhytError::NonFinite { site }) => {
                    log::warn!("run {}: non-finite value at {site}, halting", cfg.run_id);
                    diverged = true;
                    diverged_at_step = Some(step);
                    break 'steps;
                }
                Err(e) => return Err(e),
            }
        }
        moment_reductions_per_step = reductions;

        let lr = lr_at(step, cfg.steps, cfg.learning_rate, cfg.warmup_ratio, cfg.min_lr_ratio);
        optimizer.step(&mut model, grads.as_ref().expect("batch_size ≥ 1"), lr, cfg.weight_decay);
        // Parameter updates can overflow at hostile learning rates; surface
        // that as divergence rather than a hard error.
        if param_check(&model).is_err() {
            diverged = true;
            diverged_at_step = Some(step);
            train_losses.push(batch_loss);
            steps_run = step + 1;
            break 'steps;
        }

        train_losses.push(batch_loss);
        steps_run = step + 1;
        step_times.push(step_started.elapsed().as_secs_f64());

        // Divergence check every 10 steps.
        if step % 10 == 0 && (!batch_loss.is_finite() || batch_loss > 10.0 * initial_eval_loss) {
            diverged = true;
            diverged_at_step = Some(step);
            break 'steps;
        }

        if cfg.eval_interval > 0 && (step + 1) % cfg.eval_interval == 0 {
            eval_losses.push((step + 1, eval_loss(&model, &eval_set)?));
        }
        if cfg.stats_log_interval > 0 && step % cfg.stats_log_interval == 0 {
            let (tokens, _) = corpus.sample_train_window(cfg.t, &mut batch_rng)?;
            collect_layer_stats(&model, &tokens, &cfg.run_id, step, &mut layer_stats)?;
        }
    }

    let final_eval_loss = if diverged {
        f64::NAN
    } else {
        let l = eval_loss(&model, &eval_set)?;
        eval_losses.push((steps_run, l));
        l
    };
    let wall_time_s = started.elapsed().as_secs_f64();
    let median_step_time_s = median(&mut step_times);

    Ok(TrainReport {
        run_id: cfg.run_id.clone(),
        steps_run,
        final_train_loss: train_losses.last().copied().unwrap_or(initial_eval_loss),
        train_losses,
        eval_losses,
        initial_eval_loss,
        final_eval_loss,
        final_perplexity: final_eval_loss.exp(),
        diverged,
        diverged_at_step,
        layer_stats,
        moment_reductions_per_step,
        wall_time_s,
        median_step_time_s,
        init_scheme: format!(
            "projections/embeddings N(0, {}²), gamma = 1, zero-init head",
            cfg.init_std
        ),
    })
}

fn scale_grads(g: &mut ModelGrads, c: f64) {
    let scale = |t: &mut crate::numerics::Tensor| t.data_mut().iter_mut().for_each(|v| *v *= c);
    scale(&mut g.d_embed);
    scale(&mut g.d_pos);
    for b in &mut g.blocks {
        scale(&mut b.d_wq);
        scale(&mut b.d_wk);
        scale(&mut b.d_wv);
        scale(&mut b.d_wo);
        scale(&mut b.d_w1);
        scale(&mut b.d_w2);
        scale(&mut b.d_norm_attn.d_gamma);
        b.d_norm_attn.d_alpha_dyt *= c;
        scale(&mut b.d_norm_mlp.d_gamma);
        b.d_norm_mlp.d_alpha_dyt *= c;
        if let Some(p) = &mut b.d_post_attn {
            scale(&mut p.d_gamma);
            p.d_alpha_dyt *= c;
        }
        if let Some(p) = &mut b.d_post_mlp {
            scale(&mut p.d_gamma);
            p.d_alpha_dyt *= c;
        }
    }
    scale(&mut g.d_final.d_gamma);
    g.d_final.d_alpha_dyt *= c;
    scale(&mut g.d_head);
}

fn param_check(model: &DecoderLm) -> Result<()> {
    let mut bad = false;
    model.visit_params(&mut |_, s| {
        if s.iter().any(|v| !v.is_finite()) {
            bad = true;
        }
    });
    if bad {
        Err(BhytError::NonFinite {
            site: "optimizer/params".to_string(),
        })
    } else {
        Ok(())
    }
}

fn median(xs: &mut [f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    xs[xs.len() / 2]
}
