//! Optimizers and the learning-rate schedule.

use crate::model::{DecoderLm, ModelGrads, ParamKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum OptimizerKind {
    Sgd,
    AdamW,
}

/// AdamW with decoupled weight decay (β₁ = 0.9, β₂ = 0.999, ε = 1e-8).
/// Norm parameters (γ, α_DyT) are excluded from decay.
#[derive(Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind) -> Self {
        Optimizer {
            kind,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step(&mut self, model: &mut DecoderLm, grads: &ModelGrads, lr: f64, weight_decay: f64) {
        // Flatten gradients in visitation order.
        let mut flat: Vec<&[f64]> = Vec::new();
        model.visit_grads(grads, &mut |s| flat.push(s));

        if self.m.is_empty() {
            self.m = flat.iter().map(|s| vec![0.0; s.len()]).collect();
            self.v = flat.iter().map(|s| vec![0.0; s.len()]).collect();
        }
        self.t += 1;

        let kind = self.kind;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        let (m, v) = (&mut self.m, &mut self.v);

        let mut slot = 0usize;
        model.visit_params_mut(&mut |pk, params| {
            let g = flat[slot];
            debug_assert_eq!(g.len(), params.len(), "grad/param layout mismatch");
            let decay = if pk == ParamKind::Matrix { weight_decay } else { 0.0 };
            match kind {
                OptimizerKind::Sgd => {
                    for (p, &gi) in params.iter_mut().zip(g) {
                        *p -= lr * (gi + decay * *p);
                    }
                }
                OptimizerKind::AdamW => {
                    let ms = &mut m[slot];
                    let vs = &mut v[slot];
                    for i in 0..params.len() {
                        ms[i] = b1 * ms[i] + (1.0 - b1) * g[i];
                        vs[i] = b2 * vs[i] + (1.0 - b2) * g[i] * g[i];
                        let m_hat = ms[i] / bc1;
                        let v_hat = vs[i] / bc2;
                        params[i] -= lr * (m_hat / (v_hat.sqrt() + eps) + decay * params[i]);
                    }
                }
            }
            slot += 1;
        });
    }
}

/// Linear warmup to `peak`, then cosine decay to `min_ratio · peak`.
pub fn lr_at(step: u64, total_steps: u64, peak: f64, warmup_ratio: f64, min_ratio: f64) -> f64 {
    let warmup = ((total_steps as f64) * warmup_ratio).floor() as u64;
    if warmup > 0 && step < warmup {
        return peak * (step + 1) as f64 / warmup as f64;
    }
    let denom = (total_steps.saturating_sub(warmup)).max(1) as f64;
    let progress = (step.saturating_sub(warmup)) as f64 / denom;
    let cos = 0.5 * (1.0 + (std::f64::consts::PI * progress.min(1.0)).cos());
    peak * (min_ratio + (1.0 - min_ratio) * cos)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_shape() {
        let peak = 1e-3;
        // warmup 10% of 100 steps
        assert!((lr_at(0, 100, peak, 0.1, 0.1) - peak / 10.0).abs() < 1e-18);
        assert!((lr_at(9, 100, peak, 0.1, 0.1) - peak).abs() < 1e-18);
        // cosine floor: min ratio × peak at the end
        let end = lr_at(100, 100, peak, 0.1, 0.1);
        assert!((end - 0.1 * peak).abs() < 1e-12);
        // monotone decay after warmup
        let a = lr_at(20, 100, peak, 0.1, 0.1);
        let b = lr_at(60, 100, peak, 0.1, 0.1);
        assert!(a > b && b > end - 1e-15);
    }
}
