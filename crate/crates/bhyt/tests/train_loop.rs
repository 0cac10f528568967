//! Training-harness behavior: initial-loss value, loss improvement,
//! determinism, divergence handling and reduction accounting.

use bhyt::block::Placement;
use bhyt::train::{train, TrainConfig};

fn quick_cfg(placement: Placement, steps: u64, seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig::new(placement, 2, 32, 32, steps);
    cfg.batch_size = 2;
    cfg.seed = seed;
    cfg.learning_rate = 1e-3;
    cfg
}

#[test]
fn zero_steps_reports_uniform_initial_loss() {
    // Zero-init head ⇒ uniform logits ⇒ eval loss = ln(256) ≈ 5.545.
    let report = train(&quick_cfg(Placement::Bhyt, 0, 1)).unwrap();
    let ln_vocab = 256f64.ln();
    assert!(
        (report.initial_eval_loss - ln_vocab).abs() < 1e-12,
        "initial eval loss {} vs ln(256) = {ln_vocab}",
        report.initial_eval_loss
    );
    assert_eq!(report.steps_run, 0);
    assert!((report.final_perplexity - report.final_eval_loss.exp()).abs() < 1e-12);
}

#[test]
fn short_run_improves_loss_every_placement() {
    for placement in [Placement::Bhyt, Placement::PreLn, Placement::DyT] {
        let report = train(&quick_cfg(placement, 150, 2)).unwrap();
        assert!(!report.diverged, "{placement:?} diverged");
        assert!(
            report.final_train_loss < report.initial_eval_loss,
            "{placement:?}: {} !< {}",
            report.final_train_loss,
            report.initial_eval_loss
        );
    }
}

#[test]
fn reports_are_deterministic_for_fixed_seed() {
    let a = train(&quick_cfg(Placement::Bhyt, 40, 3)).unwrap();
    let b = train(&quick_cfg(Placement::Bhyt, 40, 3)).unwrap();
    // Bit-identical payload; wall-clock timing fields are excluded since they
    // are physically non-deterministic.
    assert_eq!(a.deterministic_digest(), b.deterministic_digest());

    let c = train(&quick_cfg(Placement::Bhyt, 40, 4)).unwrap();
    assert_ne!(a.deterministic_digest(), c.deterministic_digest());
}

#[test]
fn hostile_learning_rate_sets_diverged_flag() {
    let mut cfg = quick_cfg(Placement::DyT, 200, 5);
    cfg.learning_rate = 5e3;
    cfg.warmup_ratio = 0.0;
    let report = train(&cfg).unwrap();
    assert!(report.diverged, "expected divergence at lr = 5e3");
    assert!(report.diverged_at_step.is_some());
    // Partial logs preserved.
    assert!(!report.train_losses.is_empty());
}

#[test]
fn moment_reduction_accounting_per_placement() {
    // Per-sequence forward: L·k + 1 for exact-final-norm kinds, L·k for DyT.
    let cases = [
        (Placement::Bhyt, 2 * 1 + 1),
        (Placement::PreLn, 2 * 2 + 1),
        (Placement::Lns, 2 * 2 + 1),
        (Placement::PeriLn, 2 * 4 + 1),
        (Placement::DyT, 0),
        (Placement::BhytStar, 2 * 2 + 1),
    ];
    for (placement, expected) in cases {
        let report = train(&quick_cfg(placement, 3, 6)).unwrap();
        assert_eq!(
            report.moment_reductions_per_step, expected,
            "{placement:?} reductions"
        );
    }
}

#[test]
fn layer_stats_are_logged_at_interval() {
    let mut cfg = quick_cfg(Placement::Bhyt, 20, 7);
    cfg.stats_log_interval = 10;
    let report = train(&cfg).unwrap();
    // Steps 0 and 10 for L = 2 layers × 3 sites.
    assert_eq!(report.layer_stats.len(), 2 * 2 * 3);
    assert!(report.layer_stats.iter().all(|r| r.mean_abs.is_finite()));
    assert!(report
        .layer_stats
        .iter()
        .all(|r| r.injected_variance.is_some()));
}
