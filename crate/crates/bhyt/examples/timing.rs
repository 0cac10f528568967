use bhyt::block::Placement;
use bhyt::train::{train, TrainConfig};
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let l: usize = args[1].parse().unwrap();
    let d: usize = args[2].parse().unwrap();
    let t: usize = args[3].parse().unwrap();
    let b: usize = args[4].parse().unwrap();
    let steps: u64 = args[5].parse().unwrap();
    let mut cfg = TrainConfig::new(Placement::Bhyt, l, d, t, steps);
    cfg.batch_size = b;
    cfg.seed = 1;
    let start = Instant::now();
    let r = train(&cfg).unwrap();
    println!(
        "L={l} d={d} T={t} B={b}: {steps} steps in {:.1}s, init {:.3} -> final train {:.3}, eval {:.3}, median step {:.1}ms",
        start.elapsed().as_secs_f64(), r.initial_eval_loss, r.final_train_loss, r.final_eval_loss,
        r.median_step_time_s * 1e3
    );
}
