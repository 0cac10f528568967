use bhyt::bench::{bench_forward_with_setup, BenchSetup};
use bhyt::block::{BlockDims, Placement};

fn main() {
    let dims = BlockDims { d: 512, d_v: 64, d_m: 128 };
    let setup = BenchSetup::new(dims, 16, 1024, 1024, 7).unwrap();
    for p in [Placement::DyT, Placement::Bhyt, Placement::PreLn, Placement::PeriLn, Placement::Lns] {
        let r = bench_forward_with_setup(&setup, p, 30, 5).unwrap();
        println!("{:10} median {:.2}ms p10 {:.2} p90 {:.2} warn={:?}",
            r.placement, r.median_s*1e3, r.p10_s*1e3, r.p90_s*1e3, r.timer_warning.is_some());
    }
}
