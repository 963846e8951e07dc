//! Train the toy model under Uniform, layerwise and inverted-layerwise rates.
//!
//! `cargo run --release --example compare_arms -- [steps] [eta] [seed]`

use std::time::Instant;

use llr_core::allocate::Assignment;
use llr_core::schedule::ScheduleConfig;
use llr_core::train::{run_training, DataConfig, LrMode, ModelConfig, OptimConfig};

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let arg = |i: usize, d: &str| args.get(i).map_or(d, String::as_str).to_owned();
    let steps: u64 = arg(0, "2000").parse().expect("steps");
    let eta: f64 = arg(1, "1e-2").parse().expect("eta");
    let seed: u64 = arg(2, "0").parse().expect("seed");

    let model = ModelConfig { seed, ..ModelConfig::default() };
    let data = DataConfig { seed, ..DataConfig::default() };
    let uniform = OptimConfig {
        eta,
        schedule: ScheduleConfig::for_steps(steps),
        ..OptimConfig::default()
    };
    let llr = OptimConfig { mode: LrMode::Llr, ..uniform };
    let mut inverse = llr;
    inverse.plan.assignment = Assignment::LinearInverse;

    for (name, opt) in [("uniform", uniform), ("llr", llr), ("llr-inv", inverse)] {
        let t = Instant::now();
        let run = run_training(&model, &opt, &data, steps).expect("training");
        println!(
            "{name:8} final {:.5} mean alpha std {:.4} ({:.0}s)",
            run.final_loss,
            run.mean_alpha_std(),
            t.elapsed().as_secs_f64()
        );
    }
}
