//! TEST baseline vs. one-pass adaptation on the synthetic benchmark.
//!
//! Extra arguments are `key=value` config overrides, e.g.
//! `cargo run --release --example one_pass_benchmark -- severity=5 lambda=0.5`.

use std::time::Instant;

use ttac::bench;
use ttac::config::ExperimentConfig;
use ttac::report::LossSummary;

fn main() -> ttac::Result<()> {
    let mut cfg = ExperimentConfig::default();
    let mut seeds = vec![0u64];
    for arg in std::env::args().skip(1) {
        let (k, v) = arg.split_once('=').expect("arguments are key=value");
        if k == "seeds" {
            seeds = (0..v.parse::<u64>().expect("seed count")).collect();
        } else {
            cfg = cfg.with_override(k, v)?;
        }
    }
    for seed in seeds {
        let t = Instant::now();
        let prepared = bench::prepare(&cfg.bench, seed)?;
        let prep_s = t.elapsed().as_secs_f64();
        let mut test_cfg = cfg.ttac.clone();
        test_cfg.adapt = false;
        let baseline = bench::target_error(&prepared, &test_cfg)?;

        let mut run_cfg = cfg.ttac.clone();
        run_cfg.seed = seed;
        let t = Instant::now();
        let out = bench::adapt(&prepared, &run_cfg)?;
        let err = ttac::report::final_error(&out.log)?.unwrap();
        let loss = LossSummary::from_steps(&out.steps);
        println!(
            "seed {seed}: source holdout {:.2}%  TEST {baseline:.2}%  TTAC {err:.2}%  (prep {prep_s:.1}s, adapt {:.1}s, pass {:.2}, loss {:.3?} -> {:.3?})",
            100.0 * prepared.pretrain.holdout_accuracy,
            t.elapsed().as_secs_f64(),
            loss.mean_pass_fraction.unwrap_or(0.0),
            loss.first_mean_total,
            loss.last_mean_total,
        );
    }
    Ok(())
}
