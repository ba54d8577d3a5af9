//! Cluster update strategies (filtered, no_filter, soft_assignment) on every
//! corruption family, averaged over seeds.
//!
//! `cargo run --release --example update_strategy_ablation -- seeds=5 severity=3`

use ttac::bench;
use ttac::config::{ClusterUpdate, ExperimentConfig};
use ttac::datagen::CorruptionFamily;

fn main() -> ttac::Result<()> {
    let mut cfg = ExperimentConfig::default();
    let mut seeds = 3u64;
    for arg in std::env::args().skip(1) {
        let (k, v) = arg.split_once('=').expect("arguments are key=value");
        match k {
            "seeds" => seeds = v.parse().expect("seed count"),
            _ => cfg = cfg.with_override(k, v)?,
        }
    }
    let strategies = [
        ClusterUpdate::Filtered,
        ClusterUpdate::NoFilter,
        ClusterUpdate::SoftAssignment,
    ];
    println!(
        "{:<16} {:>8} {:>10} {:>10} {:>10}",
        "family", "TEST", "filtered", "no_filter", "soft"
    );
    for family in CorruptionFamily::ALL {
        let mut bench_cfg = cfg.bench.clone();
        bench_cfg.corruption = family;
        let mut sums = [0.0; 4];
        for seed in 0..seeds {
            let prepared = bench::prepare(&bench_cfg, seed)?;
            let mut run = cfg.ttac.clone();
            run.seed = seed;
            run.adapt = false;
            sums[0] += bench::target_error(&prepared, &run)?;
            run.adapt = true;
            for (i, s) in strategies.iter().enumerate() {
                run.cluster_update = *s;
                sums[i + 1] += bench::target_error(&prepared, &run)?;
            }
        }
        let m = sums.map(|s| s / seeds as f64);
        println!(
            "{:<16} {:>8.2} {:>10.2} {:>10.2} {:>10.2}",
            family.name(),
            m[0],
            m[1],
            m[2],
            m[3]
        );
    }
    Ok(())
}
