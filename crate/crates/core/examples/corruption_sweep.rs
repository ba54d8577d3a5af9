//! TEST baseline and TTAC across corruption severities.
//!
//! Takes an optional family name (default `rotation_mix`):
//! `cargo run --release --example corruption_sweep -- impulse`

use ttac::bench;
use ttac::config::{ExperimentConfig, SttrConfig};
use ttac::datagen::CorruptionFamily;

fn main() -> ttac::Result<()> {
    let family = match std::env::args().nth(1) {
        Some(name) => CorruptionFamily::ALL
            .into_iter()
            .find(|f| f.name() == name)
            .expect("unknown corruption family"),
        None => CorruptionFamily::RotationMix,
    };
    let cfg = ExperimentConfig::default();
    println!("{family}, seed 0");
    println!("{:>8} {:>8} {:>8}", "severity", "TEST %", "TTAC %");
    for severity in 0..=5 {
        let mut bench_cfg = cfg.bench.clone();
        bench_cfg.corruption = family;
        bench_cfg.severity = severity;
        let prepared = bench::prepare(&bench_cfg, 0)?;
        let test = bench::target_error(
            &prepared,
            &SttrConfig {
                adapt: false,
                ..cfg.ttac.clone()
            },
        )?;
        let ttac = bench::target_error(&prepared, &cfg.ttac)?;
        println!("{severity:>8} {test:>8.2} {ttac:>8.2}");
    }
    Ok(())
}
