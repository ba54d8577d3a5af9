//! Adaptation without source statistics: anchors come from the classifier
//! weights, rescaled to the observed feature norm.

use ttac::bench;
use ttac::config::{AnchorMode, ExperimentConfig, SttrConfig};
use ttac::engine::{run_protocol, Engine};
use ttac::report::final_error;

fn main() -> ttac::Result<()> {
    let cfg = ExperimentConfig::default();
    for seed in 0..3 {
        let prepared = bench::prepare(&cfg.bench, seed)?;
        let test = bench::target_error(
            &prepared,
            &SttrConfig {
                adapt: false,
                ..cfg.ttac.clone()
            },
        )?;
        let free = SttrConfig {
            anchor_mode: AnchorMode::ClassifierPrototypes,
            learning_rate: 0.00025,
            seed,
            ..cfg.ttac.clone()
        };
        // no source anchors are handed to the engine
        let mut engine = Engine::new(prepared.model.clone(), None, free)?;
        let out = run_protocol(&mut engine, &prepared.target.inputs, Some(&prepared.target.labels))?;
        let with_source = bench::target_error(
            &prepared,
            &SttrConfig {
                seed,
                ..cfg.ttac.clone()
            },
        )?;
        println!(
            "seed {seed}: TEST {test:.2}%  source-free {:.2}%  with source anchors {with_source:.2}%",
            final_error(&out.log)?.unwrap_or(f64::NAN)
        );
    }
    Ok(())
}
