//! Trains the MLP on a generated source domain and round-trips the checkpoint.

use ttac::bench;
use ttac::config::BenchmarkConfig;
use ttac::datagen::generate_source;
use ttac::nn::{accuracy, Model};

fn main() -> ttac::Result<()> {
    let cfg = BenchmarkConfig::default();
    let seed = 3;
    let source = generate_source(&bench::source_spec(&cfg, seed))?;
    println!(
        "source: {} samples, {} classes, dim {}",
        source.len(),
        cfg.classes,
        source.input_dim()
    );

    let (model, report) = bench::train_source_model(&cfg, &source, seed)?;
    println!(
        "{} parameters, holdout accuracy {:.2}% after {} epochs (loss {:.4})",
        model.num_parameters(),
        100.0 * report.holdout_accuracy,
        cfg.pretrain_epochs,
        report.final_loss
    );

    let path = std::env::temp_dir().join("ttac_example_model.ckpt");
    model.save(&path)?;
    let restored = Model::load(&path)?;
    let same = restored.predict(&source.inputs)? == model.predict(&source.inputs)?;
    println!("checkpoint {} restores identical predictions: {same}", path.display());
    println!(
        "training accuracy {:.2}%",
        100.0 * accuracy(&restored.predict(&source.inputs)?, &source.labels)
    );
    std::fs::remove_file(path)?;
    Ok(())
}
