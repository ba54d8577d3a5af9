//! The synthetic benchmark end to end: source and shifted target domains, a
//! source-trained model, its anchors, and adaptation runs on the target.

use crate::config::{BenchmarkConfig, ExperimentConfig, SttrConfig};
use crate::datagen::{corrupt, generate_source, CorruptionSpec, Dataset, DomainSpec};
use crate::engine::{compute_source_anchors, run_protocol, Engine, ProtocolOutcome, SourceAnchors};
use crate::error::{Error, Result};
use crate::nn::{pretrain_source, Model, PretrainConfig, PretrainReport};
use crate::report::{final_error, mean_std};

/// Seeds derived from one run seed so the pieces draw independent streams.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SeedPlan {
    pub source: u64,
    pub target: u64,
    pub corruption: u64,
    pub model: u64,
    pub pretrain: u64,
}

impl SeedPlan {
    pub fn from_seed(seed: u64) -> Self {
        let mix = |salt: u64| seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(salt);
        Self {
            source: mix(1),
            target: mix(2),
            corruption: mix(3),
            model: mix(4),
            pretrain: mix(5),
        }
    }
}

pub fn source_spec(cfg: &BenchmarkConfig, seed: u64) -> DomainSpec {
    DomainSpec::random_layout(
        cfg.classes,
        cfg.input_dim,
        cfg.source_samples.div_ceil(cfg.classes),
        cfg.separation,
        cfg.spread,
        cfg.layout_seed,
        SeedPlan::from_seed(seed).source,
    )
}

/// Clean target draws from the source distribution; the corruption is applied separately.
pub fn target_spec(cfg: &BenchmarkConfig, seed: u64) -> DomainSpec {
    source_spec(cfg, seed)
        .with_seed(SeedPlan::from_seed(seed).target)
        .with_samples_per_class(cfg.target_samples.div_ceil(cfg.classes))
}

pub fn corruption_spec(cfg: &BenchmarkConfig, seed: u64) -> CorruptionSpec {
    CorruptionSpec {
        family: cfg.corruption,
        severity: cfg.severity,
        seed: SeedPlan::from_seed(seed).corruption,
    }
}

/// Source set and corrupted target stream.
pub fn generate_domains(cfg: &BenchmarkConfig, seed: u64) -> Result<(Dataset, Dataset)> {
    cfg.validate()?;
    let source = generate_source(&source_spec(cfg, seed))?;
    let clean = generate_source(&target_spec(cfg, seed))?;
    let target = corrupt(&clean, &corruption_spec(cfg, seed))?;
    Ok((source, target))
}

pub fn pretrain_config(cfg: &BenchmarkConfig, seed: u64) -> PretrainConfig {
    PretrainConfig {
        epochs: cfg.pretrain_epochs,
        learning_rate: cfg.pretrain_learning_rate,
        batch_size: cfg.pretrain_batch_size,
        seed: SeedPlan::from_seed(seed).pretrain,
        ..PretrainConfig::default()
    }
}

pub fn train_source_model(cfg: &BenchmarkConfig, source: &Dataset, seed: u64) -> Result<(Model, PretrainReport)> {
    let mut model = Model::random(
        cfg.input_dim,
        &cfg.hidden,
        cfg.feature_dim,
        cfg.classes,
        SeedPlan::from_seed(seed).model,
    );
    let report = pretrain_source(&mut model, source, &pretrain_config(cfg, seed))?;
    Ok((model, report))
}

/// Everything offline: data, trained source model and anchors.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub source: Dataset,
    pub target: Dataset,
    pub model: Model,
    pub anchors: SourceAnchors,
    pub pretrain: PretrainReport,
}

pub fn prepare(cfg: &BenchmarkConfig, seed: u64) -> Result<Prepared> {
    let (source, target) = generate_domains(cfg, seed)?;
    let (model, pretrain) = train_source_model(cfg, &source, seed)?;
    let anchors = compute_source_anchors(&model, &source)?;
    Ok(Prepared {
        source,
        target,
        model,
        anchors,
        pretrain,
    })
}

/// Same offline pieces with a different target stream.
impl Prepared {
    pub fn with_target(&self, target: Dataset) -> Self {
        Self { target, ..self.clone() }
    }
}

/// Runs the protocol on the target stream.
pub fn adapt(prepared: &Prepared, cfg: &SttrConfig) -> Result<ProtocolOutcome> {
    let mut engine = Engine::new(prepared.model.clone(), Some(prepared.anchors.clone()), cfg.clone())?;
    run_protocol(&mut engine, &prepared.target.inputs, Some(&prepared.target.labels))
}

/// Final error in percent of a run on the target stream.
pub fn target_error(prepared: &Prepared, cfg: &SttrConfig) -> Result<f64> {
    let out = adapt(prepared, cfg)?;
    final_error(&out.log)?.ok_or_else(|| Error::Report("empty target stream".into()))
}

/// Prepares the benchmark for `seed` and returns the final target error.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64) -> Result<f64> {
    let prepared = prepare(&cfg.bench, seed)?;
    let ttac = SttrConfig {
        seed,
        ..cfg.ttac.clone()
    };
    target_error(&prepared, &ttac)
}

/// Final-error mean and standard deviation over `n_shuffles` random orders
/// of the same target stream.
pub fn order_robustness(prepared: &Prepared, cfg: &SttrConfig, n_shuffles: usize) -> Result<(f64, f64, Vec<f64>)> {
    if n_shuffles < 2 {
        return Err(Error::Config("order robustness needs at least two shuffles".into()));
    }
    let errors = (0..n_shuffles as u64)
        .map(|s| {
            let shuffled = prepared.target.shuffled(s.wrapping_add(0x5EED));
            target_error(&prepared.with_target(shuffled), cfg)
        })
        .collect::<Result<Vec<f64>>>()?;
    let (mean, std) = mean_std(&errors)?;
    Ok((mean, std, errors))
}
