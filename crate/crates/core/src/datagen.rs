//! Synthetic source/target domains and corruption families, plus feature
//! file ingestion (CSV and binary tensor archives).
//!
//! Classes are isotropic Gaussians around fixed means, optionally passed
//! through an elementwise warp. Corruptions are desk-scale analogs of image
//! corruptions: additive noise, an orthogonal mixing of input dimensions,
//! per-dimension gains, zeroed dimensions, and impulse noise. Every draw is
//! a pure function of its `DomainSpec` and seed.

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensorfile::{self, Tensor};

const FEATURES_KIND: &[u8; 8] = b"FEATURES";

/// Labeled inputs, one row per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub inputs: DMatrix<f64>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(inputs: DMatrix<f64>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        crate::error::check_dim("dataset labels", inputs.nrows(), labels.len())?;
        if let Some(bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::Validation(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(Self {
            inputs,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn subset(&self, rows: &[usize]) -> Dataset {
        Dataset {
            inputs: self.inputs.select_rows(rows),
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            num_classes: self.num_classes,
        }
    }

    /// Rows in a seeded random order.
    pub fn shuffled(&self, seed: u64) -> Dataset {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        self.subset(&order)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.num_classes];
        for &y in &self.labels {
            c[y] += 1;
        }
        c
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Warp {
    #[default]
    None,
    /// `x ← x + ½ sin(2x)` per coordinate.
    Sine,
}

impl Warp {
    fn apply(self, x: f64) -> f64 {
        match self {
            Warp::None => x,
            Warp::Sine => x + 0.5 * (2.0 * x).sin(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassGenerator {
    pub mean: Vec<f64>,
    /// Standard deviation of the isotropic class noise.
    pub spread: f64,
    pub samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub input_dim: usize,
    pub classes: Vec<ClassGenerator>,
    pub warp: Warp,
    pub seed: u64,
}

impl DomainSpec {
    /// `classes` Gaussian classes with means drawn from `N(0, separation²·I)`
    /// using `layout_seed`; the sampling seed is `seed`.
    pub fn random_layout(
        classes: usize,
        input_dim: usize,
        samples_per_class: usize,
        separation: f64,
        spread: f64,
        layout_seed: u64,
        seed: u64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(layout_seed);
        let classes = (0..classes)
            .map(|_| ClassGenerator {
                mean: (0..input_dim)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        separation * z
                    })
                    .collect(),
                spread,
                samples: samples_per_class,
            })
            .collect();
        Self {
            input_dim,
            classes,
            warp: Warp::None,
            seed,
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }

    pub fn with_samples_per_class(&self, samples: usize) -> Self {
        let mut out = self.clone();
        out.classes.iter_mut().for_each(|c| c.samples = samples);
        out
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.len() < 2 {
            return Err(Error::Config("a domain needs at least two classes".into()));
        }
        for (k, c) in self.classes.iter().enumerate() {
            if c.mean.len() != self.input_dim {
                return Err(Error::Config(format!(
                    "class {k} mean has {} entries, input_dim is {}",
                    c.mean.len(),
                    self.input_dim
                )));
            }
            if c.samples == 0 {
                return Err(Error::Config(format!("class {k} has no samples")));
            }
            if !(c.spread >= 0.0 && c.spread.is_finite()) {
                return Err(Error::Config(format!("class {k} has invalid spread {}", c.spread)));
            }
        }
        for i in 0..self.classes.len() {
            for j in (i + 1)..self.classes.len() {
                if self.classes[i].mean == self.classes[j].mean {
                    return Err(Error::Config(format!("classes {i} and {j} share a mean")));
                }
            }
        }
        Ok(())
    }
}

/// Class-conditional Gaussian draws in a seeded random order.
pub fn generate_source(spec: &DomainSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let total: usize = spec.classes.iter().map(|c| c.samples).sum();
    let mut inputs = DMatrix::zeros(total, spec.input_dim);
    let mut labels = Vec::with_capacity(total);
    let mut row = 0;
    for (k, class) in spec.classes.iter().enumerate() {
        for _ in 0..class.samples {
            for j in 0..spec.input_dim {
                let z: f64 = StandardNormal.sample(&mut rng);
                inputs[(row, j)] = spec.warp.apply(class.mean[j] + class.spread * z);
            }
            labels.push(k);
            row += 1;
        }
    }
    let data = Dataset::new(inputs, labels, spec.num_classes())?;
    let shuffle_seed = rng.random::<u64>();
    Ok(data.shuffled(shuffle_seed))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionFamily {
    GaussianNoise,
    RotationMix,
    ChannelScale,
    DimOcclusion,
    Impulse,
}

impl CorruptionFamily {
    pub const ALL: [CorruptionFamily; 5] = [
        CorruptionFamily::GaussianNoise,
        CorruptionFamily::RotationMix,
        CorruptionFamily::ChannelScale,
        CorruptionFamily::DimOcclusion,
        CorruptionFamily::Impulse,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CorruptionFamily::GaussianNoise => "gaussian_noise",
            CorruptionFamily::RotationMix => "rotation_mix",
            CorruptionFamily::ChannelScale => "channel_scale",
            CorruptionFamily::DimOcclusion => "dim_occlusion",
            CorruptionFamily::Impulse => "impulse",
        }
    }

    /// The severity-dependent parameter:
    ///
    /// | family          | parameter at severity s          |
    /// |-----------------|----------------------------------|
    /// | gaussian_noise  | noise std `0.1·s`                |
    /// | rotation_mix    | rotation angle `s·π/12`          |
    /// | channel_scale   | log-gain std `0.15·s`            |
    /// | dim_occlusion   | `⌈0.1·s·d⌉` dims zeroed          |
    /// | impulse         | per-entry hit probability `0.04·s` |
    pub fn parameter(self, severity: u8) -> f64 {
        let s = severity as f64;
        match self {
            CorruptionFamily::GaussianNoise => 0.1 * s,
            CorruptionFamily::RotationMix => s * std::f64::consts::PI / 12.0,
            CorruptionFamily::ChannelScale => 0.15 * s,
            CorruptionFamily::DimOcclusion => 0.1 * s,
            CorruptionFamily::Impulse => 0.04 * s,
        }
    }
}

impl fmt::Display for CorruptionFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CorruptionFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CorruptionFamily::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown corruption family {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub family: CorruptionFamily,
    /// 0 (identity) through 5.
    pub severity: u8,
    pub seed: u64,
}

/// Magnitude written by an impulse hit.
const IMPULSE_MAGNITUDE: f64 = 3.0;

/// Seeded orthogonal mixing: a random orthonormal basis in which coordinate
/// pairs are rotated by `angle`.
pub fn rotation_mixing(dim: usize, angle: f64, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g: DMatrix<f64> = DMatrix::from_fn(dim, dim, |_, _| StandardNormal.sample(&mut rng));
    let basis = g.qr().q();
    let mut rot = DMatrix::identity(dim, dim);
    let (s, c) = angle.sin_cos();
    for p in 0..dim / 2 {
        let (i, j) = (2 * p, 2 * p + 1);
        rot[(i, i)] = c;
        rot[(i, j)] = -s;
        rot[(j, i)] = s;
        rot[(j, j)] = c;
    }
    &basis * rot * basis.transpose()
}

/// Applies the corruption; labels and sample count are unchanged.
pub fn corrupt(data: &Dataset, spec: &CorruptionSpec) -> Result<Dataset> {
    if spec.severity > 5 {
        return Err(Error::Config(format!("severity {} outside 0..=5", spec.severity)));
    }
    if spec.severity == 0 {
        return Ok(data.clone());
    }
    let param = spec.family.parameter(spec.severity);
    let d = data.input_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut x = data.inputs.clone();
    match spec.family {
        CorruptionFamily::GaussianNoise => {
            x.apply(|v| {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v += param * z;
            });
        }
        CorruptionFamily::RotationMix => {
            let q = rotation_mixing(d, param, rng.random());
            x = &x * q.transpose();
        }
        CorruptionFamily::ChannelScale => {
            let gains: Vec<f64> = (0..d)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    (param * z).exp()
                })
                .collect();
            for mut row in x.row_iter_mut() {
                for (v, g) in row.iter_mut().zip(&gains) {
                    *v *= g;
                }
            }
        }
        CorruptionFamily::DimOcclusion => {
            let hidden = (d * spec.severity as usize).div_ceil(10);
            let mut dims: Vec<usize> = (0..d).collect();
            dims.shuffle(&mut rng);
            for &j in &dims[..hidden.min(d)] {
                x.column_mut(j).fill(0.0);
            }
        }
        CorruptionFamily::Impulse => {
            x.apply(|v| {
                if rng.random::<f64>() < param {
                    *v = if rng.random::<bool>() {
                        IMPULSE_MAGNITUDE
                    } else {
                        -IMPULSE_MAGNITUDE
                    };
                }
            });
        }
    }
    Dataset::new(x, data.labels.clone(), data.num_classes)
}

/// Features with optional integer labels, as read from a feature file.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    pub features: DMatrix<f64>,
    pub labels: Option<Vec<usize>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureFormat {
    /// Header `f0,…,f{d−1}[,label]`, one sample per line.
    Csv,
    /// Tensor archive with a `features` matrix and optional `labels` vector.
    Binary,
}

impl FeatureFormat {
    /// Chooses by file extension: `.csv` is CSV, anything else binary.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("csv") => FeatureFormat::Csv,
            _ => FeatureFormat::Binary,
        }
    }
}

pub fn write_features(path: &Path, set: &FeatureSet, format: FeatureFormat) -> Result<()> {
    if let Some(l) = &set.labels {
        crate::error::check_dim("feature labels", set.features.nrows(), l.len())?;
    }
    match format {
        FeatureFormat::Csv => {
            let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
            let d = set.features.ncols();
            let mut header: Vec<String> = (0..d).map(|j| format!("f{j}")).collect();
            if set.labels.is_some() {
                header.push("label".into());
            }
            w.write_record(&header).map_err(csv_io)?;
            for i in 0..set.features.nrows() {
                // `{:?}` prints the shortest representation that round-trips.
                let mut rec: Vec<String> = set.features.row(i).iter().map(|v| format!("{v:?}")).collect();
                if let Some(l) = &set.labels {
                    rec.push(l[i].to_string());
                }
                w.write_record(&rec).map_err(csv_io)?;
            }
            w.flush()?;
            Ok(())
        }
        FeatureFormat::Binary => {
            let mut tensors = vec![Tensor::from_matrix("features", &set.features)];
            if let Some(l) = &set.labels {
                let v = DVector::from_iterator(l.len(), l.iter().map(|&y| y as f64));
                tensors.push(Tensor::from_vector("labels", &v));
            }
            tensorfile::save(path, FEATURES_KIND, &tensors)
        }
    }
}

fn csv_io(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

pub fn load_features(path: &Path, format: FeatureFormat) -> Result<FeatureSet> {
    match format {
        FeatureFormat::Csv => load_csv(path),
        FeatureFormat::Binary => {
            let tensors = tensorfile::load(path, FEATURES_KIND)?;
            let features = tensorfile::find(&tensors, "features")?.to_matrix()?;
            let labels = match tensors.iter().find(|t| t.name == "labels") {
                Some(t) => {
                    let v = t.to_vector()?;
                    if v.len() != features.nrows() {
                        return Err(Error::Format(format!(
                            "{} labels for {} feature rows",
                            v.len(),
                            features.nrows()
                        )));
                    }
                    Some(v.iter().map(|&y| y as usize).collect())
                }
                None => None,
            };
            Ok(FeatureSet { features, labels })
        }
    }
}

fn load_csv(path: &Path) -> Result<FeatureSet> {
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)
        .map_err(csv_io)?;
    let header = reader.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
    let has_label = header.iter().next_back() == Some("label");
    let d = header.len() - usize::from(has_label);
    for (j, name) in header.iter().take(d).enumerate() {
        if name != format!("f{j}") {
            return Err(parse_err(1, format!("expected column f{j}, found {name:?}")));
        }
    }

    let mut values = Vec::new();
    let mut labels = Vec::new();
    for (idx, rec) in reader.records().enumerate() {
        let line = idx + 2;
        let rec = rec.map_err(|e| parse_err(line, e.to_string()))?;
        if rec.len() != header.len() {
            return Err(Error::Format(format!(
                "line {line}: {} fields, header has {}",
                rec.len(),
                header.len()
            )));
        }
        for field in rec.iter().take(d) {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| parse_err(line, format!("invalid number {field:?}")))?;
            values.push(v);
        }
        if has_label {
            let field = &rec[d];
            let y: usize = field
                .trim()
                .parse()
                .map_err(|_| parse_err(line, format!("invalid label {field:?}")))?;
            labels.push(y);
        }
    }
    let n = values.len() / d.max(1);
    Ok(FeatureSet {
        features: DMatrix::from_row_slice(n, d, &values),
        labels: has_label.then_some(labels),
    })
}

/// Provenance record written next to generated data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub source_spec: DomainSpec,
    pub target_spec: DomainSpec,
    pub corruption: CorruptionSpec,
    pub source_file: String,
    pub target_file: String,
}

impl DatasetManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(&mut f, self)?;
        f.write_all(b"\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_reader(std::io::BufReader::new(File::open(path)?))?)
    }
}

impl From<&Dataset> for FeatureSet {
    fn from(d: &Dataset) -> Self {
        FeatureSet {
            features: d.inputs.clone(),
            labels: Some(d.labels.clone()),
        }
    }
}

impl FeatureSet {
    /// Requires labels; `num_classes` is one past the largest label.
    pub fn into_dataset(self) -> Result<Dataset> {
        let labels = self
            .labels
            .ok_or_else(|| Error::Format("feature file has no label column".into()))?;
        let k = labels.iter().max().map_or(0, |m| m + 1);
        Dataset::new(self.features, labels, k)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> DomainSpec {
        DomainSpec::random_layout(3, 4, 20, 2.0, 0.5, 1, 2)
    }

    #[test]
    fn generation_is_seed_deterministic() {
        let a = generate_source(&small_spec()).unwrap();
        let b = generate_source(&small_spec()).unwrap();
        assert_eq!(a, b);
        let c = generate_source(&small_spec().with_seed(3)).unwrap();
        assert_ne!(a.inputs, c.inputs);
        assert_eq!(a.class_counts(), vec![20, 20, 20]);
    }

    #[test]
    fn degenerate_specs_are_rejected() {
        let mut s = small_spec();
        s.classes[1].mean = s.classes[0].mean.clone();
        assert!(generate_source(&s).is_err());
        let mut s = small_spec();
        s.classes[2].samples = 0;
        assert!(generate_source(&s).is_err());
        let mut s = small_spec();
        s.classes.truncate(1);
        assert!(generate_source(&s).is_err());
    }

    #[test]
    fn severity_zero_is_identity() {
        let d = generate_source(&small_spec()).unwrap();
        for family in CorruptionFamily::ALL {
            let c = corrupt(
                &d,
                &CorruptionSpec {
                    family,
                    severity: 0,
                    seed: 9,
                },
            )
            .unwrap();
            assert_eq!(c, d);
        }
    }

    #[test]
    fn corruption_preserves_labels_and_count() {
        let d = generate_source(&small_spec()).unwrap();
        for family in CorruptionFamily::ALL {
            for severity in 1..=5 {
                let c = corrupt(
                    &d,
                    &CorruptionSpec {
                        family,
                        severity,
                        seed: 4,
                    },
                )
                .unwrap();
                assert_eq!(c.labels, d.labels);
                assert_eq!(c.inputs.shape(), d.inputs.shape());
                assert_ne!(c.inputs, d.inputs, "{family} severity {severity} changed nothing");
            }
        }
        assert!(corrupt(
            &d,
            &CorruptionSpec {
                family: CorruptionFamily::Impulse,
                severity: 6,
                seed: 0
            }
        )
        .is_err());
    }

    #[test]
    fn rotation_mixing_is_orthogonal() {
        for dim in [2, 5, 32] {
            let q = rotation_mixing(dim, CorruptionFamily::RotationMix.parameter(5), 17);
            let err = (q.transpose() * &q - DMatrix::identity(dim, dim)).abs().max();
            assert!(err < 1e-10, "dim {dim}: {err}");
        }
    }

    #[test]
    fn unknown_family_name() {
        assert!("fog".parse::<CorruptionFamily>().is_err());
        assert_eq!(
            "rotation_mix".parse::<CorruptionFamily>().unwrap(),
            CorruptionFamily::RotationMix
        );
    }

    #[test]
    fn occlusion_zeroes_whole_columns() {
        let d = generate_source(&DomainSpec::random_layout(2, 10, 5, 1.0, 1.0, 0, 0)).unwrap();
        let c = corrupt(
            &d,
            &CorruptionSpec {
                family: CorruptionFamily::DimOcclusion,
                severity: 3,
                seed: 1,
            },
        )
        .unwrap();
        let zeroed = (0..10)
            .filter(|&j| c.inputs.column(j).iter().all(|&v| v == 0.0))
            .count();
        assert_eq!(zeroed, 3);
    }
}
