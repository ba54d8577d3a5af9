mod common;

use nalgebra::DMatrix;
use ttac::bench;
use ttac::config::BenchmarkConfig;
use ttac::datagen::{
    corrupt, generate_source, load_features, rotation_mixing, write_features, ClassGenerator, CorruptionFamily,
    CorruptionSpec, DomainSpec, FeatureFormat, FeatureSet, Warp,
};
use ttac::nn::accuracy;

fn two_class_spec(samples: usize) -> DomainSpec {
    DomainSpec {
        input_dim: 4,
        classes: vec![
            ClassGenerator {
                mean: vec![3.0, 0.0, 1.0, -1.0],
                spread: 1.0,
                samples,
            },
            ClassGenerator {
                mean: vec![-3.0, 0.0, 0.5, 2.0],
                spread: 0.5,
                samples,
            },
        ],
        warp: Warp::None,
        seed: 21,
    }
}

#[test]
fn class_means_within_clt_bound() {
    let n = 4000;
    let spec = two_class_spec(n);
    let data = generate_source(&spec).unwrap();
    for (k, class) in spec.classes.iter().enumerate() {
        let rows: Vec<usize> = (0..data.len()).filter(|&i| data.labels[i] == k).collect();
        assert_eq!(rows.len(), n);
        let mean = data.inputs.select_rows(&rows).row_mean();
        let bound = 3.0 * class.spread / (n as f64).sqrt();
        for j in 0..spec.input_dim {
            assert!(
                (mean[j] - class.mean[j]).abs() < bound,
                "class {k} dim {j}: {} vs {}",
                mean[j],
                class.mean[j]
            );
        }
    }
}

#[test]
fn csv_and_binary_hold_the_same_matrix() {
    let data = generate_source(&two_class_spec(50)).unwrap();
    let set = FeatureSet {
        features: data.inputs.clone(),
        labels: Some(data.labels.clone()),
    };
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("f.csv");
    let bin = dir.path().join("f.bin");
    write_features(&csv, &set, FeatureFormat::Csv).unwrap();
    write_features(&bin, &set, FeatureFormat::Binary).unwrap();
    let a = load_features(&csv, FeatureFormat::from_path(&csv)).unwrap();
    let b = load_features(&bin, FeatureFormat::from_path(&bin)).unwrap();
    assert_eq!(a, b);
    assert_eq!(a, set);
}

#[test]
fn hand_written_csv_is_read_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("hand.csv");
    std::fs::write(&p, "f0,f1,label\n0.1,-2.5,1\n1e-3,3,0\n-0.30000000000000004,7.25,1\n").unwrap();
    let set = load_features(&p, FeatureFormat::Csv).unwrap();
    assert_eq!(
        set.features,
        DMatrix::from_row_slice(3, 2, &[0.1, -2.5, 1e-3, 3.0, -0.30000000000000004, 7.25])
    );
    assert_eq!(set.labels, Some(vec![1, 0, 1]));
}

#[test]
fn corruption_is_pure_and_label_preserving() {
    let data = generate_source(&two_class_spec(40)).unwrap();
    for family in CorruptionFamily::ALL {
        let spec = CorruptionSpec {
            family,
            severity: 4,
            seed: 3,
        };
        let a = corrupt(&data, &spec).unwrap();
        assert_eq!(a, corrupt(&data, &spec).unwrap(), "{family}");
        assert_eq!(a.labels, data.labels);
        assert_eq!(a.inputs.shape(), data.inputs.shape());
        assert_ne!(a.inputs, data.inputs, "{family}");
        let identity = CorruptionSpec { severity: 0, ..spec };
        assert_eq!(corrupt(&data, &identity).unwrap(), data, "{family}");
    }
}

#[test]
fn rotation_mixing_is_orthogonal() {
    for s in 1..=5u8 {
        let q = rotation_mixing(9, CorruptionFamily::RotationMix.parameter(s), 11);
        assert!((q.transpose() * &q - DMatrix::identity(9, 9)).amax() < 1e-10);
    }
}

#[test]
fn separated_classes_are_learned() {
    let cfg = BenchmarkConfig {
        classes: 2,
        input_dim: 4,
        hidden: vec![16],
        feature_dim: 4,
        ..BenchmarkConfig::default()
    };
    let source = generate_source(&two_class_spec(500)).unwrap();
    let (model, report) = bench::train_source_model(&cfg, &source, 0).unwrap();
    assert!(report.holdout_accuracy > 0.99);
    let fresh = generate_source(&two_class_spec(500).with_seed(99)).unwrap();
    assert!(accuracy(&model.predict(&fresh.inputs).unwrap(), &fresh.labels) > 0.99);
}

#[test]
fn noise_severity_never_helps_the_baseline() {
    const SLACK: f64 = 0.5;
    let base = BenchmarkConfig {
        corruption: CorruptionFamily::GaussianNoise,
        ..BenchmarkConfig::default()
    };
    let seeds = 5;
    let mut means = vec![0.0; 6];
    for seed in 0..seeds {
        let p = bench::prepare(&base, seed).unwrap();
        let clean = generate_source(&bench::target_spec(&base, seed)).unwrap();
        for (s, m) in means.iter_mut().enumerate() {
            let spec = CorruptionSpec {
                severity: s as u8,
                ..bench::corruption_spec(&base, seed)
            };
            let t = corrupt(&clean, &spec).unwrap();
            let err = 100.0 * (1.0 - accuracy(&p.model.predict(&t.inputs).unwrap(), &t.labels));
            *m += err / seeds as f64;
        }
    }
    println!("TEST error by severity: {means:.2?}");
    for s in 1..6 {
        assert!(means[s] >= means[s - 1] - SLACK, "severity {s}: {means:?}");
    }
}
