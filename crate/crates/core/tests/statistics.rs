mod common;

use common::*;
use nalgebra::DMatrix;
use proptest::prelude::*;
use ttac::stats::{batch_mle, clip_coefficient, Clip, FilteredBatch, RunningGaussian};

/// Row counts of consecutive batches covering `n` rows.
fn partition(cuts: &[usize], n: usize) -> Vec<usize> {
    let mut points: Vec<usize> = cuts.iter().map(|c| c % n).filter(|&c| c > 0).collect();
    points.push(0);
    points.push(n);
    points.sort_unstable();
    points.dedup();
    points.windows(2).map(|w| w[1] - w[0]).collect()
}

fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).amax()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn streaming_matches_batch(seed in any::<u64>(), d in 1usize..8, n in 1usize..300, cuts in prop::collection::vec(any::<usize>(), 0..12), shift in -5.0f64..5.0) {
        let mut r = rng(seed);
        let x = normal_matrix(&mut r, n, d).add_scalar(shift);
        let mut g = RunningGaussian::new(d, Clip::Unbounded);
        let mut start = 0;
        for len in partition(&cuts, n) {
            g.update_global(&x.rows(start, len).into_owned()).unwrap();
            start += len;
        }
        let (mean, cov) = batch_mle(&x).unwrap();
        prop_assert!((g.mean() - &mean).amax() < 1e-9);
        prop_assert!(max_abs_diff(g.covariance(), &cov) < 1e-9);
        prop_assert_eq!(g.count(), n as f64);
    }

    #[test]
    fn filtered_cluster_matches_selected_rows(seed in any::<u64>(), d in 1usize..6, n in 2usize..200, k in 1usize..4, cuts in prop::collection::vec(any::<usize>(), 0..8)) {
        let mut r = rng(seed);
        let x = normal_matrix(&mut r, n, d);
        let labels: Vec<usize> = (0..n).map(|i| (seed as usize / 7 + i * 31 + i / 3) % k).collect();
        let pass: Vec<bool> = (0..n).map(|i| !(seed as usize / 3 + i * 17).is_multiple_of(5)).collect();
        for class in 0..k {
            let rows: Vec<usize> = (0..n).filter(|&i| pass[i] && labels[i] == class).collect();
            let mut c = RunningGaussian::new(d, Clip::Unbounded);
            let mut start = 0;
            for len in partition(&cuts, n) {
                let sel: Vec<usize> = (start..start + len).collect();
                let batch = FilteredBatch::new(
                    x.select_rows(&sel),
                    sel.iter().map(|&i| labels[i]).collect(),
                    sel.iter().map(|&i| pass[i]).collect(),
                    k,
                ).unwrap();
                c.update_cluster(&batch, class).unwrap();
                start += len;
            }
            if rows.is_empty() {
                prop_assert_eq!(c.count(), 0.0);
                continue;
            }
            let (mean, cov) = batch_mle(&x.select_rows(&rows)).unwrap();
            prop_assert!((c.mean() - &mean).amax() < 1e-9);
            prop_assert!(max_abs_diff(c.covariance(), &cov) < 1e-9);
            prop_assert_eq!(c.count(), rows.len() as f64);
        }
    }

    #[test]
    fn row_order_within_a_batch_is_irrelevant(seed in any::<u64>(), d in 1usize..6, n in 2usize..100) {
        let mut r = rng(seed);
        let warm = normal_matrix(&mut r, 30, d);
        let x = normal_matrix(&mut r, n, d).add_scalar(2.0);
        let mut order: Vec<usize> = (0..n).rev().collect();
        order.rotate_left(seed as usize % n);
        let mut a = RunningGaussian::new(d, Clip::At(40));
        a.update_global(&warm).unwrap();
        let mut b = a.clone();
        a.update_global(&x).unwrap();
        b.update_global(&x.select_rows(&order)).unwrap();
        prop_assert!((a.mean() - b.mean()).amax() < 1e-12);
        prop_assert!(max_abs_diff(a.covariance(), b.covariance()) < 1e-12);
    }

    #[test]
    fn integer_weights_replicate_rows(seed in any::<u64>(), d in 1usize..5, n in 1usize..40) {
        let mut r = rng(seed);
        let x = normal_matrix(&mut r, n, d);
        let weights: Vec<f64> = (0..n).map(|i| ((seed as usize + i) % 3) as f64).collect();
        let rows: Vec<usize> = (0..n).flat_map(|i| std::iter::repeat_n(i, weights[i] as usize)).collect();
        let mut w = RunningGaussian::new(d, Clip::Unbounded);
        w.update_weighted(&x, &weights).unwrap();
        if rows.is_empty() {
            prop_assert_eq!(w.count(), 0.0);
        } else {
            let (mean, cov) = batch_mle(&x.select_rows(&rows)).unwrap();
            prop_assert!((w.mean() - &mean).amax() < 1e-10);
            prop_assert!(max_abs_diff(w.covariance(), &cov) < 1e-10);
        }
    }

    // A batch of mass W moves the estimate by a·W ≤ 1 only when the clip is at
    // least the batch size; then the update is a convex mixture and stays PSD.
    #[test]
    fn covariance_stays_symmetric_psd(seed in any::<u64>(), d in 1usize..6, clip in 7u64..50) {
        let mut r = rng(seed);
        let mut g = RunningGaussian::new(d, Clip::At(clip));
        for _ in 0..10 {
            let x = normal_matrix(&mut r, 7, d);
            g.update_global(&x).unwrap();
            prop_assert_eq!(g.covariance(), &g.covariance().transpose());
            let min_eig = g.covariance().clone().symmetric_eigen().eigenvalues.min();
            prop_assert!(min_eig > -1e-10 * g.covariance().amax().max(1.0));
        }
    }

    #[test]
    fn clipped_coefficient_is_exact(count in 1u64..10_000, clip in 1u64..2_000) {
        let a = clip_coefficient(count as f64, Clip::At(clip)).unwrap();
        if count >= clip {
            prop_assert_eq!(a, 1.0 / clip as f64);
        } else {
            prop_assert_eq!(a, 1.0 / count as f64);
        }
        prop_assert_eq!(clip_coefficient(count as f64, Clip::Unbounded).unwrap(), 1.0 / count as f64);
    }
}

#[test]
fn one_hot_soft_weights_equal_hard_assignment() {
    let mut r = rng(5);
    let (n, d, k) = (40, 3, 3);
    let x = normal_matrix(&mut r, n, d);
    let labels: Vec<usize> = (0..n).map(|i| (i * 7) % k).collect();
    let batch = FilteredBatch::new(x.clone(), labels.clone(), vec![true; n], k).unwrap();
    for class in 0..k {
        let one_hot: Vec<f64> = labels.iter().map(|&y| f64::from(u8::from(y == class))).collect();
        let mut hard = RunningGaussian::new(d, Clip::At(25));
        let mut soft = hard.clone();
        hard.update_cluster(&batch, class).unwrap();
        soft.update_weighted(&x, &one_hot).unwrap();
        assert_eq!(hard, soft);
    }
}

#[test]
fn empty_selection_leaves_estimate_untouched() {
    let mut r = rng(9);
    let x = normal_matrix(&mut r, 10, 2);
    let batch = FilteredBatch::new(x, vec![0; 10], vec![false; 10], 2).unwrap();
    let mut c = RunningGaussian::new(2, Clip::At(5));
    let before = c.clone();
    let up = c.update_cluster(&batch, 0).unwrap();
    assert_eq!(up.coefficient, 0.0);
    assert_eq!(c, before);
}

#[test]
fn saturated_estimate_forgets_geometrically() {
    // at the clip every batch moves the mean by the same fraction
    let mut g = RunningGaussian::new(1, Clip::At(10));
    g.update_global(&DMatrix::from_element(10, 1, 0.0)).unwrap();
    for step in 1..=5 {
        g.update_global(&DMatrix::from_element(1, 1, 1.0)).unwrap();
        let expected = 1.0 - 0.9f64.powi(step);
        assert!((g.mean()[0] - expected).abs() < 1e-14, "{} vs {expected}", g.mean()[0]);
    }
}
