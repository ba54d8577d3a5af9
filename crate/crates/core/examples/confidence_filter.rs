//! Temporal-consistency and posterior filtering of pseudo-labels across
//! repeated visits of the same samples.

use nalgebra::DMatrix;
use ttac::filter::{make_filtered_batch, FilterThresholds, PosteriorStore};

fn main() -> ttac::Result<()> {
    let ids = [0u64, 1, 2, 3];
    let features = DMatrix::zeros(4, 2);
    let thresholds = FilterThresholds::default();
    // rows: steady and confident, steady but unsure, confidence collapsing, class flip
    let visits = [
        [[0.97, 0.03], [0.60, 0.40], [0.97, 0.03], [0.95, 0.05]],
        [[0.98, 0.02], [0.62, 0.38], [0.97, 0.03], [0.05, 0.95]],
        [[0.985, 0.015], [0.61, 0.39], [0.80, 0.20], [0.04, 0.96]],
    ];
    let mut store = PosteriorStore::new();
    println!("thresholds {thresholds:?}");
    for (step, rows) in visits.iter().enumerate() {
        let p = DMatrix::from_row_iterator(4, 2, rows.iter().flatten().copied());
        let batch = make_filtered_batch(&features, &p, &ids, &mut store, &thresholds, step as u64)?;
        println!(
            "visit {step}: labels {:?} pass {:?}",
            batch.pseudo_labels(),
            batch.pass_mask()
        );
    }
    Ok(())
}
