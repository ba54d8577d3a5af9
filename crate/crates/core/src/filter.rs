//! Pseudo-labels and the two-stage filter deciding which rows update the
//! per-class target clusters.
//!
//! Each sample keeps an exponential moving average of its posterior across
//! visits. A row passes when its current top-class probability has not
//! dropped below its history by more than `|τ_TC|` (temporal consistency)
//! and the averaged probability of that class exceeds `τ_PP`.

use std::collections::HashMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::nn::argmax;
use crate::stats::FilteredBatch;

/// Stable identifier assigned to a sample when it arrives in the stream.
pub type SampleId = u64;

const SIMPLEX_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterThresholds {
    /// EMA rate ξ in (0, 1].
    pub xi: f64,
    /// Temporal-consistency threshold, usually slightly negative.
    pub tau_tc: f64,
    /// Posterior threshold in (0, 1).
    pub tau_pp: f64,
}

impl Default for FilterThresholds {
    fn default() -> Self {
        Self {
            xi: 0.9,
            tau_tc: -0.001,
            tau_pp: 0.9,
        }
    }
}

impl FilterThresholds {
    pub fn validate(&self) -> Result<()> {
        if !(self.xi > 0.0 && self.xi <= 1.0) {
            return Err(Error::Config(format!("xi must be in (0, 1], got {}", self.xi)));
        }
        if !self.tau_tc.is_finite() {
            return Err(Error::Config(format!("tau_tc must be finite, got {}", self.tau_tc)));
        }
        if !(self.tau_pp > 0.0 && self.tau_pp < 1.0) {
            return Err(Error::Config(format!("tau_pp must be in (0, 1), got {}", self.tau_pp)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Entry {
    ema: Vec<f64>,
    last_update_step: u64,
}

/// The moving average before and after one observation.
#[derive(Clone, Debug, PartialEq)]
pub struct EmaUpdate {
    pub previous: Vec<f64>,
    pub current: Vec<f64>,
}

/// Per-sample moving-average posteriors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PosteriorStore {
    entries: HashMap<SampleId, Entry>,
}

fn validate_simplex(p: &[f64]) -> Result<()> {
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > SIMPLEX_TOLERANCE || p.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Validation(format!(
            "posterior is not on the simplex (sum {sum})"
        )));
    }
    Ok(())
}

impl PosteriorStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: SampleId) -> Option<&[f64]> {
        self.entries.get(&id).map(|e| e.ema.as_slice())
    }

    pub fn last_update_step(&self, id: SampleId) -> Option<u64> {
        self.entries.get(&id).map(|e| e.last_update_step)
    }

    pub fn evict(&mut self, id: SampleId) {
        self.entries.remove(&id);
    }

    /// `P̃ ← (1 − ξ)·P̃ + ξ·P`, or `P̃ = P` for a first observation (in which
    /// case `previous` also equals `P`).
    pub fn ema_update(&mut self, id: SampleId, posterior: &[f64], xi: f64, step: u64) -> Result<EmaUpdate> {
        validate_simplex(posterior)?;
        match self.entries.get_mut(&id) {
            None => {
                self.entries.insert(
                    id,
                    Entry {
                        ema: posterior.to_vec(),
                        last_update_step: step,
                    },
                );
                Ok(EmaUpdate {
                    previous: posterior.to_vec(),
                    current: posterior.to_vec(),
                })
            }
            Some(entry) => {
                check_dim("posterior class count", entry.ema.len(), posterior.len())?;
                let previous = entry.ema.clone();
                for (e, &p) in entry.ema.iter_mut().zip(posterior) {
                    *e = (1.0 - xi) * *e + xi * p;
                }
                entry.last_update_step = step;
                Ok(EmaUpdate {
                    previous,
                    current: entry.ema.clone(),
                })
            }
        }
    }
}

/// Temporal consistency: `P[k̂] − P̃_prev[k̂] > τ_TC` with `k̂ = argmax P`.
pub fn tc_filter(posterior: &[f64], ema_previous: &[f64], tau_tc: f64) -> bool {
    let k = argmax(posterior.iter().copied());
    posterior[k] - ema_previous[k] > tau_tc
}

/// Posterior confidence: `P̃[k̂] > τ_PP`.
pub fn pp_filter(ema_current: &[f64], class: usize, tau_pp: f64) -> bool {
    ema_current[class] > tau_pp
}

/// Pseudo-labels each row, updates its moving average and applies both filters.
pub fn make_filtered_batch(
    features: &DMatrix<f64>,
    posteriors: &DMatrix<f64>,
    ids: &[SampleId],
    store: &mut PosteriorStore,
    thresholds: &FilterThresholds,
    step: u64,
) -> Result<FilteredBatch> {
    check_dim("posterior rows", features.nrows(), posteriors.nrows())?;
    check_dim("sample ids", features.nrows(), ids.len())?;
    let k_classes = posteriors.ncols();
    let mut labels = Vec::with_capacity(ids.len());
    let mut mask = Vec::with_capacity(ids.len());
    let mut row = vec![0.0; k_classes];
    for (i, &id) in ids.iter().enumerate() {
        for (k, slot) in row.iter_mut().enumerate() {
            *slot = posteriors[(i, k)];
        }
        let y = argmax(row.iter().copied());
        let ema = store.ema_update(id, &row, thresholds.xi, step)?;
        let pass = tc_filter(&row, &ema.previous, thresholds.tau_tc) && pp_filter(&ema.current, y, thresholds.tau_pp);
        labels.push(y);
        mask.push(pass);
    }
    FilteredBatch::new(features.clone(), labels, mask, k_classes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn first_observation_is_stored_verbatim() {
        let mut s = PosteriorStore::new();
        let up = s.ema_update(1, &[0.3, 0.7], 0.9, 0).unwrap();
        assert_eq!(up.current, vec![0.3, 0.7]);
        assert_eq!(up.previous, vec![0.3, 0.7]);
        assert_eq!(s.get(1).unwrap(), &[0.3, 0.7]);
    }

    #[test]
    fn ema_arithmetic() {
        let mut s = PosteriorStore::new();
        s.ema_update(1, &[0.5, 0.5], 0.9, 0).unwrap();
        let up = s.ema_update(1, &[0.7, 0.3], 0.9, 1).unwrap();
        assert_eq!(up.previous, vec![0.5, 0.5]);
        assert_relative_eq!(up.current[0], 0.68, epsilon = 1e-12);
        assert_relative_eq!(up.current[1], 0.32, epsilon = 1e-12);
        assert_eq!(s.last_update_step(1), Some(1));
    }

    #[test]
    fn geometric_convergence() {
        let xi = 0.3;
        let mut s = PosteriorStore::new();
        let start = [0.1, 0.2, 0.7];
        let target = [0.6, 0.3, 0.1];
        s.ema_update(5, &start, xi, 0).unwrap();
        let initial_gap: f64 = start
            .iter()
            .zip(&target)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        for n in 1..=30 {
            let up = s.ema_update(5, &target, xi, n).unwrap();
            let gap: f64 = up
                .current
                .iter()
                .zip(&target)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt();
            assert_relative_eq!(gap, (1.0 - xi).powi(n as i32) * initial_gap, epsilon = 1e-12);
        }
    }

    #[test]
    fn non_simplex_is_rejected() {
        let mut s = PosteriorStore::new();
        assert!(matches!(
            s.ema_update(0, &[0.5, 0.6], 0.9, 0),
            Err(Error::Validation(_))
        ));
        assert!(s.ema_update(0, &[1.2, -0.2], 0.9, 0).is_err());
    }

    #[test]
    fn tc_filter_cases() {
        assert!(tc_filter(&[0.7, 0.3], &[0.68, 0.32], -0.001));
        assert!(!tc_filter(&[0.5, 0.5], &[0.68, 0.32], -0.001));
        // a first observation compares against itself
        assert!(tc_filter(&[0.2, 0.8], &[0.2, 0.8], -1e-9));
        assert!(tc_filter(&[0.0, 1.0], &[1.0, 0.0], -1.0));
    }

    #[test]
    fn pp_filter_cases() {
        assert!(pp_filter(&[0.95, 0.05], 0, 0.9));
        assert!(!pp_filter(&[0.85, 0.15], 0, 0.9));
        assert!(pp_filter(&[0.51, 0.49], 0, 0.5));
        assert!(!pp_filter(&[0.5, 0.5], 0, 0.5));
    }

    #[test]
    fn one_hot_rows_all_pass() {
        let post = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 0.0]);
        let mut s = PosteriorStore::new();
        let th = FilterThresholds::default();
        for step in 0..3 {
            let b = make_filtered_batch(&DMatrix::zeros(3, 1), &post, &[0, 1, 2], &mut s, &th, step).unwrap();
            assert!(b.pass_mask().iter().all(|&m| m));
            assert_eq!(b.pseudo_labels(), &[0, 1, 0]);
        }
    }

    #[test]
    fn uniform_rows_all_fail() {
        let post = DMatrix::from_element(4, 4, 0.25);
        let mut s = PosteriorStore::new();
        let b = make_filtered_batch(
            &DMatrix::zeros(4, 2),
            &post,
            &[0, 1, 2, 3],
            &mut s,
            &FilterThresholds::default(),
            0,
        )
        .unwrap();
        assert!(b.pass_mask().iter().all(|&m| !m));
    }

    #[test]
    fn mixed_rows_compose_both_filters() {
        let th = FilterThresholds {
            xi: 0.9,
            tau_tc: -0.001,
            tau_pp: 0.6,
        };
        let mut s = PosteriorStore::new();
        // history: id 0 and 1 at [0.5,0.5]; id 2 at [0.9,0.1]; id 3 unseen.
        s.ema_update(0, &[0.5, 0.5], th.xi, 0).unwrap();
        s.ema_update(1, &[0.5, 0.5], th.xi, 0).unwrap();
        s.ema_update(2, &[0.9, 0.1], th.xi, 0).unwrap();
        let post = DMatrix::from_row_slice(4, 2, &[0.7, 0.3, 0.55, 0.45, 0.6, 0.4, 0.95, 0.05]);
        let b = make_filtered_batch(&DMatrix::zeros(4, 1), &post, &[0, 1, 2, 3], &mut s, &th, 1).unwrap();
        // row 0: tc 0.2 > −0.001, ema 0.68 > 0.6 → pass
        // row 1: tc 0.05 passes, ema 0.545 ≤ 0.6 → fail
        // row 2: tc 0.6 − 0.9 = −0.3 fails
        // row 3: first sighting, tc 0 passes, ema 0.95 → pass
        assert_eq!(b.pass_mask(), &[true, false, false, true]);
    }
}
