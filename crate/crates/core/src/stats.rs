//! Incremental Gaussian statistics over batched feature streams.
//!
//! A [`RunningGaussian`] keeps the population mean and covariance of every
//! row it has absorbed. Each batch moves the estimate by
//!
//! ```text
//! N'  = N + n
//! a   = clip_coefficient(N', clip)
//! δ   = a Σ (f_i − μ)
//! μ'  = μ + δ
//! Σ'  = Σ + a Σ [(f_i − μ)(f_i − μ)ᵀ − Σ] − δδᵀ
//! ```
//!
//! With an unbounded clip this reproduces the batch maximum-likelihood
//! estimate exactly. Once `N'` reaches the clip the recurrence becomes an
//! exponential moving average with rate `1/clip`.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// Upper bound on the effective sample count used for the update coefficient.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "ClipRepr", into = "ClipRepr")]
pub enum Clip {
    Unbounded,
    At(u64),
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum ClipRepr {
    Count(u64),
    Word(String),
}

impl TryFrom<ClipRepr> for Clip {
    type Error = String;

    fn try_from(value: ClipRepr) -> std::result::Result<Self, Self::Error> {
        match value {
            ClipRepr::Count(0) => Err("clip must be positive or \"unbounded\"".into()),
            ClipRepr::Count(n) => Ok(Clip::At(n)),
            ClipRepr::Word(w) if w == "unbounded" => Ok(Clip::Unbounded),
            ClipRepr::Word(w) => Err(format!("invalid clip {w:?}")),
        }
    }
}

impl From<Clip> for ClipRepr {
    fn from(value: Clip) -> Self {
        match value {
            Clip::Unbounded => ClipRepr::Word("unbounded".into()),
            Clip::At(n) => ClipRepr::Count(n),
        }
    }
}

impl fmt::Display for Clip {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Clip::Unbounded => f.write_str("unbounded"),
            Clip::At(n) => write!(f, "{n}"),
        }
    }
}

/// `1/count` below the clip, `1/clip` at or above it.
pub fn clip_coefficient(count: f64, clip: Clip) -> Result<f64> {
    if !(count > 0.0) {
        return Err(Error::Logic(format!(
            "clip coefficient requested for non-positive count {count}"
        )));
    }
    Ok(match clip {
        Clip::At(limit) if count >= limit as f64 => 1.0 / limit as f64,
        _ => 1.0 / count,
    })
}

/// Neumaier-compensated accumulator over a fixed number of lanes.
#[derive(Clone, Debug)]
pub(crate) struct CompensatedSum {
    sum: Vec<f64>,
    carry: Vec<f64>,
}

impl CompensatedSum {
    pub(crate) fn new(lanes: usize) -> Self {
        Self {
            sum: vec![0.0; lanes],
            carry: vec![0.0; lanes],
        }
    }

    #[inline]
    pub(crate) fn add(&mut self, lane: usize, value: f64) {
        let s = self.sum[lane];
        let t = s + value;
        if s.abs() >= value.abs() {
            self.carry[lane] += (s - t) + value;
        } else {
            self.carry[lane] += (value - t) + s;
        }
        self.sum[lane] = t;
    }

    pub(crate) fn get(&self, lane: usize) -> f64 {
        self.sum[lane] + self.carry[lane]
    }
}

/// What a batch contributed to a running estimate: the mean shift `δ` and the
/// coefficient `a` it was scaled by. `a = 0` means the batch was empty for this
/// estimate and nothing changed.
#[derive(Clone, Debug, PartialEq)]
pub struct StreamUpdate {
    pub delta: DVector<f64>,
    pub coefficient: f64,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunningGaussian {
    mean: DVector<f64>,
    covariance: DMatrix<f64>,
    count: f64,
    clip: Clip,
}

impl RunningGaussian {
    /// Zero mean, zero covariance, no samples.
    pub fn new(dim: usize, clip: Clip) -> Self {
        Self {
            mean: DVector::zeros(dim),
            covariance: DMatrix::zeros(dim, dim),
            count: 0.0,
            clip,
        }
    }

    /// Starts from given moments with a count of zero. The first non-empty
    /// update below the clip overwrites them completely.
    pub fn from_moments(mean: DVector<f64>, covariance: DMatrix<f64>, clip: Clip) -> Result<Self> {
        check_dim("running gaussian covariance rows", mean.len(), covariance.nrows())?;
        check_dim("running gaussian covariance cols", mean.len(), covariance.ncols())?;
        let mut out = Self {
            mean,
            covariance,
            count: 0.0,
            clip,
        };
        symmetrize(&mut out.covariance);
        Ok(out)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    pub fn count(&self) -> f64 {
        self.count
    }

    pub fn clip(&self) -> Clip {
        self.clip
    }

    pub(crate) fn set_count(&mut self, count: f64) {
        self.count = count;
    }

    /// Absorbs every row of `batch`.
    pub fn update_global(&mut self, batch: &DMatrix<f64>) -> Result<StreamUpdate> {
        if batch.nrows() == 0 {
            return Err(Error::Empty("global statistics update with an empty batch"));
        }
        let weights = vec![1.0; batch.nrows()];
        self.update_weighted(batch, &weights)
    }

    /// Absorbs the rows of `batch` that passed the filter and carry pseudo-label `class`.
    pub fn update_cluster(&mut self, batch: &FilteredBatch, class: usize) -> Result<StreamUpdate> {
        if class >= batch.num_classes() {
            return Err(Error::Logic(format!(
                "class {class} out of range for {} classes",
                batch.num_classes()
            )));
        }
        let weights = batch.cluster_weights(class);
        self.update_weighted(batch.features(), &weights)
    }

    /// Weighted form of the recurrence: row `i` enters every sum scaled by
    /// `weights[i]` and the count grows by `Σ weights`. Indicator weights give
    /// the hard-assignment update; posterior weights give soft assignment.
    pub fn update_weighted(&mut self, batch: &DMatrix<f64>, weights: &[f64]) -> Result<StreamUpdate> {
        let d = self.dim();
        check_dim("feature dimension", d, batch.ncols())?;
        check_dim("weight count", batch.nrows(), weights.len())?;
        if let Some(w) = weights.iter().find(|w| !(w.is_finite() && **w >= 0.0)) {
            return Err(Error::Validation(format!("invalid sample weight {w}")));
        }

        let mut total = CompensatedSum::new(1);
        for &w in weights {
            total.add(0, w);
        }
        let total = total.get(0);
        if total == 0.0 {
            return Ok(StreamUpdate {
                delta: DVector::zeros(d),
                coefficient: 0.0,
                weight: 0.0,
            });
        }

        let new_count = self.count + total;
        let a = clip_coefficient(new_count, self.clip)?;

        let mut first = CompensatedSum::new(d);
        let mut second = CompensatedSum::new(d * d);
        let mut centered = vec![0.0; d];
        for (i, &w) in weights.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            for j in 0..d {
                centered[j] = batch[(i, j)] - self.mean[j];
                first.add(j, w * centered[j]);
            }
            for r in 0..d {
                let wr = w * centered[r];
                for c in r..d {
                    second.add(r * d + c, wr * centered[c]);
                }
            }
        }

        let delta = DVector::from_fn(d, |j, _| a * first.get(j));
        let mut cov = self.covariance.clone();
        for r in 0..d {
            for c in r..d {
                let scatter = second.get(r * d + c);
                let v = self.covariance[(r, c)] + a * (scatter - total * self.covariance[(r, c)]) - delta[r] * delta[c];
                cov[(r, c)] = v;
                cov[(c, r)] = v;
            }
        }
        symmetrize(&mut cov);

        self.mean += &delta;
        self.covariance = cov;
        self.count = new_count;
        Ok(StreamUpdate {
            delta,
            coefficient: a,
            weight: total,
        })
    }
}

/// Forces exact symmetry by averaging with the transpose.
pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for r in 0..n {
        for c in (r + 1)..n {
            let v = 0.5 * (m[(r, c)] + m[(c, r)]);
            m[(r, c)] = v;
            m[(c, r)] = v;
        }
    }
}

/// Population mean and covariance (divisor `N`) of the rows of `features`.
pub fn batch_mle(features: &DMatrix<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = features.nrows();
    if n == 0 {
        return Err(Error::Empty("maximum-likelihood estimate of zero samples"));
    }
    let d = features.ncols();
    let mut first = CompensatedSum::new(d);
    for i in 0..n {
        for j in 0..d {
            first.add(j, features[(i, j)]);
        }
    }
    let mean = DVector::from_fn(d, |j, _| first.get(j) / n as f64);

    let mut second = CompensatedSum::new(d * d);
    for i in 0..n {
        for r in 0..d {
            let cr = features[(i, r)] - mean[r];
            for c in r..d {
                second.add(r * d + c, cr * (features[(i, c)] - mean[c]));
            }
        }
    }
    let mut cov = DMatrix::zeros(d, d);
    for r in 0..d {
        for c in r..d {
            let v = second.get(r * d + c) / n as f64;
            cov[(r, c)] = v;
            cov[(c, r)] = v;
        }
    }
    Ok((mean, cov))
}

/// A batch of features with pseudo-labels and the combined filter decision.
#[derive(Clone, Debug, PartialEq)]
pub struct FilteredBatch {
    features: DMatrix<f64>,
    pseudo_labels: Vec<usize>,
    pass_mask: Vec<bool>,
    num_classes: usize,
}

impl FilteredBatch {
    pub fn new(
        features: DMatrix<f64>,
        pseudo_labels: Vec<usize>,
        pass_mask: Vec<bool>,
        num_classes: usize,
    ) -> Result<Self> {
        check_dim("pseudo label count", features.nrows(), pseudo_labels.len())?;
        check_dim("pass mask length", features.nrows(), pass_mask.len())?;
        if let Some(&bad) = pseudo_labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::Validation(format!(
                "pseudo label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(Self {
            features,
            pseudo_labels,
            pass_mask,
            num_classes,
        })
    }

    pub fn features(&self) -> &DMatrix<f64> {
        &self.features
    }

    pub fn pseudo_labels(&self) -> &[usize] {
        &self.pseudo_labels
    }

    pub fn pass_mask(&self) -> &[bool] {
        &self.pass_mask
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.pseudo_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pseudo_labels.is_empty()
    }

    /// Replaces the features while keeping labels and mask.
    pub fn with_features(&self, features: DMatrix<f64>) -> Result<Self> {
        Self::new(
            features,
            self.pseudo_labels.clone(),
            self.pass_mask.clone(),
            self.num_classes,
        )
    }

    /// Forces every row to pass.
    pub fn unfiltered(mut self) -> Self {
        self.pass_mask.iter_mut().for_each(|m| *m = true);
        self
    }

    /// Indicator weights `pass_i · 1(ŷ_i = class)`.
    pub fn cluster_weights(&self, class: usize) -> Vec<f64> {
        self.pseudo_labels
            .iter()
            .zip(&self.pass_mask)
            .map(|(&y, &pass)| if pass && y == class { 1.0 } else { 0.0 })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn column(values: &[f64]) -> DMatrix<f64> {
        DMatrix::from_column_slice(values.len(), 1, values)
    }

    #[test]
    fn clip_coefficient_branches() {
        assert_eq!(clip_coefficient(100.0, Clip::At(1280)).unwrap(), 0.01);
        assert_eq!(clip_coefficient(2000.0, Clip::At(1280)).unwrap(), 1.0 / 1280.0);
        assert_eq!(clip_coefficient(1280.0, Clip::At(1280)).unwrap(), 1.0 / 1280.0);
        assert_eq!(clip_coefficient(5.0, Clip::Unbounded).unwrap(), 0.2);
        assert!(matches!(clip_coefficient(0.0, Clip::At(3)), Err(Error::Logic(_))));
        assert!(clip_coefficient(-1.0, Clip::Unbounded).is_err());
    }

    #[test]
    fn scalar_stream_matches_population_mle() {
        let mut g = RunningGaussian::new(1, Clip::Unbounded);
        g.update_global(&column(&[1.0, 3.0])).unwrap();
        g.update_global(&column(&[5.0])).unwrap();
        assert_relative_eq!(g.mean()[0], 3.0, epsilon = 1e-12);
        assert_relative_eq!(g.covariance()[(0, 0)], 8.0 / 3.0, epsilon = 1e-12);
        assert_eq!(g.count(), 3.0);
    }

    #[test]
    fn constant_batch_has_zero_covariance() {
        let c = -2.75;
        let mut g = RunningGaussian::new(1, Clip::Unbounded);
        g.update_global(&column(&[c, c, c])).unwrap();
        assert_eq!(g.mean()[0], c);
        assert_eq!(g.covariance()[(0, 0)], 0.0);
    }

    #[test]
    fn first_update_overwrites_initial_moments() {
        let init_cov = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
        let mut g = RunningGaussian::from_moments(DVector::from_vec(vec![9.0, -9.0]), init_cov, Clip::At(128)).unwrap();
        let batch = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 2.0, 2.0]);
        g.update_global(&batch).unwrap();
        assert_relative_eq!(g.mean()[0], 1.0, epsilon = 1e-12);
        assert_relative_eq!(g.covariance()[(0, 1)], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn empty_global_batch_is_rejected() {
        let mut g = RunningGaussian::new(2, Clip::Unbounded);
        assert!(matches!(g.update_global(&DMatrix::zeros(0, 2)), Err(Error::Empty(_))));
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let mut g = RunningGaussian::new(3, Clip::Unbounded);
        assert!(matches!(
            g.update_global(&DMatrix::zeros(2, 2)),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn cluster_update_with_nothing_passing_is_a_no_op() {
        let mut g = RunningGaussian::from_moments(
            DVector::from_vec(vec![1.0]),
            DMatrix::from_element(1, 1, 2.0),
            Clip::At(128),
        )
        .unwrap();
        let before = g.clone();
        let batch = FilteredBatch::new(column(&[3.0, 4.0]), vec![0, 0], vec![false, false], 2).unwrap();
        let up = g.update_cluster(&batch, 0).unwrap();
        assert_eq!(up.coefficient, 0.0);
        assert_eq!(g, before);
    }

    #[test]
    fn cluster_update_uses_only_qualifying_rows() {
        let mut g = RunningGaussian::new(1, Clip::Unbounded);
        let batch = FilteredBatch::new(
            column(&[2.0, 100.0, 4.0, -7.0]),
            vec![1, 1, 1, 0],
            vec![true, false, true, true],
            2,
        )
        .unwrap();
        let up = g.update_cluster(&batch, 1).unwrap();
        assert_relative_eq!(g.mean()[0], 3.0, epsilon = 1e-12);
        assert_relative_eq!(g.covariance()[(0, 0)], 1.0, epsilon = 1e-12);
        assert_eq!(g.count(), 2.0);
        assert_eq!(up.coefficient, 0.5);
    }

    #[test]
    fn cluster_index_out_of_range() {
        let mut g = RunningGaussian::new(1, Clip::Unbounded);
        let batch = FilteredBatch::new(column(&[2.0]), vec![0], vec![true], 2).unwrap();
        assert!(g.update_cluster(&batch, 2).is_err());
    }

    #[test]
    fn filtered_batch_validates_shapes() {
        assert!(FilteredBatch::new(column(&[1.0, 2.0]), vec![0], vec![true, true], 2).is_err());
        assert!(FilteredBatch::new(column(&[1.0]), vec![0], vec![true, true], 2).is_err());
        assert!(FilteredBatch::new(column(&[1.0]), vec![3], vec![true], 2).is_err());
    }

    #[test]
    fn batch_mle_hand_values() {
        let (m, c) = batch_mle(&column(&[0.0, 2.0])).unwrap();
        assert_eq!(m[0], 1.0);
        assert_eq!(c[(0, 0)], 1.0);
        let (_, c) = batch_mle(&DMatrix::from_row_slice(1, 3, &[1.0, 2.0, 3.0])).unwrap();
        assert!(c.iter().all(|&v| v == 0.0));
        assert!(matches!(batch_mle(&DMatrix::zeros(0, 3)), Err(Error::Empty(_))));
    }

    #[test]
    fn clipped_coefficient_is_exact_once_saturated() {
        let mut g = RunningGaussian::new(1, Clip::At(4));
        let a1 = g.update_global(&column(&[1.0, 2.0])).unwrap().coefficient;
        let a2 = g.update_global(&column(&[1.0, 2.0])).unwrap().coefficient;
        let a3 = g.update_global(&column(&[1.0, 2.0])).unwrap().coefficient;
        assert_eq!(a1, 0.5);
        assert_eq!(a2, 0.25);
        assert_eq!(a3, 0.25);
        assert_eq!(g.count(), 6.0);
    }

    #[test]
    fn clip_serde_accepts_count_or_unbounded() {
        #[derive(Deserialize)]
        struct Wrap {
            c: Clip,
        }
        let w: Wrap = serde_json::from_str(r#"{"c": 128}"#).unwrap();
        assert_eq!(w.c, Clip::At(128));
        let w: Wrap = serde_json::from_str(r#"{"c": "unbounded"}"#).unwrap();
        assert_eq!(w.c, Clip::Unbounded);
        assert!(serde_json::from_str::<Wrap>(r#"{"c": 0}"#).is_err());
    }
}
