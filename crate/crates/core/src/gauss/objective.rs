//! The adaptation objective `L = L_ac + λ·L_ga` evaluated on one minibatch,
//! with its gradient with respect to the minibatch features.
//!
//! The bank statistics before the minibatch are constants. The minibatch
//! moves each running estimate by the recurrence in [`crate::stats`]; for a
//! row `f_i` with weight `w_i` in an estimate updated with coefficient `a`,
//! the new moments depend on `f_i` through
//!
//! ```text
//! ∂μ'/∂f_i = w_i a I
//! dΣ'      = w_i a [(f_i − μ') df_iᵀ + df_i (f_i − μ')ᵀ]
//! ```
//!
//! so a loss with gradients `g_μ`, `G_Σ` (symmetric) at the new moments pulls
//! back to `w_i a (g_μ + 2 G_Σ (f_i − μ'))`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{kl_with_target_gradient, moment_distance_with_target_gradient, GaussianParams, KlForm, KlTerms};
use crate::engine::{ClusterBank, SourceAnchors};
use crate::error::{check_dim, Result};
use crate::stats::{FilteredBatch, RunningGaussian, StreamUpdate};

/// How the global target Gaussian is matched to the global source Gaussian.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignmentForm {
    /// `KL(source ‖ target)`.
    #[default]
    Kld,
    /// Squared distance of first two moments, `‖Δμ‖² + ‖ΔΣ‖²_F`.
    L2,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectiveSettings {
    pub lambda: f64,
    pub ridge: f64,
    pub kl_form: KlForm,
    pub alignment: AlignmentForm,
}

impl Default for ObjectiveSettings {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            ridge: super::DEFAULT_RIDGE,
            kl_form: KlForm::Standard,
            alignment: AlignmentForm::Kld,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_ac: f64,
    pub l_ga: f64,
    pub total: f64,
    pub per_class_kl: Vec<f64>,
    pub skipped_classes: Vec<usize>,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        self.total.is_finite() && self.l_ac.is_finite() && self.l_ga.is_finite()
    }
}

#[derive(Clone, Debug)]
pub struct ObjectiveEvaluation {
    pub loss: LossBreakdown,
    /// `∂L/∂f_i`, one row per minibatch row.
    pub grad_features: DMatrix<f64>,
    /// The bank after absorbing the minibatch.
    pub bank: ClusterBank,
}

fn params_of(g: &RunningGaussian) -> GaussianParams {
    GaussianParams {
        mean: g.mean().clone(),
        covariance: g.covariance().clone(),
    }
}

/// Adds `scale · w_i · a (g_μ + 2 G (f_i − μ'))` to every row with nonzero weight.
fn pull_back(
    grad: &mut DMatrix<f64>,
    features: &DMatrix<f64>,
    weights: &[f64],
    update: &StreamUpdate,
    new_mean: &DVector<f64>,
    terms: &KlTerms,
    scale: f64,
) {
    if update.coefficient == 0.0 {
        return;
    }
    let d = features.ncols();
    let two_g = 2.0 * &terms.grad_covariance;
    let mut centered = DVector::zeros(d);
    for (i, &w) in weights.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        for j in 0..d {
            centered[j] = features[(i, j)] - new_mean[j];
        }
        let row = &terms.grad_mean + &two_g * &centered;
        let s = scale * w * update.coefficient;
        for j in 0..d {
            grad[(i, j)] += s * row[j];
        }
    }
}

/// Updates a copy of `bank_before` with the minibatch and evaluates the
/// objective and its feature gradient.
///
/// `cluster_weights[k][i]` is the weight of row `i` in cluster `k`: the
/// filter-and-label indicator for hard assignment, or the posterior for soft
/// assignment. Every row enters the global estimate with weight 1. Classes
/// that have not absorbed any sample weight yet are skipped.
pub fn evaluate_objective(
    features: &DMatrix<f64>,
    cluster_weights: &[Vec<f64>],
    bank_before: &ClusterBank,
    anchors: &SourceAnchors,
    settings: &ObjectiveSettings,
) -> Result<ObjectiveEvaluation> {
    let k_classes = bank_before.num_classes();
    check_dim("anchor class count", k_classes, anchors.num_classes())?;
    check_dim("cluster weight class count", k_classes, cluster_weights.len())?;
    check_dim("feature dimension", bank_before.dim(), features.ncols())?;
    for w in cluster_weights {
        check_dim("cluster weight length", features.nrows(), w.len())?;
    }

    let mut bank = bank_before.clone();
    let mut grad = DMatrix::zeros(features.nrows(), features.ncols());

    let global_update = bank.global_mut().update_global(features)?;
    let mut cluster_updates = Vec::with_capacity(k_classes);
    for (k, w) in cluster_weights.iter().enumerate() {
        let up = bank.clusters_mut()[k]
            .update_weighted(features, w)
            .map_err(|e| e.in_class(k))?;
        bank.add_observed(k, up.weight);
        cluster_updates.push(up);
    }

    let mut per_class_kl = vec![0.0; k_classes];
    let mut skipped_classes = Vec::new();
    for k in 0..k_classes {
        let cluster = &bank.clusters()[k];
        if bank.observed()[k] == 0.0 {
            skipped_classes.push(k);
            continue;
        }
        let target = params_of(cluster);
        let terms = kl_with_target_gradient(anchors.class(k), &target, settings.ridge, settings.kl_form)
            .map_err(|e| e.in_class(k))?;
        per_class_kl[k] = terms.value;
        pull_back(
            &mut grad,
            features,
            &cluster_weights[k],
            &cluster_updates[k],
            cluster.mean(),
            &terms,
            1.0,
        );
    }
    let l_ac: f64 = per_class_kl.iter().sum();

    let global_target = params_of(bank.global());
    let global_terms = match settings.alignment {
        AlignmentForm::Kld => {
            kl_with_target_gradient(anchors.global(), &global_target, settings.ridge, settings.kl_form)?
        }
        AlignmentForm::L2 => moment_distance_with_target_gradient(anchors.global(), &global_target)?,
    };
    if settings.lambda != 0.0 {
        let ones = vec![1.0; features.nrows()];
        pull_back(
            &mut grad,
            features,
            &ones,
            &global_update,
            bank.global().mean(),
            &global_terms,
            settings.lambda,
        );
    }

    let l_ga = global_terms.value;
    Ok(ObjectiveEvaluation {
        loss: LossBreakdown {
            l_ac,
            l_ga,
            total: l_ac + settings.lambda * l_ga,
            per_class_kl,
            skipped_classes,
        },
        grad_features: grad,
        bank,
    })
}

/// Feature gradient of the objective for a hard-assigned filtered batch.
pub fn loss_gradient_wrt_features(
    batch: &FilteredBatch,
    bank_before: &ClusterBank,
    anchors: &SourceAnchors,
    settings: &ObjectiveSettings,
) -> Result<DMatrix<f64>> {
    let weights: Vec<Vec<f64>> = (0..batch.num_classes()).map(|k| batch.cluster_weights(k)).collect();
    Ok(evaluate_objective(batch.features(), &weights, bank_before, anchors, settings)?.grad_features)
}
