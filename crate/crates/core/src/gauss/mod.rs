//! Closed-form divergences between multivariate Gaussians.
//!
//! Every covariance gets `ridge · I` added before it is factorized. All
//! solves go through a Cholesky factor; no explicit inverse is formed for
//! the divergence value.

mod objective;

pub use objective::{
    evaluate_objective, loss_gradient_wrt_features, AlignmentForm, LossBreakdown, ObjectiveEvaluation,
    ObjectiveSettings,
};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// Diagonal ridge added to every covariance before factorization.
pub const DEFAULT_RIDGE: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianParams {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
}

impl GaussianParams {
    pub fn new(mean: DVector<f64>, covariance: DMatrix<f64>) -> Result<Self> {
        check_dim("gaussian covariance rows", mean.len(), covariance.nrows())?;
        check_dim("gaussian covariance cols", mean.len(), covariance.ncols())?;
        Ok(Self { mean, covariance })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Covariance with `ridge` added on the diagonal.
    pub fn regularized_covariance(&self, ridge: f64) -> DMatrix<f64> {
        let mut c = self.covariance.clone();
        for i in 0..c.nrows() {
            c[(i, i)] += ridge;
        }
        c
    }
}

/// Lower-triangular Cholesky factor `L` with `L Lᵀ = A`.
#[derive(Clone, Debug)]
pub struct Cholesky {
    lower: DMatrix<f64>,
}

impl Cholesky {
    /// Fails with the index of the first non-positive pivot.
    pub fn factor(a: &DMatrix<f64>) -> Result<Self> {
        let n = a.nrows();
        check_dim("cholesky input", n, a.ncols())?;
        let mut l = DMatrix::<f64>::zeros(n, n);
        for j in 0..n {
            let mut diag = a[(j, j)];
            for k in 0..j {
                diag -= l[(j, k)] * l[(j, k)];
            }
            if !(diag > 0.0) || !diag.is_finite() {
                return Err(Error::NotPositiveDefinite { pivot: j, value: diag });
            }
            let ljj = diag.sqrt();
            l[(j, j)] = ljj;
            for i in (j + 1)..n {
                let mut s = a[(i, j)];
                for k in 0..j {
                    s -= l[(i, k)] * l[(j, k)];
                }
                l[(i, j)] = s / ljj;
            }
        }
        Ok(Self { lower: l })
    }

    pub fn lower(&self) -> &DMatrix<f64> {
        &self.lower
    }

    pub fn dim(&self) -> usize {
        self.lower.nrows()
    }

    pub fn log_det(&self) -> f64 {
        2.0 * self.lower.diagonal().iter().map(|v| v.ln()).sum::<f64>()
    }

    /// Solves `L X = B` in place.
    pub fn forward_solve(&self, b: &mut DMatrix<f64>) {
        let n = self.dim();
        for col in 0..b.ncols() {
            for i in 0..n {
                let mut s = b[(i, col)];
                for k in 0..i {
                    s -= self.lower[(i, k)] * b[(k, col)];
                }
                b[(i, col)] = s / self.lower[(i, i)];
            }
        }
    }

    /// Solves `Lᵀ X = B` in place.
    pub fn backward_solve(&self, b: &mut DMatrix<f64>) {
        let n = self.dim();
        for col in 0..b.ncols() {
            for i in (0..n).rev() {
                let mut s = b[(i, col)];
                for k in (i + 1)..n {
                    s -= self.lower[(k, i)] * b[(k, col)];
                }
                b[(i, col)] = s / self.lower[(i, i)];
            }
        }
    }

    /// Solves `A X = B`.
    pub fn solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut x = b.clone();
        self.forward_solve(&mut x);
        self.backward_solve(&mut x);
        x
    }

    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        let m = DMatrix::from_column_slice(b.len(), 1, b.as_slice());
        DVector::from_column_slice(self.solve(&m).as_slice())
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        let mut inv = self.solve(&DMatrix::identity(self.dim(), self.dim()));
        crate::stats::symmetrize(&mut inv);
        inv
    }
}

/// Which closed form the divergence uses.
///
/// `Standard` is the true KL divergence. `UnhalvedTrace` weights the trace
/// term by 1 instead of 1/2 (the log-determinant and Mahalanobis terms keep
/// their 1/2). Its constant is chosen so that it vanishes when both
/// distributions coincide, but it is not minimized there.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlForm {
    #[default]
    Standard,
    UnhalvedTrace,
}

impl KlForm {
    fn trace_weight(self) -> f64 {
        match self {
            KlForm::Standard => 0.5,
            KlForm::UnhalvedTrace => 1.0,
        }
    }
}

/// Divergence value together with its gradient with respect to the second
/// (target) distribution's mean and covariance.
#[derive(Clone, Debug)]
pub struct KlTerms {
    pub value: f64,
    pub grad_mean: DVector<f64>,
    /// Symmetric; `dKL = tr(grad_covariance · dΣ)` for symmetric `dΣ`.
    pub grad_covariance: DMatrix<f64>,
}

struct Factored {
    q_chol: Cholesky,
    value: f64,
    diff: DVector<f64>,
    p_reg: DMatrix<f64>,
}

fn factor_pair(p: &GaussianParams, q: &GaussianParams, ridge: f64, form: KlForm) -> Result<Factored> {
    check_dim("kl dimension", p.dim(), q.dim())?;
    let d = p.dim();
    let p_reg = p.regularized_covariance(ridge);
    let q_reg = q.regularized_covariance(ridge);
    let p_chol = Cholesky::factor(&p_reg)?;
    let q_chol = Cholesky::factor(&q_reg)?;

    // tr(Q⁻¹P) = ‖L_q⁻¹ L_p‖²_F
    let mut w = p_chol.lower().clone();
    q_chol.forward_solve(&mut w);
    let trace = w.iter().map(|v| v * v).sum::<f64>();

    let diff = &q.mean - &p.mean;
    let mut z = DMatrix::from_column_slice(d, 1, diff.as_slice());
    q_chol.forward_solve(&mut z);
    let mahalanobis = z.iter().map(|v| v * v).sum::<f64>();

    let log_ratio = q_chol.log_det() - p_chol.log_det();
    let t = form.trace_weight();
    // The constant −t·d makes both forms vanish when p = q.
    let value = t * (trace - d as f64) + 0.5 * mahalanobis + 0.5 * log_ratio;
    Ok(Factored {
        q_chol,
        value,
        diff,
        p_reg,
    })
}

/// `KL(p ‖ q)` under the given closed form, both covariances ridge-regularized.
pub fn kl_divergence(p: &GaussianParams, q: &GaussianParams, ridge: f64, form: KlForm) -> Result<f64> {
    Ok(factor_pair(p, q, ridge, form)?.value)
}

/// Standard `KL(p ‖ q)`.
pub fn kl_gaussian(p: &GaussianParams, q: &GaussianParams, ridge: f64) -> Result<f64> {
    kl_divergence(p, q, ridge, KlForm::Standard)
}

/// `KL(p ‖ q)` and its derivatives with respect to `q`'s mean and covariance.
pub fn kl_with_target_gradient(p: &GaussianParams, q: &GaussianParams, ridge: f64, form: KlForm) -> Result<KlTerms> {
    let f = factor_pair(p, q, ridge, form)?;
    let q_inv = f.q_chol.inverse();
    let grad_mean = &q_inv * &f.diff;
    let qpq = &q_inv * &f.p_reg * &q_inv;
    let t = form.trace_weight();
    let mut grad_covariance = 0.5 * &q_inv - t * qpq - 0.5 * &grad_mean * grad_mean.transpose();
    crate::stats::symmetrize(&mut grad_covariance);
    Ok(KlTerms {
        value: f.value,
        grad_mean,
        grad_covariance,
    })
}

/// `‖μ_q − μ_p‖² + ‖Σ_q − Σ_p‖²_F` with its gradient with respect to `q`.
pub fn moment_distance_with_target_gradient(p: &GaussianParams, q: &GaussianParams) -> Result<KlTerms> {
    check_dim("moment distance dimension", p.dim(), q.dim())?;
    let dm = &q.mean - &p.mean;
    let dc = &q.covariance - &p.covariance;
    Ok(KlTerms {
        value: dm.norm_squared() + dc.norm_squared(),
        grad_mean: 2.0 * dm,
        grad_covariance: 2.0 * dc,
    })
}

/// Sum of per-class `KL(anchor_k ‖ target_k)` over the active classes.
///
/// Returns the total and the per-class vector, with zeros for inactive classes.
pub fn anchored_clustering_loss(
    anchors: &[GaussianParams],
    targets: &[GaussianParams],
    active: &[bool],
    ridge: f64,
    form: KlForm,
) -> Result<(f64, Vec<f64>)> {
    check_dim("anchored clustering class count", anchors.len(), targets.len())?;
    check_dim("anchored clustering active mask", anchors.len(), active.len())?;
    let mut per_class = vec![0.0; anchors.len()];
    for (k, ((a, t), &on)) in anchors.iter().zip(targets).zip(active).enumerate() {
        if on {
            per_class[k] = kl_divergence(a, t, ridge, form).map_err(|e| e.in_class(k))?;
        }
    }
    Ok((per_class.iter().sum(), per_class))
}

/// `KL(source ‖ target)` between the two global feature Gaussians.
pub fn global_alignment_loss(source: &GaussianParams, target: &GaussianParams, ridge: f64) -> Result<f64> {
    kl_gaussian(source, target, ridge)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn scalar(mean: f64, var: f64) -> GaussianParams {
        GaussianParams::new(DVector::from_element(1, mean), DMatrix::from_element(1, 1, var)).unwrap()
    }

    fn textbook_scalar_kl(m1: f64, v1: f64, m2: f64, v2: f64) -> f64 {
        0.5 * ((v2 / v1).ln() + (v1 + (m1 - m2).powi(2)) / v2 - 1.0)
    }

    #[test]
    fn identical_distributions_have_zero_divergence() {
        let p = GaussianParams::new(
            DVector::from_vec(vec![1.0, -2.0]),
            DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]),
        )
        .unwrap();
        assert!(kl_gaussian(&p, &p, DEFAULT_RIDGE).unwrap().abs() < 1e-10);
    }

    #[test]
    fn scalar_hand_value() {
        let kl = kl_gaussian(&scalar(0.0, 1.0), &scalar(1.0, 2.0), 0.0).unwrap();
        assert_relative_eq!(kl, 0.5 * (0.5 + 0.5 - 1.0 + 2f64.ln()), epsilon = 1e-12);
        assert_relative_eq!(kl, 0.346_573_590_279_972_6, epsilon = 1e-12);
        assert_relative_eq!(kl, textbook_scalar_kl(0.0, 1.0, 1.0, 2.0), epsilon = 1e-12);
    }

    #[test]
    fn non_spd_reports_pivot() {
        let p = scalar(0.0, 1.0);
        let bad = GaussianParams::new(DVector::zeros(2), DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0])).unwrap();
        let p2 = GaussianParams::new(DVector::zeros(2), DMatrix::identity(2, 2)).unwrap();
        match kl_gaussian(&p2, &bad, DEFAULT_RIDGE) {
            Err(Error::NotPositiveDefinite { pivot, .. }) => assert_eq!(pivot, 1),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(kl_gaussian(&p, &bad, 0.0), Err(Error::Dimension { .. })));
    }

    #[test]
    fn anchored_loss_skips_inactive_classes() {
        let anchors = vec![scalar(0.0, 1.0), scalar(5.0, 1.0)];
        let targets = vec![scalar(0.0, 1.0), scalar(-5.0, 0.1)];
        let (total, per) =
            anchored_clustering_loss(&anchors, &targets, &[true, false], DEFAULT_RIDGE, KlForm::Standard).unwrap();
        assert!(total.abs() < 1e-12);
        assert_eq!(per[1], 0.0);
    }

    #[test]
    fn anchored_loss_sums_scalar_kls() {
        let anchors = vec![scalar(0.0, 1.0), scalar(1.0, 0.5), scalar(-2.0, 3.0)];
        let targets = vec![scalar(1.0, 2.0), scalar(0.0, 1.5), scalar(-1.0, 0.25)];
        let (total, per) = anchored_clustering_loss(&anchors, &targets, &[true; 3], 0.0, KlForm::Standard).unwrap();
        let expect: Vec<f64> = vec![
            textbook_scalar_kl(0.0, 1.0, 1.0, 2.0),
            textbook_scalar_kl(1.0, 0.5, 0.0, 1.5),
            textbook_scalar_kl(-2.0, 3.0, -1.0, 0.25),
        ];
        for (a, b) in per.iter().zip(&expect) {
            assert_relative_eq!(a, b, epsilon = 1e-12);
        }
        assert_relative_eq!(total, expect.iter().sum::<f64>(), epsilon = 1e-12);
    }

    #[test]
    fn anchored_loss_attaches_class_to_errors() {
        let anchors = vec![scalar(0.0, 1.0), scalar(0.0, 1.0)];
        let targets = vec![scalar(0.0, 1.0), scalar(0.0, -1.0)];
        let err = anchored_clustering_loss(&anchors, &targets, &[true, true], 0.0, KlForm::Standard).unwrap_err();
        assert!(matches!(err, Error::InClass { class: 1, .. }));
        assert!(err.is_numerical());
    }

    #[test]
    fn global_loss_moves_with_target_variance() {
        let s = scalar(0.0, 1.0);
        assert!(global_alignment_loss(&s, &s, 0.0).unwrap().abs() < 1e-14);
        let mut last = None;
        // Above the source variance the divergence grows with target variance.
        for v in [1.5, 2.0, 3.0, 5.0, 8.0] {
            let kl = global_alignment_loss(&s, &scalar(0.0, v), 0.0).unwrap();
            assert_relative_eq!(kl, textbook_scalar_kl(0.0, 1.0, 0.0, v), epsilon = 1e-12);
            if let Some(prev) = last {
                assert!(kl > prev);
            }
            last = Some(kl);
        }
    }

    #[test]
    fn unhalved_trace_form_vanishes_at_equality_but_not_minimal() {
        let s = scalar(0.3, 1.0);
        assert!(kl_divergence(&s, &s, 0.0, KlForm::UnhalvedTrace).unwrap().abs() < 1e-14);
        // λ − ½ ln λ − 1 is minimized at λ = 1/2, i.e. target variance twice the source's.
        let wider = kl_divergence(&s, &scalar(0.3, 2.0), 0.0, KlForm::UnhalvedTrace).unwrap();
        assert_relative_eq!(wider, 0.5 - 0.5 * 0.5f64.ln() - 1.0, epsilon = 1e-12);
        assert!(wider < 0.0);
    }

    #[test]
    fn target_gradient_matches_scalar_derivative() {
        let p = scalar(0.2, 1.3);
        let (m, v) = (-0.4, 0.7);
        let terms = kl_with_target_gradient(&p, &scalar(m, v), 0.0, KlForm::Standard).unwrap();
        // ∂/∂m = (m − μp)/v ; ∂/∂v = ½(1/v − (vp + (m−μp)²)/v²)
        assert_relative_eq!(terms.grad_mean[0], (m - 0.2) / v, epsilon = 1e-12);
        let dv = 0.5 * (1.0 / v - (1.3 + (m - 0.2f64).powi(2)) / (v * v));
        assert_relative_eq!(terms.grad_covariance[(0, 0)], dv, epsilon = 1e-12);
    }

    #[test]
    fn cholesky_solve_round_trip() {
        let a = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0]);
        let ch = Cholesky::factor(&a).unwrap();
        let b = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 2.0, 1.0, -1.0, 3.0]);
        let x = ch.solve(&b);
        assert!((&a * x - b).abs().max() < 1e-12);
        let l = ch.lower();
        assert!((l * l.transpose() - &a).abs().max() < 1e-12);
        assert_relative_eq!(ch.log_det(), a.determinant().ln(), epsilon = 1e-12);
    }
}
