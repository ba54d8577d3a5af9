use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::datagen::Dataset;
use crate::error::{check_dim, Error, Result};
use crate::gauss::GaussianParams;
use crate::nn::{ClassifierHead, Model};
use crate::stats::{batch_mle, Clip, RunningGaussian};
use crate::tensorfile::{self, Tensor};

const ANCHORS_KIND: &[u8; 8] = b"ANCHORS\0";

/// Per-class and global source feature Gaussians the target clusters are
/// pulled towards. Stored without ridge.
#[derive(Clone, Debug, PartialEq)]
pub struct SourceAnchors {
    classes: Vec<GaussianParams>,
    priors: Vec<f64>,
    global: GaussianParams,
}

impl SourceAnchors {
    pub fn new(classes: Vec<GaussianParams>, priors: Vec<f64>, global: GaussianParams) -> Result<Self> {
        if classes.is_empty() {
            return Err(Error::Anchor("no classes".into()));
        }
        check_dim("anchor priors", classes.len(), priors.len())?;
        for c in &classes {
            check_dim("anchor dimension", global.dim(), c.dim())?;
        }
        let total: f64 = priors.iter().sum();
        if (total - 1.0).abs() > 1e-9 || priors.iter().any(|&p| p < 0.0) {
            return Err(Error::Anchor(format!("priors must form a distribution (sum {total})")));
        }
        Ok(Self {
            classes,
            priors,
            global,
        })
    }

    /// Per-class and global maximum-likelihood Gaussians of labeled features,
    /// with uniform priors.
    pub fn from_features(features: &DMatrix<f64>, labels: &[usize], num_classes: usize) -> Result<Self> {
        check_dim("anchor labels", features.nrows(), labels.len())?;
        let mut rows: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
        for (i, &y) in labels.iter().enumerate() {
            if y >= num_classes {
                return Err(Error::Anchor(format!("label {y} out of range")));
            }
            rows[y].push(i);
        }
        let mut classes = Vec::with_capacity(num_classes);
        for (k, r) in rows.iter().enumerate() {
            if r.is_empty() {
                return Err(Error::Anchor(format!("class {k} has no source samples")));
            }
            let (mean, cov) = batch_mle(&features.select_rows(r))?;
            classes.push(GaussianParams::new(mean, cov)?);
        }
        let (mean, cov) = batch_mle(features)?;
        Self::new(
            classes,
            vec![1.0 / num_classes as f64; num_classes],
            GaussianParams::new(mean, cov)?,
        )
    }

    /// Moment-matched single Gaussian of the prior-weighted class mixture.
    fn mixture_moments(classes: &[GaussianParams], priors: &[f64]) -> GaussianParams {
        let d = classes[0].dim();
        let mut mean = DVector::zeros(d);
        let mut second = DMatrix::zeros(d, d);
        for (c, &p) in classes.iter().zip(priors) {
            mean += p * &c.mean;
            second += p * (&c.covariance + &c.mean * c.mean.transpose());
        }
        let mut cov = second - &mean * mean.transpose();
        crate::stats::symmetrize(&mut cov);
        GaussianParams { mean, covariance: cov }
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn dim(&self) -> usize {
        self.global.dim()
    }

    pub fn class(&self, k: usize) -> &GaussianParams {
        &self.classes[k]
    }

    pub fn classes(&self) -> &[GaussianParams] {
        &self.classes
    }

    pub fn priors(&self) -> &[f64] {
        &self.priors
    }

    pub fn global(&self) -> &GaussianParams {
        &self.global
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut t = vec![
            Tensor::scalar("classes", self.classes.len() as f64),
            Tensor::from_vector("priors", &DVector::from_column_slice(&self.priors)),
            Tensor::from_vector("global.mean", &self.global.mean),
            Tensor::from_matrix("global.covariance", &self.global.covariance),
        ];
        for (k, c) in self.classes.iter().enumerate() {
            t.push(Tensor::from_vector(format!("class{k}.mean"), &c.mean));
            t.push(Tensor::from_matrix(format!("class{k}.covariance"), &c.covariance));
        }
        tensorfile::save(path, ANCHORS_KIND, &t)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let t = tensorfile::load(path, ANCHORS_KIND)?;
        let k = tensorfile::find(&t, "classes")?.to_scalar()? as usize;
        let mut classes = Vec::with_capacity(k);
        for i in 0..k {
            classes.push(GaussianParams::new(
                tensorfile::find(&t, &format!("class{i}.mean"))?.to_vector()?,
                tensorfile::find(&t, &format!("class{i}.covariance"))?.to_matrix()?,
            )?);
        }
        Self::new(
            classes,
            tensorfile::find(&t, "priors")?.to_vector()?.as_slice().to_vec(),
            GaussianParams::new(
                tensorfile::find(&t, "global.mean")?.to_vector()?,
                tensorfile::find(&t, "global.covariance")?.to_matrix()?,
            )?,
        )
    }
}

/// Anchors from the trained model's features over the labeled source set.
pub fn compute_source_anchors(model: &Model, source: &Dataset) -> Result<SourceAnchors> {
    let features = model.features(&source.inputs)?;
    SourceAnchors::from_features(&features, &source.labels, model.num_classes())
}

/// Source-free anchors: each classifier weight vector rescaled to the norm
/// of its target cluster mean (unit norm if that mean is zero), with
/// covariance `cov_scale · I`. The global anchor is the moment-matched
/// mixture of the class anchors under the bank priors.
pub fn classifier_prototype_anchors(
    head: &ClassifierHead,
    bank: &ClusterBank,
    cov_scale: f64,
) -> Result<SourceAnchors> {
    check_dim("prototype class count", head.num_classes(), bank.num_classes())?;
    check_dim("prototype dimension", head.weight.ncols(), bank.dim())?;
    let d = bank.dim();
    let mut classes = Vec::with_capacity(head.num_classes());
    for k in 0..head.num_classes() {
        let w: DVector<f64> = head.weight.row(k).transpose();
        let wn = w.norm();
        if wn == 0.0 || !wn.is_finite() {
            return Err(Error::Anchor(format!("classifier weight of class {k} has zero norm")));
        }
        let target_norm = bank.clusters()[k].mean().norm();
        let scale = if target_norm > 0.0 { target_norm } else { 1.0 };
        classes.push(GaussianParams {
            mean: w * (scale / wn),
            covariance: DMatrix::identity(d, d) * cov_scale,
        });
    }
    let priors = bank.priors().to_vec();
    let global = SourceAnchors::mixture_moments(&classes, &priors);
    SourceAnchors::new(classes, priors, global)
}

/// Running per-class and global Gaussians of the target features.
#[derive(Clone, Debug, PartialEq)]
pub struct ClusterBank {
    clusters: Vec<RunningGaussian>,
    priors: Vec<f64>,
    global: RunningGaussian,
    observed: Vec<f64>,
}

impl ClusterBank {
    pub fn new(clusters: Vec<RunningGaussian>, priors: Vec<f64>, global: RunningGaussian) -> Result<Self> {
        check_dim("bank priors", clusters.len(), priors.len())?;
        for c in &clusters {
            check_dim("bank dimension", global.dim(), c.dim())?;
        }
        let observed = vec![0.0; clusters.len()];
        Ok(Self {
            clusters,
            priors,
            global,
            observed,
        })
    }

    /// Clusters start at their anchors with zero count.
    pub fn from_anchors(anchors: &SourceAnchors, cluster_clip: Clip, global_clip: Clip) -> Result<Self> {
        let clusters = anchors
            .classes()
            .iter()
            .map(|c| RunningGaussian::from_moments(c.mean.clone(), c.covariance.clone(), cluster_clip))
            .collect::<Result<Vec<_>>>()?;
        let global = RunningGaussian::from_moments(
            anchors.global().mean.clone(),
            anchors.global().covariance.clone(),
            global_clip,
        )?;
        let k = clusters.len();
        Self::new(clusters, vec![1.0 / k as f64; k], global)
    }

    /// Source-free start: cluster means are the classifier weight directions
    /// at norm `scale`, covariances `cov_scale · I`.
    pub fn from_head(
        head: &ClassifierHead,
        scale: f64,
        cov_scale: f64,
        cluster_clip: Clip,
        global_clip: Clip,
    ) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::Anchor(format!("prototype scale must be positive, got {scale}")));
        }
        let d = head.weight.ncols();
        let k = head.num_classes();
        let placeholder = Self::new(
            vec![RunningGaussian::new(d, cluster_clip); k],
            vec![1.0 / k as f64; k],
            RunningGaussian::new(d, global_clip),
        )?;
        let unit = classifier_prototype_anchors(head, &placeholder, cov_scale)?;
        let classes: Vec<GaussianParams> = unit
            .classes()
            .iter()
            .map(|c| GaussianParams {
                mean: &c.mean * scale,
                covariance: c.covariance.clone(),
            })
            .collect();
        let global = SourceAnchors::mixture_moments(&classes, unit.priors());
        let anchors = SourceAnchors::new(classes, unit.priors().to_vec(), global)?;
        Self::from_anchors(&anchors, cluster_clip, global_clip)
    }

    pub fn num_classes(&self) -> usize {
        self.clusters.len()
    }

    pub fn dim(&self) -> usize {
        self.global.dim()
    }

    pub fn clusters(&self) -> &[RunningGaussian] {
        &self.clusters
    }

    pub fn clusters_mut(&mut self) -> &mut [RunningGaussian] {
        &mut self.clusters
    }

    pub fn global(&self) -> &RunningGaussian {
        &self.global
    }

    pub fn global_mut(&mut self) -> &mut RunningGaussian {
        &mut self.global
    }

    pub fn priors(&self) -> &[f64] {
        &self.priors
    }

    /// Sample weight each cluster has absorbed, excluding any prior count.
    pub fn observed(&self) -> &[f64] {
        &self.observed
    }

    pub(crate) fn add_observed(&mut self, class: usize, weight: f64) {
        self.observed[class] += weight;
    }

    pub fn counts(&self) -> (f64, Vec<f64>) {
        (self.global.count(), self.clusters.iter().map(|c| c.count()).collect())
    }

    pub(crate) fn set_counts(&mut self, global: f64, clusters: &[f64]) {
        self.global.set_count(global);
        for (c, &n) in self.clusters.iter_mut().zip(clusters) {
            c.set_count(n);
        }
    }
}
