//! The sequential test-time training loop.
//!
//! Every arriving batch is first predicted with the current model and logged;
//! only then does it join the sample queue, and the model is updated by a
//! few epochs of minibatches drawn from the queue. A prediction therefore
//! never depends on its own batch or on anything that arrives later.

mod anchors;
mod log;
mod queue;

use std::collections::HashSet;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use anchors::{classifier_prototype_anchors, compute_source_anchors, ClusterBank, SourceAnchors};
pub use log::{PredictionLog, PredictionRecord};
pub use queue::SampleQueue;

use crate::config::{AnchorMode, ClusterUpdate, CountPer, Protocol, RidgeMode, SttrConfig};
use crate::error::{check_dim, Error, Result};
use crate::filter::{make_filtered_batch, PosteriorStore, SampleId};
use crate::gauss::evaluate_objective;
use crate::nn::{Model, SgdState};

/// Loss bookkeeping for one streamed batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepSummary {
    pub batch_index: u64,
    pub minibatches: usize,
    pub mean_total: f64,
    pub mean_l_ac: f64,
    pub mean_l_ga: f64,
    /// Share of minibatch rows that passed both filters.
    pub pass_fraction: f64,
}

pub struct Engine {
    config: SttrConfig,
    model: Model,
    sgd: SgdState,
    anchors: Option<SourceAnchors>,
    bank: ClusterBank,
    store: PosteriorStore,
    queue: SampleQueue,
    log: PredictionLog,
    rng: ChaCha8Rng,
    ridge: f64,
    /// Source-free bank still at its unit-scale placeholder.
    bank_pending: bool,
    next_arrival: u64,
    batches_seen: u64,
    visits: u64,
    steps: Vec<StepSummary>,
}

impl Engine {
    /// `anchors` is required for source-statistics anchoring and ignored for
    /// classifier prototypes, which are rebuilt from the head on every update.
    pub fn new(model: Model, anchors: Option<SourceAnchors>, config: SttrConfig) -> Result<Self> {
        config.validate()?;
        let bank = match config.anchor_mode {
            AnchorMode::SourceStats => {
                let a = anchors
                    .as_ref()
                    .ok_or_else(|| Error::Anchor("source anchors are required for source_stats mode".into()))?;
                check_dim("anchor class count", model.num_classes(), a.num_classes())?;
                check_dim("anchor dimension", model.feature_dim(), a.dim())?;
                ClusterBank::from_anchors(a, config.clip_cluster, config.clip_global)?
            }
            // Placeholder at unit scale until the first batch fixes the scale.
            AnchorMode::ClassifierPrototypes => ClusterBank::from_head(
                &model.head,
                1.0,
                config.prototype_cov_scale,
                config.clip_cluster,
                config.clip_global,
            )?,
        };
        let anchors = match config.anchor_mode {
            AnchorMode::SourceStats => anchors,
            AnchorMode::ClassifierPrototypes => None,
        };
        let mut bank = bank;
        let k = bank.num_classes();
        bank.set_counts(config.prior_count_global, &vec![config.prior_count; k]);
        let ridge = effective_ridge(&config, anchors.as_ref(), &model, &bank)?;
        Ok(Self {
            ridge,
            bank_pending: config.anchor_mode == AnchorMode::ClassifierPrototypes,
            sgd: SgdState::new(config.learning_rate, config.momentum)?,
            queue: SampleQueue::new(config.queue_capacity, config.batch_size)?,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            config,
            model,
            anchors,
            bank,
            store: PosteriorStore::new(),
            log: PredictionLog::new(),
            next_arrival: 0,
            batches_seen: 0,
            visits: 0,
            steps: Vec::new(),
        })
    }

    pub fn config(&self) -> &SttrConfig {
        &self.config
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn bank(&self) -> &ClusterBank {
        &self.bank
    }

    pub fn queue(&self) -> &SampleQueue {
        &self.queue
    }

    pub fn store(&self) -> &PosteriorStore {
        &self.store
    }

    pub fn log(&self) -> &PredictionLog {
        &self.log
    }

    pub fn steps(&self) -> &[StepSummary] {
        &self.steps
    }

    /// Starts a fresh log (a new pass); model, statistics and history persist.
    pub fn reset_log(&mut self) {
        self.log = PredictionLog::new();
        self.next_arrival = 0;
    }

    /// Logs predictions for a batch with the current model, without adapting.
    pub fn predict_batch(
        &mut self,
        ids: &[SampleId],
        inputs: &DMatrix<f64>,
        labels: Option<&[usize]>,
    ) -> Result<Vec<PredictionRecord>> {
        check_dim("batch ids", inputs.nrows(), ids.len())?;
        if let Some(l) = labels {
            check_dim("batch labels", inputs.nrows(), l.len())?;
        }
        let predicted = self.model.predict(inputs)?;
        let version = self.model.version();
        let records: Vec<PredictionRecord> = ids
            .iter()
            .zip(predicted)
            .enumerate()
            .map(|(i, (&id, p))| PredictionRecord {
                sample_id: id,
                arrival_index: self.next_arrival + i as u64,
                predicted_class: p,
                true_class: labels.map(|l| l[i]),
                model_version: version,
            })
            .collect();
        self.next_arrival += ids.len() as u64;
        self.log.extend(records.iter().copied());
        Ok(records)
    }

    /// Predicts the batch, queues it, and adapts on the queue.
    pub fn stream_step(
        &mut self,
        ids: &[SampleId],
        inputs: &DMatrix<f64>,
        labels: Option<&[usize]>,
    ) -> Result<Vec<PredictionRecord>> {
        let records = self.predict_batch(ids, inputs, labels)?;
        if self.config.adapt {
            let evicted = self.queue.push(ids.to_vec(), inputs.clone())?;
            if self.config.protocol == Protocol::OnePass {
                for id in evicted {
                    self.store.evict(id);
                }
            }
            self.adapt(ids)?;
        }
        self.batches_seen += 1;
        Ok(records)
    }

    fn adapt(&mut self, arrived: &[SampleId]) -> Result<()> {
        let inputs = self.queue.inputs().expect("queue holds the new batch");
        let ids = self.queue.ids();
        if self.bank_pending {
            self.init_prototype_bank(&inputs)?;
        }
        let k_classes = self.model.num_classes();
        let (base_global, base_clusters) = self.bank.counts();
        let arrived: HashSet<SampleId> = arrived.iter().copied().collect();
        let mut arrived_mass = vec![0.0; k_classes];
        let mut objective = self.config.objective();
        objective.ridge = self.ridge;
        let thresholds = self.config.thresholds();

        let mut order: Vec<usize> = (0..ids.len()).collect();
        let mut summary = StepSummary {
            batch_index: self.batches_seen,
            minibatches: 0,
            mean_total: 0.0,
            mean_l_ac: 0.0,
            mean_l_ga: 0.0,
            pass_fraction: 0.0,
        };
        let mut rows_seen = 0usize;
        let mut rows_passed = 0usize;

        for epoch in 0..self.config.inner_epochs {
            order.shuffle(&mut self.rng);
            let last_epoch = epoch + 1 == self.config.inner_epochs;
            for chunk in order.chunks(self.config.batch_size) {
                let x = inputs.select_rows(chunk);
                let chunk_ids: Vec<SampleId> = chunk.iter().map(|&i| ids[i]).collect();
                let pass = self.model.forward(&x)?;
                let filtered = make_filtered_batch(
                    &pass.features,
                    &pass.posteriors,
                    &chunk_ids,
                    &mut self.store,
                    &thresholds,
                    self.visits,
                )?;
                self.visits += 1;
                rows_seen += filtered.len();
                rows_passed += filtered.pass_mask().iter().filter(|&&m| m).count();

                let weights: Vec<Vec<f64>> = match self.config.cluster_update {
                    ClusterUpdate::Filtered => (0..k_classes).map(|k| filtered.cluster_weights(k)).collect(),
                    ClusterUpdate::NoFilter => {
                        let all = filtered.clone().unfiltered();
                        (0..k_classes).map(|k| all.cluster_weights(k)).collect()
                    }
                    ClusterUpdate::SoftAssignment => (0..k_classes)
                        .map(|k| pass.posteriors.column(k).iter().copied().collect())
                        .collect(),
                };
                if last_epoch && self.config.count_per == CountPer::Outer {
                    for (r, id) in chunk_ids.iter().enumerate() {
                        if arrived.contains(id) {
                            for k in 0..k_classes {
                                arrived_mass[k] += weights[k][r];
                            }
                        }
                    }
                }

                let prototypes;
                let anchors = match self.config.anchor_mode {
                    AnchorMode::SourceStats => self.anchors.as_ref().expect("checked at construction"),
                    AnchorMode::ClassifierPrototypes => {
                        prototypes = classifier_prototype_anchors(
                            &self.model.head,
                            &self.bank,
                            self.config.prototype_cov_scale,
                        )?;
                        &prototypes
                    }
                };
                if self.config.count_per == CountPer::Outer {
                    self.bank.set_counts(base_global, &base_clusters);
                }
                let eval = evaluate_objective(&pass.features, &weights, &self.bank, anchors, &objective)?;
                if !eval.loss.is_finite() || eval.grad_features.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Diverged {
                        epoch: self.batches_seen as usize,
                        loss: eval.loss.total,
                    });
                }
                let mut grads = self.model.backward(&pass, Some(&eval.grad_features), None)?;
                if self.config.freeze_head {
                    grads.zero_head();
                }
                self.sgd.step(&mut self.model, &grads)?;
                self.bank = eval.bank;

                summary.minibatches += 1;
                summary.mean_total += eval.loss.total;
                summary.mean_l_ac += eval.loss.l_ac;
                summary.mean_l_ga += eval.loss.l_ga;
            }
        }

        if self.config.count_per == CountPer::Outer {
            let clusters: Vec<f64> = base_clusters.iter().zip(&arrived_mass).map(|(b, m)| b + m).collect();
            self.bank.set_counts(base_global + arrived.len() as f64, &clusters);
        }
        if summary.minibatches > 0 {
            let n = summary.minibatches as f64;
            summary.mean_total /= n;
            summary.mean_l_ac /= n;
            summary.mean_l_ga /= n;
            summary.pass_fraction = rows_passed as f64 / rows_seen as f64;
        }
        self.steps.push(summary);
        Ok(())
    }

    /// Places the source-free bank at the feature scale of the first batch:
    /// prototype directions at the mean feature norm.
    fn init_prototype_bank(&mut self, inputs: &DMatrix<f64>) -> Result<()> {
        let features = self.model.features(inputs)?;
        let scale = features.row_iter().map(|r| r.norm()).sum::<f64>() / features.nrows() as f64;
        let mut bank = ClusterBank::from_head(
            &self.model.head,
            scale,
            self.config.prototype_cov_scale,
            self.config.clip_cluster,
            self.config.clip_global,
        )?;
        let (global, clusters) = self.bank.counts();
        bank.set_counts(global, &clusters);
        self.ridge = effective_ridge(&self.config, None, &self.model, &bank)?;
        self.bank = bank;
        self.bank_pending = false;
        Ok(())
    }

    /// Everything needed to diagnose a failed step, as JSON.
    pub fn state_dump(&self) -> serde_json::Value {
        let (global_count, cluster_counts) = self.bank.counts();
        let diag = |m: &DMatrix<f64>| m.diagonal().iter().copied().collect::<Vec<f64>>();
        serde_json::json!({
            "batches_seen": self.batches_seen,
            "minibatch_visits": self.visits,
            "model_version": self.model.version(),
            "config": self.config,
            "queue_len": self.queue.len(),
            "queue_ids": self.queue.ids(),
            "global": {
                "count": global_count,
                "mean": self.bank.global().mean().as_slice(),
                "covariance_diagonal": diag(self.bank.global().covariance()),
            },
            "clusters": self.bank.clusters().iter().zip(&cluster_counts).map(|(c, n)| serde_json::json!({
                "count": n,
                "mean": c.mean().as_slice(),
                "covariance_diagonal": diag(c.covariance()),
            })).collect::<Vec<_>>(),
            "recent_steps": &self.steps[self.steps.len().saturating_sub(5)..],
        })
    }
}

/// The ridge added before every factorization. In relative mode it is scaled
/// by the largest entry of the reference global covariance: the source
/// anchor, or the prototype mixture in source-free mode.
fn effective_ridge(
    config: &SttrConfig,
    anchors: Option<&SourceAnchors>,
    model: &Model,
    bank: &ClusterBank,
) -> Result<f64> {
    Ok(match config.ridge_mode {
        RidgeMode::Absolute => config.ridge,
        RidgeMode::SourceMax => {
            let reference = match anchors {
                Some(a) => a.global().covariance.amax(),
                None => classifier_prototype_anchors(&model.head, bank, config.prototype_cov_scale)?
                    .global()
                    .covariance
                    .amax(),
            };
            config.ridge * reference
        }
    })
}

/// Result of running a protocol over a finite stream.
#[derive(Clone, Debug)]
pub struct ProtocolOutcome {
    /// The scored predictions: the arrival log in one-pass mode, the final
    /// sweep (or the last pass) in multi-pass mode.
    pub log: PredictionLog,
    pub steps: Vec<StepSummary>,
    /// Wall time from first arrival to the last update.
    pub wall_seconds: f64,
    pub stream_len: usize,
}

fn stream_batches(n: usize, batch_size: usize) -> impl Iterator<Item = (Vec<SampleId>, Vec<usize>)> {
    (0..n).step_by(batch_size).map(move |start| {
        let rows: Vec<usize> = (start..(start + batch_size).min(n)).collect();
        (rows.iter().map(|&r| r as SampleId).collect(), rows)
    })
}

/// Streams `inputs` in row order in batches of the configured size. Sample
/// ids are row indices.
pub fn run_protocol(engine: &mut Engine, inputs: &DMatrix<f64>, labels: Option<&[usize]>) -> Result<ProtocolOutcome> {
    if let Some(l) = labels {
        check_dim("stream labels", inputs.nrows(), l.len())?;
    }
    let start = Instant::now();
    let n = inputs.nrows();
    let bs = engine.config.batch_size;
    let passes = match engine.config.protocol {
        Protocol::OnePass => 1,
        Protocol::MultiPass => engine.config.passes,
    };
    for _ in 0..passes {
        engine.reset_log();
        for (ids, rows) in stream_batches(n, bs) {
            let x = inputs.select_rows(&rows);
            let y: Option<Vec<usize>> = labels.map(|l| rows.iter().map(|&r| l[r]).collect());
            engine.stream_step(&ids, &x, y.as_deref())?;
        }
    }
    if engine.config.protocol == Protocol::MultiPass && engine.config.final_sweep {
        engine.reset_log();
        for (ids, rows) in stream_batches(n, bs) {
            let x = inputs.select_rows(&rows);
            let y: Option<Vec<usize>> = labels.map(|l| rows.iter().map(|&r| l[r]).collect());
            engine.predict_batch(&ids, &x, y.as_deref())?;
        }
    }
    Ok(ProtocolOutcome {
        log: engine.log.clone(),
        steps: engine.steps.clone(),
        wall_seconds: start.elapsed().as_secs_f64(),
        stream_len: n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::Clip;

    fn toy() -> (Model, SourceAnchors, DMatrix<f64>, Vec<usize>) {
        let model = Model::random(4, &[8], 3, 3, 11);
        let x = DMatrix::from_fn(60, 4, |r, c| {
            ((r * 13 + c * 7) % 17) as f64 / 17.0 - 0.5 + (r % 3) as f64
        });
        let y: Vec<usize> = (0..60).map(|r| r % 3).collect();
        let f = model.features(&x).unwrap();
        let anchors = SourceAnchors::from_features(&f, &y, 3).unwrap();
        (model, anchors, x, y)
    }

    fn cfg() -> SttrConfig {
        SttrConfig {
            batch_size: 10,
            queue_capacity: 30,
            inner_epochs: 2,
            clip_cluster: Clip::At(16),
            clip_global: Clip::At(64),
            ..SttrConfig::default()
        }
    }

    #[test]
    fn predictions_precede_updates() {
        let (model, anchors, x, y) = toy();
        let mut e = Engine::new(model.clone(), Some(anchors), cfg()).unwrap();
        let first = x.rows(0, 10).into_owned();
        let ids: Vec<u64> = (0..10).collect();
        let rec = e.stream_step(&ids, &first, Some(&y[..10])).unwrap();
        assert_eq!(
            rec.iter().map(|r| r.predicted_class).collect::<Vec<_>>(),
            model.predict(&first).unwrap()
        );
        assert!(rec.iter().all(|r| r.model_version == 0));
        assert!(e.model().version() > 0);
    }

    #[test]
    fn queue_and_store_stay_bounded() {
        let (model, anchors, x, y) = toy();
        let mut e = Engine::new(model, Some(anchors), cfg()).unwrap();
        let out = run_protocol(&mut e, &x, Some(&y)).unwrap();
        assert_eq!(out.log.len(), 60);
        assert_eq!(e.queue().ids(), (30..60).collect::<Vec<u64>>());
        assert!(e.store().len() <= 30);
        assert_eq!(out.steps.len(), 6);
    }

    #[test]
    fn source_stats_needs_anchors() {
        let (model, _, _, _) = toy();
        assert!(matches!(Engine::new(model, None, cfg()), Err(Error::Anchor(_))));
    }

    #[test]
    fn outer_counts_advance_by_arrivals() {
        let (model, anchors, x, y) = toy();
        let mut c = cfg();
        c.count_per = CountPer::Outer;
        c.clip_global = Clip::Unbounded;
        let mut e = Engine::new(model, Some(anchors), c.clone()).unwrap();
        run_protocol(&mut e, &x.rows(0, 20).into_owned(), Some(&y[..20])).unwrap();
        assert_eq!(e.bank().global().count(), c.prior_count_global + 20.0);
        let (_, clusters) = e.bank().counts();
        assert!(clusters.iter().sum::<f64>() <= 3.0 * c.prior_count + 20.0);
    }

    #[test]
    fn source_free_bank_takes_the_first_batch_scale() {
        let (model, _, x, y) = toy();
        let mut c = cfg();
        c.anchor_mode = AnchorMode::ClassifierPrototypes;
        let mut e = Engine::new(model.clone(), None, c).unwrap();
        assert!((e.bank().clusters()[0].mean().norm() - 1.0).abs() < 1e-12);
        let first = x.rows(0, 10).into_owned();
        let f = model.features(&first).unwrap();
        let scale = f.row_iter().map(|r| r.norm()).sum::<f64>() / 10.0;
        let ids: Vec<u64> = (0..10).collect();
        e.stream_step(&ids, &first, Some(&y[..10])).unwrap();
        assert!(!e.store().is_empty());
        // the bank moved during the update, but started near the batch scale
        let norms: Vec<f64> = e.bank().clusters().iter().map(|c| c.mean().norm()).collect();
        assert!(
            norms.iter().all(|n| *n > 0.5 * scale && *n < 1.5 * scale),
            "{norms:?} vs {scale}"
        );
    }

    #[test]
    fn multi_pass_sweep_logs_each_sample_once() {
        let (model, anchors, x, y) = toy();
        let mut c = cfg();
        c.protocol = Protocol::MultiPass;
        c.passes = 2;
        let mut e = Engine::new(model, Some(anchors), c).unwrap();
        let out = run_protocol(&mut e, &x, Some(&y)).unwrap();
        assert_eq!(out.log.len(), 60);
        let v = out.log.records()[0].model_version;
        assert!(out.log.records().iter().all(|r| r.model_version == v));
        assert_eq!(out.steps.len(), 12);
    }
}
