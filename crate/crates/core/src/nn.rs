//! A small fully connected backbone `f` with a linear classifier head `h`,
//! batched forward and backward passes, and SGD with momentum.
//!
//! Rows are samples throughout: inputs are `N × input_dim`, features
//! `N × d`, logits and posteriors `N × K`.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::datagen::Dataset;
use crate::error::{check_dim, Error, Result};
use crate::tensorfile::{self, Tensor};

const CHECKPOINT_KIND: &[u8; 8] = b"CHECKPNT";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Derivative given the pre-activation and the activation output.
    fn derivative(self, pre: f64, post: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - post * post,
            Activation::Identity => 1.0,
        }
    }

    fn code(self) -> f64 {
        match self {
            Activation::Relu => 0.0,
            Activation::Tanh => 1.0,
            Activation::Identity => 2.0,
        }
    }

    fn from_code(code: f64) -> Result<Self> {
        match code as i64 {
            0 => Ok(Activation::Relu),
            1 => Ok(Activation::Tanh),
            2 => Ok(Activation::Identity),
            _ => Err(Error::Format(format!("unknown activation code {code}"))),
        }
    }
}

/// `out = activation(x Wᵀ + b)` with `W` of shape `out × in`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
    pub activation: Activation,
}

impl Dense {
    /// He-style Gaussian initialization, zero bias.
    pub fn random<R: Rng>(input: usize, output: usize, activation: Activation, rng: &mut R) -> Self {
        let scale = match activation {
            Activation::Relu => (2.0 / input as f64).sqrt(),
            _ => (1.0 / input as f64).sqrt(),
        };
        let weight = DMatrix::from_fn(output, input, |_, _| {
            let z: f64 = StandardNormal.sample(rng);
            scale * z
        });
        Self {
            weight,
            bias: DVector::zeros(output),
            activation,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.nrows()
    }
}

fn affine(x: &DMatrix<f64>, weight: &DMatrix<f64>, bias: &DVector<f64>) -> DMatrix<f64> {
    let mut z = x * weight.transpose();
    for mut row in z.row_iter_mut() {
        row += bias.transpose();
    }
    z
}

fn column_sums(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_fn(m.ncols(), |j, _| m.column(j).sum())
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpBackbone {
    layers: Vec<Dense>,
}

impl MlpBackbone {
    pub fn new(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("backbone needs at least one layer".into()));
        }
        for pair in layers.windows(2) {
            check_dim("backbone layer chain", pair[0].output_dim(), pair[1].input_dim())?;
        }
        for l in &layers {
            check_dim("backbone bias", l.output_dim(), l.bias.len())?;
        }
        Ok(Self { layers })
    }

    /// `input → hidden[0] → … → feature_dim`. Hidden layers use
    /// `hidden_activation`, the feature layer uses `feature_activation`.
    pub fn random<R: Rng>(
        input_dim: usize,
        hidden: &[usize],
        feature_dim: usize,
        hidden_activation: Activation,
        feature_activation: Activation,
        rng: &mut R,
    ) -> Self {
        let mut dims = vec![input_dim];
        dims.extend_from_slice(hidden);
        dims.push(feature_dim);
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let act = if i + 1 == n {
                    feature_activation
                } else {
                    hidden_activation
                };
                Dense::random(dims[i], dims[i + 1], act, rng)
            })
            .collect();
        Self { layers }
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn feature_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierHead {
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
}

impl ClassifierHead {
    pub fn new(weight: DMatrix<f64>, bias: DVector<f64>) -> Result<Self> {
        check_dim("head bias", weight.nrows(), bias.len())?;
        Ok(Self { weight, bias })
    }

    pub fn random<R: Rng>(feature_dim: usize, classes: usize, rng: &mut R) -> Self {
        let d = Dense::random(feature_dim, classes, Activation::Identity, rng);
        Self {
            weight: d.weight,
            bias: d.bias,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.weight.nrows()
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(logits: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = logits.clone();
    for mut row in out.row_iter_mut() {
        let max = row.max();
        row.apply(|v| *v = (*v - max).exp());
        let s = row.sum();
        row /= s;
    }
    out
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: impl IntoIterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, v) in values.into_iter().enumerate() {
        if v > best_v {
            best = i;
            best_v = v;
        }
    }
    best
}

/// Activations retained for one backward pass.
#[derive(Clone, Debug)]
struct ForwardCache {
    version: u64,
    inputs: DMatrix<f64>,
    pre: Vec<DMatrix<f64>>,
    post: Vec<DMatrix<f64>>,
}

#[derive(Clone, Debug)]
pub struct ForwardPass {
    pub features: DMatrix<f64>,
    pub logits: DMatrix<f64>,
    pub posteriors: DMatrix<f64>,
    cache: ForwardCache,
}

impl ForwardPass {
    pub fn model_version(&self) -> u64 {
        self.cache.version
    }

    pub fn predictions(&self) -> Vec<usize> {
        self.posteriors.row_iter().map(|r| argmax(r.iter().copied())).collect()
    }
}

/// Parameter gradients in the same layout as the model.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub layers: Vec<(DMatrix<f64>, DVector<f64>)>,
    pub head: (DMatrix<f64>, DVector<f64>),
}

impl Gradients {
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for (w, b) in &self.layers {
            out.push(w.as_slice());
            out.push(b.as_slice());
        }
        out.push(self.head.0.as_slice());
        out.push(self.head.1.as_slice());
        out
    }

    pub fn zero_head(&mut self) {
        self.head.0.fill(0.0);
        self.head.1.fill(0.0);
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.tensors().concat()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub backbone: MlpBackbone,
    pub head: ClassifierHead,
    version: u64,
}

impl Model {
    pub fn new(backbone: MlpBackbone, head: ClassifierHead) -> Result<Self> {
        check_dim("head input", backbone.feature_dim(), head.weight.ncols())?;
        Ok(Self {
            backbone,
            head,
            version: 0,
        })
    }

    /// Relu hidden layers, identity feature layer.
    pub fn random(input_dim: usize, hidden: &[usize], feature_dim: usize, classes: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let backbone = MlpBackbone::random(
            input_dim,
            hidden,
            feature_dim,
            Activation::Relu,
            Activation::Identity,
            &mut rng,
        );
        let head = ClassifierHead::random(feature_dim, classes, &mut rng);
        Self {
            backbone,
            head,
            version: 0,
        }
    }

    /// Counts parameter updates; forward caches remember it.
    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn input_dim(&self) -> usize {
        self.backbone.input_dim()
    }

    pub fn feature_dim(&self) -> usize {
        self.backbone.feature_dim()
    }

    pub fn num_classes(&self) -> usize {
        self.head.num_classes()
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn forward(&self, inputs: &DMatrix<f64>) -> Result<ForwardPass> {
        check_dim("model input", self.input_dim(), inputs.ncols())?;
        let mut pre = Vec::with_capacity(self.backbone.layers.len());
        let mut post: Vec<DMatrix<f64>> = Vec::with_capacity(self.backbone.layers.len());
        for layer in &self.backbone.layers {
            let x = post.last().unwrap_or(inputs);
            let z = affine(x, &layer.weight, &layer.bias);
            let a = z.map(|v| layer.activation.apply(v));
            pre.push(z);
            post.push(a);
        }
        let features = post.last().expect("non-empty backbone").clone();
        let logits = affine(&features, &self.head.weight, &self.head.bias);
        let posteriors = softmax_rows(&logits);
        Ok(ForwardPass {
            features,
            logits,
            posteriors,
            cache: ForwardCache {
                version: self.version,
                inputs: inputs.clone(),
                pre,
                post,
            },
        })
    }

    pub fn features(&self, inputs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        Ok(self.forward(inputs)?.features)
    }

    pub fn predict(&self, inputs: &DMatrix<f64>) -> Result<Vec<usize>> {
        Ok(self.forward(inputs)?.predictions())
    }

    /// Backpropagates upstream gradients at the feature layer and/or the
    /// logits into every parameter. The pass must come from this model at its
    /// current version.
    pub fn backward(
        &self,
        pass: &ForwardPass,
        grad_features: Option<&DMatrix<f64>>,
        grad_logits: Option<&DMatrix<f64>>,
    ) -> Result<Gradients> {
        if pass.cache.version != self.version {
            return Err(Error::Logic(format!(
                "forward cache from model version {} used at version {}",
                pass.cache.version, self.version
            )));
        }
        let n = pass.features.nrows();
        let d = self.feature_dim();
        let mut upstream = DMatrix::zeros(n, d);
        if let Some(g) = grad_features {
            check_dim("feature gradient rows", n, g.nrows())?;
            check_dim("feature gradient cols", d, g.ncols())?;
            upstream += g;
        }
        let head = if let Some(gl) = grad_logits {
            check_dim("logit gradient rows", n, gl.nrows())?;
            check_dim("logit gradient cols", self.num_classes(), gl.ncols())?;
            upstream += gl * &self.head.weight;
            (gl.transpose() * &pass.features, column_sums(gl))
        } else {
            (
                DMatrix::zeros(self.num_classes(), d),
                DVector::zeros(self.num_classes()),
            )
        };

        let layers = &self.backbone.layers;
        let mut grads = vec![None; layers.len()];
        let mut da = upstream;
        for (i, layer) in layers.iter().enumerate().rev() {
            let pre = &pass.cache.pre[i];
            let post = &pass.cache.post[i];
            let dz = DMatrix::from_fn(da.nrows(), da.ncols(), |r, c| {
                da[(r, c)] * layer.activation.derivative(pre[(r, c)], post[(r, c)])
            });
            let input = if i == 0 {
                &pass.cache.inputs
            } else {
                &pass.cache.post[i - 1]
            };
            grads[i] = Some((dz.transpose() * input, column_sums(&dz)));
            if i > 0 {
                da = &dz * &layer.weight;
            }
        }
        Ok(Gradients {
            layers: grads.into_iter().map(|g| g.expect("filled")).collect(),
            head,
        })
    }

    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for l in &self.backbone.layers {
            out.push(l.weight.as_slice());
            out.push(l.bias.as_slice());
        }
        out.push(self.head.weight.as_slice());
        out.push(self.head.bias.as_slice());
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for l in &mut self.backbone.layers {
            out.push(l.weight.as_mut_slice());
            out.push(l.bias.as_mut_slice());
        }
        out.push(self.head.weight.as_mut_slice());
        out.push(self.head.bias.as_mut_slice());
        out
    }

    /// All parameters in the order of [`Gradients::flatten`].
    pub fn parameters(&self) -> Vec<f64> {
        self.tensors().concat()
    }

    /// Overwrites every parameter; bumps the version.
    pub fn set_parameters(&mut self, values: &[f64]) -> Result<()> {
        check_dim("parameter count", self.num_parameters(), values.len())?;
        let mut offset = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            t.copy_from_slice(&values[offset..offset + n]);
            offset += n;
        }
        self.version += 1;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        tensorfile::save(path, CHECKPOINT_KIND, &self.to_tensors())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_tensors(&tensorfile::load(path, CHECKPOINT_KIND)?)
    }

    pub fn to_tensors(&self) -> Vec<Tensor> {
        let mut out = vec![Tensor::scalar("layers", self.backbone.layers.len() as f64)];
        for (i, l) in self.backbone.layers.iter().enumerate() {
            out.push(Tensor::scalar(format!("layer{i}.activation"), l.activation.code()));
            out.push(Tensor::from_matrix(format!("layer{i}.weight"), &l.weight));
            out.push(Tensor::from_vector(format!("layer{i}.bias"), &l.bias));
        }
        out.push(Tensor::from_matrix("head.weight", &self.head.weight));
        out.push(Tensor::from_vector("head.bias", &self.head.bias));
        out
    }

    pub fn from_tensors(tensors: &[Tensor]) -> Result<Self> {
        let n = tensorfile::find(tensors, "layers")?.to_scalar()? as usize;
        let mut layers = Vec::with_capacity(n);
        for i in 0..n {
            layers.push(Dense {
                weight: tensorfile::find(tensors, &format!("layer{i}.weight"))?.to_matrix()?,
                bias: tensorfile::find(tensors, &format!("layer{i}.bias"))?.to_vector()?,
                activation: Activation::from_code(
                    tensorfile::find(tensors, &format!("layer{i}.activation"))?.to_scalar()?,
                )?,
            });
        }
        let head = ClassifierHead::new(
            tensorfile::find(tensors, "head.weight")?.to_matrix()?,
            tensorfile::find(tensors, "head.bias")?.to_vector()?,
        )?;
        Self::new(MlpBackbone::new(layers)?, head)
    }
}

/// SGD with momentum: `v ← m·v + g; p ← p − lr·v`.
#[derive(Clone, Debug, PartialEq)]
pub struct SgdState {
    pub learning_rate: f64,
    pub momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl SgdState {
    pub fn new(learning_rate: f64, momentum: f64) -> Result<Self> {
        if !(learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {learning_rate}"
            )));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {momentum}")));
        }
        Ok(Self {
            learning_rate,
            momentum,
            velocity: Vec::new(),
        })
    }

    pub fn velocity(&self) -> &[Vec<f64>] {
        &self.velocity
    }

    pub fn step(&mut self, model: &mut Model, grads: &Gradients) -> Result<()> {
        let g = grads.tensors();
        if self.velocity.is_empty() {
            self.velocity = g.iter().map(|t| vec![0.0; t.len()]).collect();
        }
        check_dim("gradient tensor count", self.velocity.len(), g.len())?;
        let (lr, m) = (self.learning_rate, self.momentum);
        for ((param, grad), vel) in model.tensors_mut().into_iter().zip(g).zip(&mut self.velocity) {
            check_dim("gradient tensor size", param.len(), grad.len())?;
            for ((p, &gi), v) in param.iter_mut().zip(grad).zip(vel.iter_mut()) {
                *v = m * *v + gi;
                *p -= lr * *v;
            }
        }
        model.version += 1;
        Ok(())
    }
}

/// Source-domain training settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    /// Fraction of the source set held out for the reported accuracy.
    pub holdout_fraction: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            learning_rate: 0.05,
            momentum: 0.9,
            batch_size: 64,
            holdout_fraction: 0.2,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub holdout_accuracy: f64,
    pub final_loss: f64,
    pub train_samples: usize,
    pub holdout_samples: usize,
}

/// Mean cross-entropy and its gradient at the logits.
pub fn cross_entropy(posteriors: &DMatrix<f64>, labels: &[usize]) -> (f64, DMatrix<f64>) {
    let n = labels.len() as f64;
    let mut grad = posteriors.clone();
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        loss -= posteriors[(i, y)].max(f64::MIN_POSITIVE).ln();
        grad[(i, y)] -= 1.0;
    }
    (loss / n, grad / n)
}

/// Plain minibatch cross-entropy training on labeled source data.
pub fn pretrain_source(model: &mut Model, source: &Dataset, cfg: &PretrainConfig) -> Result<PretrainReport> {
    check_dim("source input dimension", model.input_dim(), source.input_dim())?;
    if source.is_empty() {
        return Err(Error::Empty("source dataset"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..source.len()).collect();
    order.shuffle(&mut rng);
    let holdout = ((source.len() as f64) * cfg.holdout_fraction).round() as usize;
    let holdout = holdout.min(source.len() - 1);
    let (held, train) = order.split_at(holdout);
    let mut train = train.to_vec();

    let mut sgd = SgdState::new(cfg.learning_rate, cfg.momentum)?;
    let mut final_loss = f64::NAN;
    for epoch in 0..cfg.epochs {
        train.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in train.chunks(cfg.batch_size.max(1)) {
            let batch = source.subset(chunk);
            let pass = model.forward(&batch.inputs)?;
            let (loss, grad) = cross_entropy(&pass.posteriors, &batch.labels);
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, loss });
            }
            total += loss * chunk.len() as f64;
            let grads = model.backward(&pass, None, Some(&grad))?;
            sgd.step(model, &grads)?;
        }
        final_loss = total / train.len() as f64;
        if !final_loss.is_finite() {
            return Err(Error::Diverged {
                epoch,
                loss: final_loss,
            });
        }
    }

    let holdout_accuracy = if held.is_empty() {
        f64::NAN
    } else {
        let h = source.subset(held);
        accuracy(&model.predict(&h.inputs)?, &h.labels)
    };
    Ok(PretrainReport {
        holdout_accuracy,
        final_loss,
        train_samples: train.len(),
        holdout_samples: held.len(),
    })
}

pub fn accuracy(predictions: &[usize], labels: &[usize]) -> f64 {
    let correct = predictions.iter().zip(labels).filter(|(p, y)| p == y).count();
    correct as f64 / labels.len().max(1) as f64
}
