//! VGG-style patch classifier separating findings-positive tissue from
//! negative tissue at one magnification.

use std::fmt::Write as _;
use std::time::Instant;

use log::info;
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::{Graph, Layer, Model, ModelBuilder, Sgd, Tensor};
use crate::data::augment::{AugmentConfig, AugmentDraw};
use crate::data::Patch;
use crate::error::{Error, Result};
use crate::metrics::{confusion, roc_auc, Confusion, RocCurve};

/// Patches scored per forward pass during inference.
const INFER_BATCH: usize = 32;

#[derive(Clone, Debug, PartialEq)]
pub struct TissueNetConfig {
    pub input_size: usize,
    /// `(filters, 3x3 convolutions)` per block; each block ends in a 2x2
    /// max pool.
    pub blocks: Vec<(usize, usize)>,
    pub dense: Vec<usize>,
    pub classes: usize,
}

impl Default for TissueNetConfig {
    fn default() -> Self {
        TissueNetConfig {
            input_size: 256,
            blocks: vec![(16, 2), (32, 2), (64, 2), (128, 2)],
            dense: vec![256],
            classes: 2,
        }
    }
}

impl TissueNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes != 2 {
            return Err(Error::Config(format!("tissue net has 2 classes, got {}", self.classes)));
        }
        if self.blocks.is_empty() || self.blocks.iter().any(|&(f, n)| f == 0 || n == 0) {
            return Err(Error::Config("every block needs filters and at least one convolution".into()));
        }
        let div = 1usize << self.blocks.len();
        if self.input_size == 0 || self.input_size % div != 0 {
            return Err(Error::Config(format!(
                "input size {} not divisible by 2^{} blocks",
                self.input_size,
                self.blocks.len()
            )));
        }
        if self.dense.contains(&0) {
            return Err(Error::Config("dense widths must be positive".into()));
        }
        Ok(())
    }

    /// Spatial side of the last feature map.
    pub fn final_spatial(&self) -> usize {
        self.input_size >> self.blocks.len()
    }
}

pub fn build_tissue_net<R: Rng>(config: &TissueNetConfig, rng: &mut R) -> Result<Model> {
    config.validate()?;
    let mut b = ModelBuilder::new(rng);
    let mut channels = 1;
    for &(filters, convs) in &config.blocks {
        for _ in 0..convs {
            b = b.conv(channels, filters, 3).layer(Layer::Relu);
            channels = filters;
        }
        b = b.layer(Layer::MaxPool);
    }
    b = b.layer(Layer::Flatten);
    let mut width = channels * config.final_spatial().pow(2);
    for &d in &config.dense {
        b = b.dense(width, d).layer(Layer::Relu);
        width = d;
    }
    Ok(b.dense(width, config.classes).build())
}

/// Packs square patches into an `N x 1 x size x size` tensor.
fn stack(patches: &[&Array2<f32>], size: usize) -> Result<Tensor<f32>> {
    let mut data = Vec::with_capacity(patches.len() * size * size);
    for p in patches {
        if p.dim() != (size, size) {
            return Err(Error::shape("tissue input", p.shape(), &[size, size]));
        }
        data.extend(p.iter().copied());
    }
    Tensor::new(vec![patches.len(), 1, size, size], data)
}

/// Positive-class probabilities for a batch of `size`-square patches.
pub fn predict_batch(model: &Model, patches: &[&Array2<f32>], size: usize) -> Result<Vec<f64>> {
    if patches.is_empty() {
        return Ok(Vec::new());
    }
    let mut g = Graph::no_grad();
    let x = g.input(stack(patches, size)?);
    let logits = model.forward(model.params(), &mut g, x, None)?;
    let probs = g.softmax(logits)?;
    let out = g.value(probs);
    if out.shape()[1] != 2 {
        return Err(Error::shape("tissue output", out.shape(), &[patches.len(), 2]));
    }
    Ok(out.data().chunks(2).map(|row| row[1] as f64).collect())
}

/// Positive-class probability of one patch.
pub fn predict_patch(model: &Model, config: &TissueNetConfig, patch: &Array2<f32>) -> Result<f64> {
    Ok(predict_batch(model, &[patch], config.input_size)?[0])
}

/// Scores many patches in fixed-size chunks, in parallel. The chunking does
/// not depend on the thread count, so results do not either.
pub fn predict_many(model: &Model, patches: &[&Array2<f32>], size: usize) -> Result<Vec<f64>> {
    let chunks: Vec<Result<Vec<f64>>> = patches
        .par_chunks(INFER_BATCH)
        .map(|chunk| predict_batch(model, chunk, size))
        .collect();
    let mut out = Vec::with_capacity(patches.len());
    for c in chunks {
        out.extend(c?);
    }
    Ok(out)
}

/// Balanced batches: half drawn with replacement from the positive pool,
/// half taken from a reshuffled cycle over the negatives.
pub struct BalancedSampler {
    positives: Vec<usize>,
    negatives: Vec<usize>,
    cursor: usize,
    batch_size: usize,
}

impl BalancedSampler {
    pub fn new(positives: Vec<usize>, negatives: Vec<usize>, batch_size: usize) -> Result<Self> {
        if positives.is_empty() || negatives.is_empty() {
            return Err(Error::invalid("training data needs both positive and negative patches"));
        }
        if batch_size < 2 || batch_size % 2 != 0 {
            return Err(Error::Config(format!("batch size must be even and >= 2, got {batch_size}")));
        }
        Ok(BalancedSampler {
            positives,
            negatives,
            cursor: usize::MAX,
            batch_size,
        })
    }

    pub fn from_labels(patches: &[Patch], batch_size: usize) -> Result<Self> {
        let (pos, neg): (Vec<usize>, Vec<usize>) = (0..patches.len()).partition(|&i| patches[i].label.is_positive());
        Self::new(pos, neg, batch_size)
    }

    /// Batches needed to visit every negative once.
    pub fn batches_per_pass(&self) -> usize {
        self.negatives.len().div_ceil(self.batch_size / 2)
    }

    pub fn next_batch<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Vec<usize> {
        let half = self.batch_size / 2;
        let mut batch: Vec<usize> = (0..half)
            .map(|_| self.positives[rng.gen_range(0..self.positives.len())])
            .collect();
        for _ in 0..half {
            if self.cursor >= self.negatives.len() {
                self.negatives.shuffle(rng);
                self.cursor = 0;
            }
            batch.push(self.negatives[self.cursor]);
            self.cursor += 1;
        }
        batch
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Defaults to one pass over the negatives.
    pub batches_per_epoch: Option<usize>,
    pub augment: AugmentConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 32,
            lr: 0.01,
            momentum: 0.9,
            batches_per_epoch: None,
            augment: AugmentConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_auc: f64,
    pub wall_secs: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
}

impl TrainLog {
    /// Persisted form. Wall time is left out so reruns compare equal; it is
    /// reported through the logger instead.
    pub fn to_text(&self) -> String {
        let mut s = String::from("# epoch\ttrain_loss\tval_loss\tval_auc\n");
        for e in &self.epochs {
            let _ = writeln!(s, "{}\t{:.6}\t{:.6}\t{:.6}", e.epoch, e.train_loss, e.val_loss, e.val_auc);
        }
        let _ = writeln!(s, "# best_epoch={}", self.best_epoch);
        s
    }
}

/// Mean cross-entropy and AUC over a labelled set.
fn validate(model: &Model, patches: &[Patch], size: usize) -> Result<(f64, f64)> {
    let refs: Vec<&Array2<f32>> = patches.iter().map(|p| &p.pixels).collect();
    let probs = predict_many(model, &refs, size)?;
    let labels: Vec<bool> = patches.iter().map(|p| p.label.is_positive()).collect();
    let loss = probs
        .iter()
        .zip(&labels)
        .map(|(&p, &l)| -(if l { p } else { 1.0 - p }).max(crate::autodiff::PROB_FLOOR).ln())
        .sum::<f64>()
        / probs.len() as f64;
    Ok((loss, roc_auc(&probs, &labels)?.auc))
}

/// Minibatch momentum SGD on balanced, augmented batches; returns the model
/// from the epoch with the best validation AUC.
pub fn train_tissue(
    model: &Model,
    config: &TissueNetConfig,
    train: &[Patch],
    val: &[Patch],
    hyper: &TrainConfig,
) -> Result<(Model, TrainLog)> {
    config.validate()?;
    hyper.augment.validate()?;
    let size = config.input_size;
    if let Some(p) = train.iter().chain(val).find(|p| p.size() != size) {
        return Err(Error::shape("tissue patch", p.pixels.shape(), &[size, size]));
    }
    let mut sampler = BalancedSampler::from_labels(train, hyper.batch_size)?;
    if !(val.iter().any(|p| p.label.is_positive()) && val.iter().any(|p| !p.label.is_positive())) {
        return Err(Error::invalid("validation data needs both labels"));
    }
    let steps = hyper.batches_per_epoch.unwrap_or_else(|| sampler.batches_per_pass()).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let mut sgd = Sgd::<f32>::new(hyper.lr, hyper.momentum)?;
    let mut current = model.clone();
    let mut best: Option<(f64, Model)> = None;
    let mut log = TrainLog::default();

    for epoch in 1..=hyper.epochs {
        let start = Instant::now();
        let mut total = 0.0;
        for _ in 0..steps {
            let idx = sampler.next_batch(&mut rng);
            let mut data = Vec::with_capacity(idx.len() * size * size);
            let mut labels = Vec::with_capacity(idx.len());
            for &i in &idx {
                let draw = AugmentDraw::sample(&hyper.augment, size, &mut rng);
                data.extend(draw.apply(&train[i].pixels).iter().copied());
                labels.push(train[i].label.class_index());
            }
            let mut g = Graph::new();
            let x = g.input(Tensor::new(vec![idx.len(), 1, size, size], data)?);
            let logits = current.forward(current.params(), &mut g, x, None)?;
            let probs = g.softmax(logits)?;
            let loss = g.cross_entropy(probs, &labels)?;
            total += g.value(loss).item() as f64;
            let grads = g.backward(loss)?;
            sgd.step(current.params_mut(), &grads)?;
        }
        let (val_loss, val_auc) = validate(&current, val, size)?;
        let record = EpochRecord {
            epoch,
            train_loss: total / steps as f64,
            val_loss,
            val_auc,
            wall_secs: start.elapsed().as_secs_f64(),
        };
        info!(
            "tissue epoch {epoch}: train_loss={:.4} val_loss={:.4} val_auc={:.4} ({:.1}s)",
            record.train_loss, val_loss, val_auc, record.wall_secs
        );
        if !(record.train_loss.is_finite() && val_loss.is_finite()) {
            return Err(Error::NonFinite("tissue training loss"));
        }
        if best.as_ref().is_none_or(|(auc, _)| val_auc > *auc) {
            best = Some((val_auc, current.clone()));
            log.best_epoch = epoch;
        }
        log.epochs.push(record);
    }
    let model = best.map_or(current, |(_, m)| m);
    Ok((model, log))
}

/// Held-out breakdown: ROC, AUC and percentages at a fixed threshold.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub roc: RocCurve,
    pub confusion: Confusion,
    pub threshold: f64,
    pub samples: usize,
}

impl EvalReport {
    pub fn from_scores(scores: &[f64], labels: &[bool], threshold: f64) -> Result<Self> {
        Ok(EvalReport {
            roc: roc_auc(scores, labels)?,
            confusion: confusion(scores, labels, threshold)?,
            threshold,
            samples: scores.len(),
        })
    }

    pub fn to_table(&self) -> String {
        let c = &self.confusion;
        format!(
            "samples  threshold  TP%     FP%     TN%     FN%     error%  AUC\n\
             {:<8} {:<10.2} {:<7.1} {:<7.1} {:<7.1} {:<7.1} {:<7.1} {:.4}\n",
            self.samples, self.threshold, c.tp, c.fp, c.tn, c.fn_, c.total_error, self.roc.auc
        )
    }

    pub fn to_key_values(&self) -> String {
        format!(
            "samples={}\nthreshold={}\nauc={:.6}\n{}",
            self.samples,
            self.threshold,
            self.roc.auc,
            self.confusion.to_key_values()
        )
    }
}

pub fn evaluate_tissue(model: &Model, config: &TissueNetConfig, test: &[Patch], threshold: f64) -> Result<EvalReport> {
    if test.is_empty() {
        return Err(Error::invalid("empty test set"));
    }
    let refs: Vec<&Array2<f32>> = test.iter().map(|p| &p.pixels).collect();
    let scores = predict_many(model, &refs, config.input_size)?;
    let labels: Vec<bool> = test.iter().map(|p| p.label.is_positive()).collect();
    EvalReport::from_scores(&scores, &labels, threshold)
}
