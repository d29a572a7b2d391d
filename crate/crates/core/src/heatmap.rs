//! Fully convolutional regression from a downsampled scan to a coarse heat
//! map of likely findings, optionally fed the aggregated tissue grid.

use std::fmt::Write as _;

use log::info;
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Layer, Model, ModelBuilder, Sgd, Tensor};
use crate::data::blur::gaussian_blur_raw;
use crate::data::resample::resample_area;
use crate::data::Scan;
use crate::error::{Error, Result};

/// Heatmap side in cells.
pub const HEAT_SIDE: usize = 32;
/// Input side of the heatmap network.
pub const HEAT_INPUT: usize = 256;
/// Blur applied to downsampled annotation masks, in heat cells.
pub const TARGET_SIGMA: f64 = 1.5;
/// Default support threshold for `heat_region`.
pub const HEAT_THRESHOLD: f32 = 0.25;

#[derive(Clone, Debug, PartialEq)]
pub struct HeatmapNetConfig {
    pub input_size: usize,
    /// `(filters, 3x3 convolutions)` per block; each block ends in a 2x2
    /// max pool.
    pub blocks: Vec<(usize, usize)>,
    /// Channels of the head convolutions.
    pub head: usize,
    pub with_aux: bool,
}

impl Default for HeatmapNetConfig {
    fn default() -> Self {
        HeatmapNetConfig {
            input_size: HEAT_INPUT,
            blocks: vec![(16, 2), (32, 2), (64, 2)],
            head: 32,
            with_aux: false,
        }
    }
}

impl HeatmapNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.blocks.is_empty() || self.blocks.iter().any(|&(f, n)| f == 0 || n == 0) || self.head == 0 {
            return Err(Error::Config("heatmap blocks and head need positive widths".into()));
        }
        let div = 1usize << self.blocks.len();
        if self.input_size % div != 0 || self.input_size / div != HEAT_SIDE {
            return Err(Error::Config(format!(
                "input {} with {} pooling blocks does not give a {HEAT_SIDE}x{HEAT_SIDE} map",
                self.input_size,
                self.blocks.len()
            )));
        }
        Ok(())
    }
}

/// Convolution blocks, a 3x3 head and a single-channel output. The aux
/// variant concatenates the aggregation channel after the head and adds two
/// more 3x3 convolutions.
pub fn build_heatmap_net<R: Rng>(config: &HeatmapNetConfig, rng: &mut R) -> Result<Model> {
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
    b = b.conv(channels, config.head, 3).layer(Layer::Relu);
    b = if config.with_aux {
        b.layer(Layer::AuxConcat)
            .conv(config.head + 1, config.head, 3)
            .layer(Layer::Relu)
            .conv(config.head, 1, 3)
    } else {
        b.conv(config.head, 1, 1)
    };
    Ok(b.build())
}

/// Area-average downsample of a base crop to the network input side.
pub fn heat_input(scan: &Scan, side: usize) -> Array2<f32> {
    resample_area(&scan.unit_pixels(), side, side)
}

/// Blurred, peak-normalized `HEAT_SIDE` map of the findings-positive
/// annotation; all zero without one.
pub fn make_target(scan: &Scan) -> Array2<f32> {
    let Some(mask) = scan.finding_mask() else {
        return Array2::zeros((HEAT_SIDE, HEAT_SIDE));
    };
    let coverage = resample_area(&mask.mapv(|m| m as u8 as f32), HEAT_SIDE, HEAT_SIDE);
    let blurred = gaussian_blur_raw(&coverage, TARGET_SIGMA);
    let peak = blurred.iter().copied().fold(0.0f32, f32::max);
    if peak > 0.0 {
        blurred.mapv(|v| v / peak)
    } else {
        blurred
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeatExample {
    pub image: Array2<f32>,
    pub aux: Option<Array2<f32>>,
    pub target: Array2<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeatTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for HeatTrainConfig {
    fn default() -> Self {
        HeatTrainConfig {
            epochs: 30,
            batch_size: 4,
            lr: 0.05,
            momentum: 0.9,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeatEpoch {
    pub epoch: usize,
    /// Per-pixel mean squared error, averaged over maps.
    pub train_mse: f64,
    /// Squared error summed over the pixels of a map, averaged over maps.
    pub train_sse: f64,
    pub val_mse: f64,
    pub val_sse: f64,
}

/// Epoch 0 is the untrained network.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct HeatLog {
    pub epochs: Vec<HeatEpoch>,
}

impl HeatLog {
    pub fn to_text(&self) -> String {
        let mut s = String::from("# epoch\ttrain_mse\ttrain_sse\tval_mse\tval_sse\n");
        for e in &self.epochs {
            let _ = writeln!(
                s,
                "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
                e.epoch, e.train_mse, e.train_sse, e.val_mse, e.val_sse
            );
        }
        s
    }
}

fn check_examples(config: &HeatmapNetConfig, examples: &[HeatExample]) -> Result<()> {
    let n = config.input_size;
    for ex in examples {
        if ex.image.dim() != (n, n) {
            return Err(Error::shape("heatmap input", ex.image.shape(), &[n, n]));
        }
        if ex.target.dim() != (HEAT_SIDE, HEAT_SIDE) {
            return Err(Error::shape("heat target", ex.target.shape(), &[HEAT_SIDE, HEAT_SIDE]));
        }
        match (&ex.aux, config.with_aux) {
            (None, true) => return Err(Error::invalid("aux network needs an aggregation channel for every example")),
            (Some(_), false) => return Err(Error::invalid("baseline network takes no aggregation channel")),
            (Some(a), true) if a.dim() != (HEAT_SIDE, HEAT_SIDE) => {
                return Err(Error::shape("aggregation channel", a.shape(), &[HEAT_SIDE, HEAT_SIDE]))
            }
            _ => {}
        }
    }
    Ok(())
}

fn pack<'a>(maps: impl Iterator<Item = &'a Array2<f32>>, count: usize, side: usize) -> Result<Tensor<f32>> {
    let mut data = Vec::with_capacity(count * side * side);
    for m in maps {
        data.extend(m.iter().copied());
    }
    Tensor::new(vec![count, 1, side, side], data)
}

/// Records a forward pass over a batch and returns the raw output node.
fn forward_batch(
    model: &Model,
    config: &HeatmapNetConfig,
    graph: &mut Graph<f32>,
    batch: &[&HeatExample],
) -> Result<crate::autodiff::NodeId> {
    let x = graph.input(pack(batch.iter().map(|e| &e.image), batch.len(), config.input_size)?);
    let aux = if config.with_aux {
        let t = pack(batch.iter().filter_map(|e| e.aux.as_ref()), batch.len(), HEAT_SIDE)?;
        Some(graph.input(t))
    } else {
        None
    };
    model.forward(model.params(), graph, x, aux)
}

/// Mean-per-pixel and summed-per-map squared error over a set, computed on
/// raw (unclamped) outputs, as in training.
pub fn evaluate_mse(model: &Model, config: &HeatmapNetConfig, examples: &[HeatExample]) -> Result<(f64, f64)> {
    check_examples(config, examples)?;
    if examples.is_empty() {
        return Ok((0.0, 0.0));
    }
    let mut sse = 0.0;
    for chunk in examples.chunks(8) {
        let refs: Vec<&HeatExample> = chunk.iter().collect();
        let mut g = Graph::no_grad();
        let out = forward_batch(model, config, &mut g, &refs)?;
        let pred = g.value(out).data();
        let targets = chunk.iter().flat_map(|e| e.target.iter());
        sse += pred
            .iter()
            .zip(targets)
            .map(|(&p, &t)| (p as f64 - t as f64).powi(2))
            .sum::<f64>();
    }
    let maps = examples.len() as f64;
    Ok((sse / (maps * (HEAT_SIDE * HEAT_SIDE) as f64), sse / maps))
}

/// Momentum SGD on per-pixel MSE. Returns the final network and a log whose
/// first row is the untrained evaluation.
pub fn train_heatmap(
    model: &Model,
    config: &HeatmapNetConfig,
    train: &[HeatExample],
    val: &[HeatExample],
    hyper: &HeatTrainConfig,
) -> Result<(Model, HeatLog)> {
    config.validate()?;
    check_examples(config, train)?;
    check_examples(config, val)?;
    if train.is_empty() {
        return Err(Error::invalid("no heatmap training examples"));
    }
    if model.has_aux() != config.with_aux {
        return Err(Error::Config("network and config disagree on the aux channel".into()));
    }
    if hyper.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let mut sgd = Sgd::<f32>::new(hyper.lr, hyper.momentum)?;
    let mut current = model.clone();
    let mut log = HeatLog::default();
    let record = |m: &Model, epoch: usize, log: &mut HeatLog| -> Result<()> {
        let (train_mse, train_sse) = evaluate_mse(m, config, train)?;
        let (val_mse, val_sse) = evaluate_mse(m, config, val)?;
        if !(train_mse.is_finite() && val_mse.is_finite()) {
            return Err(Error::NonFinite("heatmap loss"));
        }
        info!("heatmap epoch {epoch}: train_mse={train_mse:.5} val_mse={val_mse:.5}");
        log.epochs.push(HeatEpoch {
            epoch,
            train_mse,
            train_sse,
            val_mse,
            val_sse,
        });
        Ok(())
    };
    record(&current, 0, &mut log)?;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=hyper.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(hyper.batch_size) {
            let batch: Vec<&HeatExample> = chunk.iter().map(|&i| &train[i]).collect();
            let mut g = Graph::new();
            let out = forward_batch(&current, config, &mut g, &batch)?;
            let target = pack(batch.iter().map(|e| &e.target), batch.len(), HEAT_SIDE)?;
            let loss = g.mse(out, &target)?;
            let grads = g.backward(loss)?;
            sgd.step(current.params_mut(), &grads)?;
        }
        record(&current, epoch, &mut log)?;
    }
    Ok((current, log))
}

/// `HEAT_SIDE` map clamped to `[0, 1]`. The aux channel must be given iff
/// the network was built with one.
pub fn infer_heatmap(
    model: &Model,
    config: &HeatmapNetConfig,
    image: &Array2<f32>,
    aux: Option<&Array2<f32>>,
) -> Result<Array2<f32>> {
    let example = HeatExample {
        image: image.clone(),
        aux: aux.cloned(),
        target: Array2::zeros((HEAT_SIDE, HEAT_SIDE)),
    };
    check_examples(config, std::slice::from_ref(&example))?;
    if model.has_aux() != config.with_aux {
        return Err(Error::Config("network and config disagree on the aux channel".into()));
    }
    let mut g = Graph::no_grad();
    let out = forward_batch(model, config, &mut g, &[&example])?;
    let v = g.value(out);
    if v.shape() != [1, 1, HEAT_SIDE, HEAT_SIDE] {
        return Err(Error::shape("heatmap output", v.shape(), &[1, 1, HEAT_SIDE, HEAT_SIDE]));
    }
    Ok(Array2::from_shape_vec((HEAT_SIDE, HEAT_SIDE), v.data().iter().map(|x| x.clamp(0.0, 1.0)).collect())
        .expect("32x32 output"))
}

/// Cells at or above `threshold`.
pub fn heat_region(map: &Array2<f32>, threshold: f32) -> Result<Array2<bool>> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::invalid(format!("heat threshold {threshold} outside (0, 1)")));
    }
    Ok(map.mapv(|v| v >= threshold))
}

/// Nearest-cell upsampling of a support mask: pixel `(r, c)` of a
/// `rows x cols` image belongs to cell `(r * G / rows, c * G / cols)`.
pub fn upsample_support(region: &Array2<bool>, rows: usize, cols: usize) -> Array2<bool> {
    let (gr, gc) = region.dim();
    Array2::from_shape_fn((rows, cols), |(r, c)| region[[r * gr / rows, c * gc / cols]])
}
