//! Sequential network description shared by the tissue classifier and the
//! heatmap regressor. Convolutions are always stride 1 with "same" padding.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Graph, NodeId, ParamSet, Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layer {
    Conv,
    Dense,
    MaxPool,
    Relu,
    Flatten,
    /// Concatenates the auxiliary channel onto the running feature map.
    AuxConcat,
}

impl Layer {
    pub fn has_params(self) -> bool {
        matches!(self, Layer::Conv | Layer::Dense)
    }
}

pub fn weight_name(layer: usize) -> String {
    format!("l{layer}.weight")
}

pub fn bias_name(layer: usize) -> String {
    format!("l{layer}.bias")
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    layers: Vec<Layer>,
    params: ParamSet<f32>,
}

impl Model {
    /// Assembles a model, checking that every parametrized layer has its
    /// weight and bias.
    pub fn from_parts(layers: Vec<Layer>, params: ParamSet<f32>) -> Result<Self> {
        for (i, layer) in layers.iter().enumerate() {
            if layer.has_params() {
                params.require(&weight_name(i))?;
                params.require(&bias_name(i))?;
            }
        }
        let expected = layers.iter().filter(|l| l.has_params()).count() * 2;
        if expected != params.len() {
            return Err(Error::invalid(format!(
                "model has {} parameter tensors, layers need {expected}",
                params.len()
            )));
        }
        Ok(Model { layers, params })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn params(&self) -> &ParamSet<f32> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<f32> {
        &mut self.params
    }

    pub fn with_params(&self, params: ParamSet<f32>) -> Result<Self> {
        Self::from_parts(self.layers.clone(), params)
    }

    pub fn has_aux(&self) -> bool {
        self.layers.contains(&Layer::AuxConcat)
    }

    /// Input channel count expected by the first convolution.
    pub fn input_channels(&self) -> Option<usize> {
        self.layers
            .iter()
            .position(|&l| l == Layer::Conv)
            .and_then(|i| self.params.get(&weight_name(i)))
            .map(|w| w.shape()[1])
    }

    /// Records the forward pass on `graph` using `params`, which may be a
    /// cast copy of the model's own parameters.
    pub fn forward<T: Real>(
        &self,
        params: &ParamSet<T>,
        graph: &mut Graph<T>,
        input: NodeId,
        aux: Option<NodeId>,
    ) -> Result<NodeId> {
        if aux.is_some() && !self.has_aux() {
            return Err(Error::invalid("auxiliary channel given to a model without an aux input"));
        }
        let mut x = input;
        for (i, layer) in self.layers.iter().enumerate() {
            x = match layer {
                Layer::Conv | Layer::Dense => {
                    let w = params.require(&weight_name(i))?;
                    let b = params.require(&bias_name(i))?;
                    let wn = graph.param(&weight_name(i), w);
                    let bn = graph.param(&bias_name(i), b);
                    if *layer == Layer::Conv {
                        let pad = w.shape()[2] / 2;
                        graph.conv2d(x, wn, bn, 1, pad)?
                    } else {
                        graph.dense(x, wn, bn)?
                    }
                }
                Layer::MaxPool => graph.maxpool2(x)?,
                Layer::Relu => graph.relu(x)?,
                Layer::Flatten => graph.flatten(x)?,
                Layer::AuxConcat => {
                    let a = aux.ok_or_else(|| Error::invalid("model requires an auxiliary channel"))?;
                    graph.concat_channels(x, a)?
                }
            };
        }
        Ok(x)
    }

    /// Convenience forward pass in `f32` with no backward buffers.
    pub fn infer(&self, input: Tensor<f32>, aux: Option<Tensor<f32>>) -> Result<Tensor<f32>> {
        let mut g = Graph::no_grad();
        let x = g.input(input);
        let a = aux.map(|t| g.input(t));
        let out = self.forward(&self.params, &mut g, x, a)?;
        Ok(g.value(out).clone())
    }
}

/// Incrementally builds a sequential model with He-initialized weights.
pub struct ModelBuilder<'r, R: Rng> {
    rng: &'r mut R,
    layers: Vec<Layer>,
    params: ParamSet<f32>,
}

impl<'r, R: Rng> ModelBuilder<'r, R> {
    pub fn new(rng: &'r mut R) -> Self {
        ModelBuilder {
            rng,
            layers: Vec::new(),
            params: ParamSet::new(),
        }
    }

    fn he(&mut self, shape: Vec<usize>, fan_in: usize) -> Tensor<f32> {
        let std = (2.0 / fan_in.max(1) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        let len = shape.iter().product();
        let data = (0..len).map(|_| normal.sample(self.rng) as f32).collect();
        Tensor::new(shape, data).expect("shape matches")
    }

    pub fn conv(mut self, in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        let idx = self.layers.len();
        let w = self.he(vec![out_channels, in_channels, kernel, kernel], in_channels * kernel * kernel);
        self.params.insert(weight_name(idx), w).expect("fresh name");
        self.params
            .insert(bias_name(idx), Tensor::zeros(vec![out_channels]))
            .expect("fresh name");
        self.layers.push(Layer::Conv);
        self
    }

    pub fn dense(mut self, inputs: usize, outputs: usize) -> Self {
        let idx = self.layers.len();
        let w = self.he(vec![inputs, outputs], inputs);
        self.params.insert(weight_name(idx), w).expect("fresh name");
        self.params
            .insert(bias_name(idx), Tensor::zeros(vec![outputs]))
            .expect("fresh name");
        self.layers.push(Layer::Dense);
        self
    }

    pub fn layer(mut self, layer: Layer) -> Self {
        assert!(!layer.has_params(), "use conv() or dense() for parametrized layers");
        self.layers.push(layer);
        self
    }

    pub fn build(self) -> Model {
        Model::from_parts(self.layers, self.params).expect("builder keeps layers and params in sync")
    }
}
