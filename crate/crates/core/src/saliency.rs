//! Entropy-gradient saliency per patch and its heatmap-gated reassembly
//! over a whole scan.

use ndarray::{s, Array2};
use rayon::prelude::*;

use crate::autodiff::{Graph, Model, ParamSet, Real, Tensor};
use crate::data::sampling::lattice;
use crate::error::{Error, Result};
use crate::heatmap::{heat_region, upsample_support, HEAT_SIDE};
use crate::tissue::predict_many;

/// Classifier probability above which a window counts as a positive
/// prediction.
pub const POSITIVE_CUTOFF: f64 = 0.5;

/// Shannon entropy in nats of a normalized distribution, `0 ln 0 = 0`.
pub fn entropy(probs: &[f64]) -> Result<f64> {
    if probs.is_empty() || probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(Error::invalid("entropy needs probabilities in [0, 1]"));
    }
    let total: f64 = probs.iter().sum();
    if (total - 1.0).abs() > 1e-6 {
        return Err(Error::invalid(format!("probabilities sum to {total}, not 1")));
    }
    Ok(-probs.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>())
}

/// Prediction entropy of one patch and its gradient with respect to every
/// input pixel. No label is involved: the entropy is taken over the
/// model's own predicted distribution.
pub fn entropy_gradient<T: Real>(model: &Model, params: &ParamSet<T>, pixels: &Array2<T>) -> Result<(T, Array2<T>)> {
    let (h, w) = pixels.dim();
    let input = Tensor::new(vec![1, 1, h, w], pixels.iter().copied().collect())?.with_requires_grad(true);
    let mut g = Graph::<T>::new();
    let x = g.input(input);
    let logits = model.forward(params, &mut g, x, None)?;
    let probs = g.softmax(logits)?;
    let ent = g.entropy(probs)?;
    let value = g.value(ent).item();
    let grads = g.backward(ent)?;
    let dx = grads.wrt(x).ok_or_else(|| Error::invalid("no gradient reached the input"))?;
    Ok((value, Array2::from_shape_vec((h, w), dx.to_vec()).expect("input-shaped gradient")))
}

/// `|dH/dx|` for a `size`-square patch.
pub fn patch_saliency(model: &Model, patch: &Array2<f32>, size: usize) -> Result<Array2<f32>> {
    if patch.dim() != (size, size) {
        return Err(Error::shape("saliency patch", patch.shape(), &[size, size]));
    }
    let (_, grad) = entropy_gradient(model, model.params(), patch)?;
    Ok(grad.mapv(f32::abs))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyImage {
    pub data: Array2<f32>,
    /// Top-left offsets of the windows that passed both gates.
    pub included: Vec<(usize, usize)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GateConfig {
    pub threshold: f32,
    pub stride: usize,
    pub patch_size: usize,
    /// Divide by the number of included windows covering each pixel.
    pub normalize_overlap: bool,
}

/// Sums the saliency of every stride-aligned window that the classifier
/// calls positive and whose center pixel falls inside the thresholded
/// heat support, then zeroes everything outside that support.
pub fn gated_saliency(model: &Model, image: &Array2<f32>, heat: &Array2<f32>, gate: &GateConfig) -> Result<SaliencyImage> {
    if heat.dim() != (HEAT_SIDE, HEAT_SIDE) {
        return Err(Error::shape("heatmap", heat.shape(), &[HEAT_SIDE, HEAT_SIDE]));
    }
    let (h, w) = image.dim();
    let p = gate.patch_size;
    if h < p || w < p {
        return Err(Error::invalid(format!("image {h}x{w} smaller than patch {p}")));
    }
    if gate.stride == 0 {
        return Err(Error::Config("stride must be positive".into()));
    }
    let support = upsample_support(&heat_region(heat, gate.threshold)?, h, w);
    let mut data = Array2::<f32>::zeros((h, w));
    let candidates: Vec<(usize, usize)> = lattice(h, p, gate.stride)
        .into_iter()
        .flat_map(|top| lattice(w, p, gate.stride).into_iter().map(move |left| (top, left)))
        .filter(|&(top, left)| support[[top + p / 2, left + p / 2]])
        .collect();
    if candidates.is_empty() {
        return Ok(SaliencyImage { data, included: Vec::new() });
    }
    let windows: Vec<Array2<f32>> = candidates
        .iter()
        .map(|&(t, l)| image.slice(s![t..t + p, l..l + p]).to_owned())
        .collect();
    let refs: Vec<&Array2<f32>> = windows.iter().collect();
    let z = predict_many(model, &refs, p)?;
    let chosen: Vec<usize> = (0..candidates.len()).filter(|&k| z[k] > POSITIVE_CUTOFF).collect();
    let maps: Vec<Result<Array2<f32>>> = chosen
        .par_iter()
        .map(|&k| patch_saliency(model, &windows[k], p))
        .collect();

    let mut coverage = gate.normalize_overlap.then(|| Array2::<u32>::zeros((h, w)));
    let mut included = Vec::with_capacity(chosen.len());
    for (&k, map) in chosen.iter().zip(maps) {
        let (t, l) = candidates[k];
        let mut view = data.slice_mut(s![t..t + p, l..l + p]);
        view += &map?;
        if let Some(cov) = coverage.as_mut() {
            cov.slice_mut(s![t..t + p, l..l + p]).mapv_inplace(|c| c + 1);
        }
        included.push((t, l));
    }
    if let Some(cov) = coverage {
        data.zip_mut_with(&cov, |v, &c| {
            if c > 1 {
                *v /= c as f32;
            }
        });
    }
    data.zip_mut_with(&support, |v, &inside| {
        if !inside {
            *v = 0.0;
        }
    });
    Ok(SaliencyImage { data, included })
}
