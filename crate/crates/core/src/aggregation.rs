//! Sliding-window tissue predictions collected into a coarse grid, and its
//! registration onto the heatmap lattice as an auxiliary channel.

use std::path::Path;

use ndarray::{s, Array2};

use crate::autodiff::Model;
use crate::data::resample::resize_bilinear;
use crate::data::Magnification;
use crate::error::{Error, Result};
use crate::io::raster::Raster;
use crate::io::pgm;
use crate::tissue::predict_many;

/// Default classifier stride across the scan, in scaled pixels.
pub const AGGREGATION_STRIDE: usize = 64;

/// Side of the heatmap lattice the grid is registered onto.
pub const CHANNEL_SIDE: usize = 32;

#[derive(Clone, Debug, PartialEq)]
pub struct AggregationGrid {
    /// Positive-class probability per window; cell `(a, b)` covers the
    /// window at `(a * stride, b * stride)`.
    pub values: Array2<f32>,
    pub stride: usize,
    pub patch_size: usize,
    pub scale: Magnification,
}

/// Window count along one axis: `floor((len - patch) / stride) + 1`.
pub fn grid_len(len: usize, patch_size: usize, stride: usize) -> Result<usize> {
    if stride == 0 || patch_size == 0 {
        return Err(Error::Config("stride and patch size must be positive".into()));
    }
    if len < patch_size {
        return Err(Error::invalid(format!("scan side {len} smaller than patch {patch_size}")));
    }
    Ok((len - patch_size) / stride + 1)
}

/// Evaluates the classifier on every stride-aligned window of `image`.
/// Windows past the last full position are not evaluated.
pub fn aggregate_local(
    model: &Model,
    image: &Array2<f32>,
    stride: usize,
    patch_size: usize,
    scale: Magnification,
) -> Result<AggregationGrid> {
    let (h, w) = image.dim();
    let (gr, gc) = (grid_len(h, patch_size, stride)?, grid_len(w, patch_size, stride)?);
    let windows: Vec<Array2<f32>> = (0..gr * gc)
        .map(|k| {
            let (top, left) = ((k / gc) * stride, (k % gc) * stride);
            image.slice(s![top..top + patch_size, left..left + patch_size]).to_owned()
        })
        .collect();
    let refs: Vec<&Array2<f32>> = windows.iter().collect();
    let probs = predict_many(model, &refs, patch_size)?;
    let values = Array2::from_shape_vec((gr, gc), probs.into_iter().map(|p| p as f32).collect())
        .expect("one probability per window");
    Ok(AggregationGrid {
        values,
        stride,
        patch_size,
        scale,
    })
}

/// Bilinear resize of the grid to `side x side`, clamped to `[0, 1]`.
pub fn grid_to_channel(grid: &AggregationGrid, side: usize) -> Result<Array2<f32>> {
    if grid.values.is_empty() {
        return Err(Error::invalid("empty aggregation grid"));
    }
    Ok(resize_bilinear(&grid.values, side, side).mapv(|v| v.clamp(0.0, 1.0)))
}

impl AggregationGrid {
    pub fn to_raster(&self) -> Raster {
        Raster::new("grid", self.values.clone())
            .with_meta("g", self.values.nrows())
            .with_meta("stride", self.stride)
            .with_meta("patch", self.patch_size)
            .with_meta("scale", self.scale)
    }

    pub fn from_raster(raster: &Raster) -> Result<Self> {
        let field = |key: &str| {
            raster
                .meta(key)
                .ok_or_else(|| Error::format("grid", format!("missing {key}")))
        };
        let num = |key: &str| -> Result<usize> {
            field(key)?
                .parse()
                .map_err(|_| Error::format("grid", format!("bad {key}")))
        };
        if raster.kind != "grid" {
            return Err(Error::format("grid", format!("raster kind {}", raster.kind)));
        }
        Ok(AggregationGrid {
            values: raster.data.clone(),
            stride: num("stride")?,
            patch_size: num("patch")?,
            scale: field("scale")?.parse()?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_raster().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_raster(&Raster::load(path)?)
    }

    /// 8-bit visualization with probability 1 as white.
    pub fn save_pgm(&self, path: &Path) -> Result<()> {
        pgm::write_unit(path, &self.values)
    }
}
