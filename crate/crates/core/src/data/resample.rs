//! Area-average downsampling and bilinear resizing.

use ndarray::Array2;

use crate::data::{Magnification, Scan, ScaledScan};

/// Per-output-pixel list of `(input index, weight)`; weights sum to 1.
fn area_weights(n_in: usize, n_out: usize) -> Vec<Vec<(usize, f64)>> {
    let ratio = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let lo = o as f64 * ratio;
            let hi = (o + 1) as f64 * ratio;
            let first = lo.floor() as usize;
            let last = (hi.ceil() as usize).min(n_in);
            (first..last)
                .filter_map(|i| {
                    let overlap = (hi.min(i as f64 + 1.0) - lo.max(i as f64)).max(0.0);
                    (overlap > 0.0).then_some((i, overlap / ratio))
                })
                .collect()
        })
        .collect()
}

/// Resamples to `rows x cols` by averaging the input area each output pixel
/// covers.
pub fn resample_area(image: &Array2<f32>, rows: usize, cols: usize) -> Array2<f32> {
    let (h, w) = image.dim();
    if (h, w) == (rows, cols) {
        return image.clone();
    }
    let rw = area_weights(h, rows);
    let cw = area_weights(w, cols);
    let mut tmp = Array2::<f64>::zeros((h, cols));
    for r in 0..h {
        for (c, weights) in cw.iter().enumerate() {
            tmp[[r, c]] = weights.iter().map(|&(i, wt)| image[[r, i]] as f64 * wt).sum();
        }
    }
    let mut out = Array2::<f32>::zeros((rows, cols));
    for (r, weights) in rw.iter().enumerate() {
        for c in 0..cols {
            out[[r, c]] = weights.iter().map(|&(i, wt)| tmp[[i, c]] * wt).sum::<f64>() as f32;
        }
    }
    out
}

/// Area-average downsampling; output dims are `round(dim * factor)`.
pub fn downsample(image: &Array2<f32>, factor: Magnification) -> Array2<f32> {
    let (h, w) = image.dim();
    resample_area(image, factor.scaled(h), factor.scaled(w))
}

/// Downsampled mask; a cell is set when any of its footprint is set.
pub fn downsample_mask(mask: &Array2<bool>, rows: usize, cols: usize) -> Array2<bool> {
    resample_area(&mask.mapv(|m| if m { 1.0 } else { 0.0 }), rows, cols).mapv(|v| v > 0.0)
}

/// Brings a base crop to one magnification.
pub fn scale_scan(base: &Scan, scale: Magnification) -> ScaledScan {
    let image = downsample(&base.unit_pixels(), scale);
    let (rows, cols) = image.dim();
    ScaledScan {
        case_id: base.case_id.clone(),
        scale,
        mask: base.annotation.as_ref().map(|a| downsample_mask(&a.mask, rows, cols)),
        grade: base.grade(),
        image,
    }
}

/// Bilinear resize with corner-aligned sampling, so the four corners map
/// onto each other and equal sizes give the identity.
pub fn resize_bilinear(image: &Array2<f32>, rows: usize, cols: usize) -> Array2<f32> {
    let (h, w) = image.dim();
    if (h, w) == (rows, cols) {
        return image.clone();
    }
    let coord = |o: usize, n_out: usize, n_in: usize| -> (usize, usize, f32) {
        if n_out <= 1 || n_in <= 1 {
            return (0, 0, 0.0);
        }
        let x = o as f64 * (n_in - 1) as f64 / (n_out - 1) as f64;
        let lo = (x.floor() as usize).min(n_in - 1);
        let hi = (lo + 1).min(n_in - 1);
        (lo, hi, (x - lo as f64) as f32)
    };
    Array2::from_shape_fn((rows, cols), |(r, c)| {
        let (r0, r1, fr) = coord(r, rows, h);
        let (c0, c1, fc) = coord(c, cols, w);
        let top = image[[r0, c0]] * (1.0 - fc) + image[[r0, c1]] * fc;
        let bottom = image[[r1, c0]] * (1.0 - fc) + image[[r1, c1]] * fc;
        top * (1.0 - fr) + bottom * fr
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_preserved() {
        let img = Array2::from_elem((20, 30), 0.4f32);
        for m in Magnification::ALL {
            let out = downsample(&img, m);
            assert_eq!(out.dim(), (m.scaled(20), m.scaled(30)));
            assert!(out.iter().all(|&v| (v - 0.4).abs() < 1e-6));
        }
    }

    #[test]
    fn output_sizes_from_base() {
        assert_eq!(Magnification::Half.scaled(2048), 1024);
        assert_eq!(Magnification::Third.scaled(2048), 676);
        assert_eq!(Magnification::Quarter.scaled(2048), 512);
        let img = Array2::<f32>::zeros((2048, 2048));
        assert_eq!(downsample(&img, Magnification::Third).dim(), (676, 676));
    }

    #[test]
    fn two_by_two_mean() {
        let img = Array2::from_shape_vec((2, 2), vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        let out = downsample(&img, Magnification::Half);
        assert_eq!(out.dim(), (1, 1));
        assert_eq!(out[[0, 0]], 0.5);
    }

    #[test]
    fn fractional_area_conserves_mass() {
        let img = Array2::from_shape_fn((100, 100), |(r, c)| ((r * 7 + c * 3) % 11) as f32 / 10.0);
        let out = downsample(&img, Magnification::Third);
        let mean_in = img.mean().unwrap();
        let mean_out = out.mean().unwrap();
        assert!((mean_in - mean_out).abs() < 1e-4, "{mean_in} {mean_out}");
    }

    #[test]
    fn mask_downsample_is_any_coverage() {
        let mut m = Array2::from_elem((8, 8), false);
        m[[5, 2]] = true;
        let d = downsample_mask(&m, 2, 2);
        assert_eq!(d.iter().filter(|&&v| v).count(), 1);
        assert!(d[[1, 0]]);
    }

    #[test]
    fn bilinear_identity_constant_and_ramp() {
        let img = Array2::from_shape_fn((32, 32), |(r, c)| (r * 32 + c) as f32);
        assert_eq!(resize_bilinear(&img, 32, 32), img);
        let flat = Array2::from_elem((13, 13), 0.3f32);
        assert!(resize_bilinear(&flat, 32, 32).iter().all(|&v| (v - 0.3).abs() < 1e-6));
        let ramp = Array2::from_shape_fn((13, 13), |(_, c)| c as f32 / 12.0);
        let out = resize_bilinear(&ramp, 32, 32);
        for r in 0..32 {
            for c in 1..32 {
                assert!(out[[r, c]] > out[[r, c - 1]]);
            }
            // corner-aligned: ends map to ends, interior matches x = c * 12 / 31
            assert!((out[[r, 0]]).abs() < 1e-6 && (out[[r, 31]] - 1.0).abs() < 1e-6);
            let x = 10.0 * 12.0 / 31.0 / 12.0;
            assert!((out[[r, 10]] - x).abs() < 1e-6);
        }
    }
}
