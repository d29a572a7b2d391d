//! Orientation normalization and nipple-aligned base cropping.

use ndarray::{s, Array2, Axis};

use crate::data::{Annotation, Laterality, Scan, BASE_SIDE};
use crate::error::{Error, Result};

/// Mirrors right-side scans so every breast points the same way; left
/// scans come back unchanged.
pub fn normalize_orientation(scan: &Scan) -> Scan {
    if scan.laterality == Laterality::Left {
        return scan.clone();
    }
    mirror(scan)
}

/// Horizontal mirror of pixels and mask, keeping metadata.
pub fn mirror(scan: &Scan) -> Scan {
    let flip = |a: &Array2<u16>| a.slice(s![.., ..;-1]).to_owned();
    Scan {
        pixels: flip(&scan.pixels),
        annotation: scan.annotation.as_ref().map(|a| Annotation {
            mask: a.mask.slice(s![.., ..;-1]).to_owned(),
            grade: a.grade,
        }),
        ..scan.clone()
    }
}

/// Nipple location proxy `(row, col)`: the rightmost column holding tissue
/// (intensity above 10% of the scan maximum) and the rounded mean row of
/// that column's tissue pixels.
pub fn nipple_proxy(pixels: &Array2<u16>) -> Result<(usize, usize)> {
    let max = pixels.iter().copied().max().unwrap_or(0);
    let threshold = max as f64 * 0.1;
    let tissue = |v: u16| max > 0 && v as f64 > threshold;
    for (col, column) in pixels.axis_iter(Axis(1)).enumerate().rev() {
        let rows: Vec<usize> = column
            .iter()
            .enumerate()
            .filter(|(_, &v)| tissue(v))
            .map(|(r, _)| r)
            .collect();
        if !rows.is_empty() {
            let mean = rows.iter().sum::<usize>() as f64 / rows.len() as f64;
            return Ok((mean.round() as usize, col));
        }
    }
    Err(Error::invalid("scan has no tissue above the 10% intensity threshold"))
}

/// Top-left corner of the crop window, possibly negative (padding).
pub fn crop_origin(proxy: (usize, usize), side: usize) -> (isize, isize) {
    let row0 = proxy.0 as isize - (side / 2) as isize;
    let col0 = proxy.1 as isize + 1 - side as isize;
    (row0, col0)
}

/// Square crop of `side` whose last column is the nipple column and whose
/// center row is the nipple row. Out-of-bounds regions are zero.
pub fn crop_base_to(scan: &Scan, side: usize) -> Result<Scan> {
    let proxy = nipple_proxy(&scan.pixels)?;
    let origin = crop_origin(proxy, side);
    Ok(Scan {
        pixels: window(&scan.pixels, origin, side, 0),
        annotation: scan.annotation.as_ref().map(|a| Annotation {
            mask: window(&a.mask, origin, side, false),
            grade: a.grade,
        }),
        ..scan.clone()
    })
}

pub fn crop_base(scan: &Scan) -> Result<Scan> {
    crop_base_to(scan, BASE_SIDE)
}

fn window<T: Copy>(src: &Array2<T>, origin: (isize, isize), side: usize, fill: T) -> Array2<T> {
    let (h, w) = src.dim();
    let mut out = Array2::from_elem((side, side), fill);
    let r_lo = origin.0.max(0);
    let r_hi = (origin.0 + side as isize).min(h as isize);
    let c_lo = origin.1.max(0);
    let c_hi = (origin.1 + side as isize).min(w as isize);
    if r_lo < r_hi && c_lo < c_hi {
        out.slice_mut(s![
            (r_lo - origin.0) as usize..(r_hi - origin.0) as usize,
            (c_lo - origin.1) as usize..(c_hi - origin.1) as usize
        ])
        .assign(&src.slice(s![r_lo as usize..r_hi as usize, c_lo as usize..c_hi as usize]));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::View;

    fn scan_with(pixels: Array2<u16>, lat: Laterality, mask: Option<Array2<bool>>) -> Scan {
        let annotation = mask.map(|mask| Annotation { mask, grade: 3 });
        Scan::new("c", lat, View::Cc, pixels, annotation).unwrap()
    }

    fn centroid_col(mask: &Array2<bool>) -> f64 {
        let pts: Vec<usize> = mask.indexed_iter().filter(|(_, &m)| m).map(|((_, c), _)| c).collect();
        pts.iter().sum::<usize>() as f64 / pts.len() as f64
    }

    #[test]
    fn left_unchanged_right_mirrored() {
        let px = Array2::from_shape_fn((4, 6), |(r, c)| (r * 10 + c) as u16);
        let mut mask = Array2::from_elem((4, 6), false);
        mask[[1, 1]] = true;
        mask[[2, 0]] = true;
        let left = scan_with(px.clone(), Laterality::Left, Some(mask.clone()));
        assert_eq!(normalize_orientation(&left), left);

        let right = scan_with(px.clone(), Laterality::Right, Some(mask.clone()));
        let flipped = normalize_orientation(&right);
        assert_eq!(flipped.pixels[[0, 0]], px[[0, 5]]);
        assert_eq!(mirror(&flipped), right);
        let new_mask = &flipped.annotation.as_ref().unwrap().mask;
        assert_eq!(centroid_col(new_mask), 5.0 - centroid_col(&mask));
    }

    #[test]
    fn crop_of_large_scan_follows_proxy() {
        let mut px = Array2::<u16>::zeros((4096, 4096));
        // tissue ends at column 3000, symmetric around row 2000 there
        px.slice_mut(s![1500..2501, 0..=2990]).fill(30000);
        px.slice_mut(s![1990..2011, 2991..=3000]).fill(40000);
        assert_eq!(nipple_proxy(&px).unwrap(), (2000, 3000));
        assert_eq!(crop_origin((2000, 3000), 2048), (976, 953));
        let scan = scan_with(px.clone(), Laterality::Left, None);
        let crop = crop_base(&scan).unwrap();
        assert_eq!(crop.pixels.dim(), (2048, 2048));
        assert_eq!(crop.pixels, px.slice(s![976..3024, 953..3001]).to_owned());
    }

    #[test]
    fn exact_size_scan_is_identity() {
        let px = Array2::from_shape_fn((2048, 2048), |(r, c)| 1000 + ((r + c) % 100) as u16);
        let scan = scan_with(px.clone(), Laterality::Left, None);
        assert_eq!(nipple_proxy(&px).unwrap(), (1024, 2047));
        assert_eq!(crop_base(&scan).unwrap().pixels, px);
    }

    #[test]
    fn small_scan_is_padded_right_aligned() {
        let px = Array2::from_elem((1024, 1024), 5000u16);
        let mask = Array2::from_elem((1024, 1024), true);
        let scan = scan_with(px, Laterality::Left, Some(mask));
        let crop = crop_base(&scan).unwrap();
        assert_eq!(crop.pixels.dim(), (2048, 2048));
        // proxy row is 512 (mean of 0..1024 rounded), so content occupies rows 512..1536
        assert!(crop.pixels.slice(s![512..1536, 1024..]).iter().all(|&v| v == 5000));
        let content: usize = crop.pixels.iter().filter(|&&v| v > 0).count();
        assert_eq!(content, 1024 * 1024);
        assert_eq!(crop.pixels[[0, 2047]], 0);
        assert_eq!(crop.pixels[[1000, 1023]], 0);
        let m = &crop.annotation.unwrap().mask;
        assert_eq!(m.iter().filter(|&&v| v).count(), 1024 * 1024);
    }

    #[test]
    fn empty_scan_rejected() {
        let scan = scan_with(Array2::zeros((16, 16)), Laterality::Left, None);
        assert!(crop_base(&scan).is_err());
    }
}
